// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "negrec/serialize.hpp"

namespace negrec {

namespace {

void check_dim(std::size_t got, int want, const char* what) {
  if (static_cast<int>(got) != want) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch, got " +
                                std::to_string(got) + ", expected " +
                                std::to_string(want));
  }
}

double squared_distance(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double squared_norm_diff(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

Mlp Mlp::make(const std::vector<int>& sizes) {
  if (sizes.size() < 2) throw std::invalid_argument("Mlp::make: need at least two sizes");
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    if (sizes[l] <= 0 || sizes[l + 1] <= 0) {
      throw std::invalid_argument("Mlp::make: sizes must be positive");
    }
    Layer layer;
    layer.in = sizes[l];
    layer.out = sizes[l + 1];
    layer.w.assign(static_cast<std::size_t>(layer.in) * layer.out, 0.0);
    layer.b.assign(layer.out, 0.0);
    layer.gw.assign(layer.w.size(), 0.0);
    layer.gb.assign(layer.b.size(), 0.0);
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

void Mlp::init_random(Rng& rng) {
  for (Layer& layer : layers) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(layer.in));
    for (double& w : layer.w) w = scale * rng.normal();
    std::fill(layer.b.begin(), layer.b.end(), 0.0);
  }
}

std::vector<double> Mlp::forward(std::span<const double> x) const {
  Trace trace;
  return forward(x, trace);
}

std::vector<double> Mlp::forward(std::span<const double> x, Trace& trace) const {
  check_dim(x.size(), input_dim(), "Mlp::forward");
  trace.inputs.clear();
  trace.pre.clear();
  std::vector<double> cur(x.begin(), x.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    trace.inputs.push_back(cur);
    std::vector<double> next(layer.out, 0.0);
    for (int o = 0; o < layer.out; ++o) {
      double s = layer.b[o];
      const double* row = layer.w.data() + static_cast<std::size_t>(o) * layer.in;
      for (int i = 0; i < layer.in; ++i) s += row[i] * cur[i];
      next[o] = s;
    }
    trace.pre.push_back(next);
    if (l + 1 < layers.size()) {
      for (double& v : next) v = std::tanh(v);
    }
    cur = std::move(next);
  }
  return cur;
}

std::vector<double> Mlp::backward(const Trace& trace, std::span<const double> dy) {
  check_dim(dy.size(), output_dim(), "Mlp::backward");
  if (trace.inputs.size() != layers.size()) {
    throw std::invalid_argument("Mlp::backward: trace does not match network");
  }
  std::vector<double> grad(dy.begin(), dy.end());
  for (std::size_t li = layers.size(); li-- > 0;) {
    Layer& layer = layers[li];
    // grad currently holds dLoss/d(activation output of layer li).
    if (li + 1 < layers.size()) {
      // Hidden layer: activation was tanh(pre); d tanh = 1 - tanh^2.
      for (int o = 0; o < layer.out; ++o) {
        const double t = std::tanh(trace.pre[li][o]);
        grad[o] *= 1.0 - t * t;
      }
    }
    const std::vector<double>& in = trace.inputs[li];
    std::vector<double> dprev(layer.in, 0.0);
    for (int o = 0; o < layer.out; ++o) {
      const double g = grad[o];
      layer.gb[o] += g;
      double* gw_row = layer.gw.data() + static_cast<std::size_t>(o) * layer.in;
      const double* w_row = layer.w.data() + static_cast<std::size_t>(o) * layer.in;
      for (int i = 0; i < layer.in; ++i) {
        gw_row[i] += g * in[i];
        dprev[i] += g * w_row[i];
      }
    }
    grad = std::move(dprev);
  }
  return grad;
}

void Mlp::zero_grad() {
  for (Layer& layer : layers) {
    std::fill(layer.gw.begin(), layer.gw.end(), 0.0);
    std::fill(layer.gb.begin(), layer.gb.end(), 0.0);
  }
}

void Mlp::visit_params(const ParamVisitor& fn) {
  for (Layer& layer : layers) {
    fn(layer.w.data(), layer.gw.data(), layer.w.size());
    fn(layer.b.data(), layer.gb.data(), layer.b.size());
  }
}

std::size_t Mlp::num_params() const {
  std::size_t n = 0;
  for (const Layer& layer : layers) n += layer.w.size() + layer.b.size();
  return n;
}

// ---------------------------------------------------------------------------
// CodecConfig / Codec
// ---------------------------------------------------------------------------

void CodecConfig::validate() const {
  if (d_feat <= 0) throw std::invalid_argument("CodecConfig: d_feat must be positive");
  if (d_lat <= 0) throw std::invalid_argument("CodecConfig: d_lat must be positive");
  if (levels < 1 || levels > 4) {
    throw std::invalid_argument("CodecConfig: levels must be in [1, 4]");
  }
  if (codebook_size < 1 || codebook_size > 65536) {
    throw std::invalid_argument("CodecConfig: codebook_size must be in [1, 65536]");
  }
  if (hidden < 0) throw std::invalid_argument("CodecConfig: hidden must be >= 0");
  if (lambda < 0.0) throw std::invalid_argument("CodecConfig: lambda must be >= 0");
  if (ema_decay < 0.0 || ema_decay >= 1.0) {
    throw std::invalid_argument("CodecConfig: ema_decay must be in [0, 1)");
  }
  if (epochs < 0) throw std::invalid_argument("CodecConfig: epochs must be >= 0");
  if (warm_epochs < 0) throw std::invalid_argument("CodecConfig: warm_epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("CodecConfig: batch_size must be >= 1");
  if (lr <= 0.0) throw std::invalid_argument("CodecConfig: lr must be positive");
}

Codec Codec::make(const CodecConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Codec codec;
  codec.cfg = cfg;
  if (cfg.hidden > 0) {
    codec.encoder = Mlp::make({cfg.d_feat, cfg.hidden, cfg.d_lat});
    codec.decoder = Mlp::make({cfg.d_lat, cfg.hidden, cfg.d_feat});
  } else {
    codec.encoder = Mlp::make({cfg.d_feat, cfg.d_lat});
    codec.decoder = Mlp::make({cfg.d_lat, cfg.d_feat});
  }
  Rng rng(derive_seed(seed, "codec.init"));
  codec.encoder.init_random(rng);
  codec.decoder.init_random(rng);
  const std::size_t cb = static_cast<std::size_t>(cfg.codebook_size) * cfg.d_lat;
  codec.codebooks.assign(cfg.levels, std::vector<double>(cb, 0.0));
  codec.gcodebooks.assign(cfg.levels, std::vector<double>(cb, 0.0));
  codec.ema_count.assign(cfg.levels, std::vector<double>(cfg.codebook_size, 0.0));
  codec.ema_sum.assign(cfg.levels, std::vector<double>(cb, 0.0));
  return codec;
}

const double* Codec::codeword(int level, int index) const {
  if (level < 0 || level >= cfg.levels) {
    throw std::out_of_range("Codec::codeword: level out of range");
  }
  if (index < 0 || index >= cfg.codebook_size) {
    throw std::out_of_range("Codec::codeword: index out of range");
  }
  return codebooks[level].data() + static_cast<std::size_t>(index) * cfg.d_lat;
}

double* Codec::codeword(int level, int index) {
  return const_cast<double*>(std::as_const(*this).codeword(level, index));
}

void Codec::zero_grad() {
  encoder.zero_grad();
  decoder.zero_grad();
  for (auto& g : gcodebooks) std::fill(g.begin(), g.end(), 0.0);
}

void Codec::visit_params(const ParamVisitor& fn) {
  encoder.visit_params(fn);
  decoder.visit_params(fn);
  if (!cfg.ema_enabled) {
    for (int d = 0; d < cfg.levels; ++d) {
      fn(codebooks[d].data(), gcodebooks[d].data(), codebooks[d].size());
    }
  }
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

std::vector<double> encode(const Codec& codec, std::span<const double> features) {
  check_dim(features.size(), codec.cfg.d_feat, "encode");
  return codec.encoder.forward(features);
}

QuantizeResult quantize(const Codec& codec, std::span<const double> latent) {
  check_dim(latent.size(), codec.cfg.d_lat, "quantize");
  const int d_lat = codec.cfg.d_lat;
  QuantizeResult result;
  result.quantized.assign(d_lat, 0.0);
  std::vector<double> residual(latent.begin(), latent.end());
  for (int level = 0; level < codec.cfg.levels; ++level) {
    result.residuals.push_back(residual);
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int k = 0; k < codec.cfg.codebook_size; ++k) {
      const double dist =
          squared_distance(residual.data(), codec.codeword(level, k), d_lat);
      if (dist < best_dist) {  // strict: ties keep the lowest index
        best_dist = dist;
        best = k;
      }
    }
    result.sid.codes.push_back(static_cast<std::uint16_t>(best));
    const double* z = codec.codeword(level, best);
    result.selected.emplace_back(z, z + d_lat);
    for (int i = 0; i < d_lat; ++i) {
      result.quantized[i] += z[i];
      residual[i] -= z[i];
    }
  }
  return result;
}

std::vector<double> decode(const Codec& codec, std::span<const double> latent) {
  check_dim(latent.size(), codec.cfg.d_lat, "decode");
  return codec.decoder.forward(latent);
}

std::vector<double> reconstruct_from_sid(const Codec& codec, const SemanticId& sid) {
  if (static_cast<int>(sid.codes.size()) != codec.cfg.levels) {
    throw std::out_of_range("reconstruct_from_sid: id has " +
                            std::to_string(sid.codes.size()) + " levels, codec has " +
                            std::to_string(codec.cfg.levels));
  }
  std::vector<double> sum(codec.cfg.d_lat, 0.0);
  for (int level = 0; level < codec.cfg.levels; ++level) {
    const double* z = codec.codeword(level, sid.codes[level]);
    for (int i = 0; i < codec.cfg.d_lat; ++i) sum[i] += z[i];
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

RqvaePlan make_rqvae_plan(const Codec& codec, FeatureBatch batch) {
  RqvaePlan plan;
  plan.items.reserve(batch.size());
  for (const std::vector<double>& x : batch) {
    const std::vector<double> latent = encode(codec, x);
    QuantizeResult q = quantize(codec, latent);
    RqvaePlan::Item item;
    item.sid = q.sid;
    item.st_offset.resize(latent.size());
    for (std::size_t i = 0; i < latent.size(); ++i) {
      item.st_offset[i] = q.quantized[i] - latent[i];
    }
    item.frozen_z = std::move(q.selected);
    item.frozen_r = std::move(q.residuals);
    plan.items.push_back(std::move(item));
  }
  return plan;
}

RqvaeBreakdown rqvae_loss_with_plan(const Codec& codec, FeatureBatch batch,
                                    const RqvaePlan& plan) {
  if (batch.empty()) throw std::invalid_argument("rqvae_loss: empty batch");
  if (plan.items.size() != batch.size()) {
    throw std::invalid_argument("rqvae_loss: plan does not match batch");
  }
  const int d_lat = codec.cfg.d_lat;
  RqvaeBreakdown bd;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const std::vector<double>& x = batch[n];
    const RqvaePlan::Item& item = plan.items[n];
    const std::vector<double> latent = encode(codec, x);
    // Straight-through reconstruction: the decoder sees the quantized vector,
    // expressed as latent + frozen offset so the encoder stays on the path.
    std::vector<double> dec_in(d_lat);
    for (int i = 0; i < d_lat; ++i) dec_in[i] = latent[i] + item.st_offset[i];
    const std::vector<double> xhat = decode(codec, dec_in);
    bd.recon += squared_norm_diff(xhat, x);
    // Quantization terms with the stop-gradients replaced by frozen copies.
    std::vector<double> residual = latent;
    for (int level = 0; level < codec.cfg.levels; ++level) {
      bd.commit += squared_norm_diff(residual, item.frozen_z[level]);
      const double* z = codec.codeword(level, item.sid.codes[level]);
      bd.codebook +=
          squared_norm_diff(item.frozen_r[level], std::span<const double>(z, d_lat));
      for (int i = 0; i < d_lat; ++i) residual[i] -= item.frozen_z[level][i];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  bd.recon *= inv;
  bd.commit *= inv;
  bd.codebook *= inv;
  bd.total = bd.recon + codec.cfg.lambda * (bd.commit + bd.codebook);
  return bd;
}

RqvaeBreakdown rqvae_loss(const Codec& codec, FeatureBatch batch) {
  return rqvae_loss_with_plan(codec, batch, make_rqvae_plan(codec, batch));
}

RqvaeBreakdown rqvae_loss(const Codec& codec, std::span<const double> features) {
  const std::vector<std::vector<double>> batch = {
      std::vector<double>(features.begin(), features.end())};
  return rqvae_loss(codec, FeatureBatch(batch));
}

RqvaeBreakdown rqvae_backward(Codec& codec, FeatureBatch batch, const RqvaePlan& plan) {
  if (batch.empty()) throw std::invalid_argument("rqvae_backward: empty batch");
  if (plan.items.size() != batch.size()) {
    throw std::invalid_argument("rqvae_backward: plan does not match batch");
  }
  const int d_lat = codec.cfg.d_lat;
  const double lambda = codec.cfg.lambda;
  const double inv = 1.0 / static_cast<double>(batch.size());
  RqvaeBreakdown bd;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const std::vector<double>& x = batch[n];
    const RqvaePlan::Item& item = plan.items[n];
    Mlp::Trace enc_trace;
    const std::vector<double> latent = codec.encoder.forward(x, enc_trace);
    std::vector<double> dec_in(d_lat);
    for (int i = 0; i < d_lat; ++i) dec_in[i] = latent[i] + item.st_offset[i];
    Mlp::Trace dec_trace;
    const std::vector<double> xhat = codec.decoder.forward(dec_in, dec_trace);

    // Reconstruction term and its gradient through the decoder. The decoder
    // input gradient passes straight through to the latent.
    std::vector<double> dxhat(codec.cfg.d_feat);
    double recon = 0.0;
    for (int i = 0; i < codec.cfg.d_feat; ++i) {
      const double e = xhat[i] - x[i];
      recon += e * e;
      dxhat[i] = 2.0 * e * inv;
    }
    bd.recon += recon;
    std::vector<double> dlatent = codec.decoder.backward(dec_trace, dxhat);

    // Commitment terms: |R_d - sg[Z_d]|^2 with R_d = latent - sum_{i<d} sg[Z_i].
    std::vector<double> residual = latent;
    for (int level = 0; level < codec.cfg.levels; ++level) {
      for (int i = 0; i < d_lat; ++i) {
        const double diff = residual[i] - item.frozen_z[level][i];
        bd.commit += diff * diff;
        dlatent[i] += lambda * 2.0 * diff * inv;
        residual[i] -= item.frozen_z[level][i];
      }
      // Codebook terms: |sg[R_d] - Z_d|^2 pulls the selected codeword.
      const int k = item.sid.codes[level];
      const double* z = codec.codeword(level, k);
      double* gz = codec.gcodebooks[level].data() + static_cast<std::size_t>(k) * d_lat;
      for (int i = 0; i < d_lat; ++i) {
        const double diff = item.frozen_r[level][i] - z[i];
        bd.codebook += diff * diff;
        gz[i] += lambda * 2.0 * (z[i] - item.frozen_r[level][i]) * inv;
      }
    }
    codec.encoder.backward(enc_trace, dlatent);
  }
  bd.recon *= inv;
  bd.commit *= inv;
  bd.codebook *= inv;
  bd.total = bd.recon + lambda * (bd.commit + bd.codebook);
  return bd;
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

BatchAssignments BatchAssignments::zeros(const CodecConfig& cfg) {
  BatchAssignments a;
  a.levels = cfg.levels;
  a.codebook_size = cfg.codebook_size;
  a.d_lat = cfg.d_lat;
  a.count.assign(cfg.levels, std::vector<double>(cfg.codebook_size, 0.0));
  a.sum.assign(cfg.levels,
               std::vector<double>(static_cast<std::size_t>(cfg.codebook_size) * cfg.d_lat, 0.0));
  return a;
}

void BatchAssignments::accumulate(const QuantizeResult& q) {
  if (static_cast<int>(q.sid.codes.size()) != levels) {
    throw std::invalid_argument("BatchAssignments: level count mismatch");
  }
  for (int level = 0; level < levels; ++level) {
    const int k = q.sid.codes[level];
    count[level][k] += 1.0;
    double* s = sum[level].data() + static_cast<std::size_t>(k) * d_lat;
    for (int i = 0; i < d_lat; ++i) s[i] += q.residuals[level][i];
  }
}

void ema_update(Codec& codec, const BatchAssignments& batch) {
  if (batch.levels != codec.cfg.levels || batch.codebook_size != codec.cfg.codebook_size ||
      batch.d_lat != codec.cfg.d_lat) {
    throw std::invalid_argument("ema_update: shape mismatch");
  }
  const double decay = codec.cfg.ema_decay;
  for (int level = 0; level < codec.cfg.levels; ++level) {
    for (int k = 0; k < codec.cfg.codebook_size; ++k) {
      double& count = codec.ema_count[level][k];
      count = decay * count + (1.0 - decay) * batch.count[level][k];
      double* m = codec.ema_sum[level].data() + static_cast<std::size_t>(k) * codec.cfg.d_lat;
      const double* s = batch.sum[level].data() + static_cast<std::size_t>(k) * codec.cfg.d_lat;
      double* z = codec.codeword(level, k);
      for (int i = 0; i < codec.cfg.d_lat; ++i) {
        m[i] = decay * m[i] + (1.0 - decay) * s[i];
        z[i] = m[i] / (count + kEmaEps);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<double>> collect_features(std::span<const ItemDescriptor> items,
                                                  const CodecConfig& cfg) {
  if (items.empty()) throw std::invalid_argument("train_codec: no items");
  std::vector<std::vector<double>> features;
  features.reserve(items.size());
  for (const ItemDescriptor& item : items) {
    check_dim(item.features.size(), cfg.d_feat, "train_codec");
    features.push_back(item.features);
  }
  return features;
}

// Initializes each level's codebook from the pool of residuals reaching that
// level, then advances the pool by greedy assignment at that level alone.
void init_codebooks(Codec& codec, const std::vector<std::vector<double>>& latents,
                    Rng& rng) {
  const CodecConfig& cfg = codec.cfg;
  std::vector<std::vector<double>> pool = latents;
  for (int level = 0; level < cfg.levels; ++level) {
    std::vector<std::size_t> picks;
    if (pool.size() >= static_cast<std::size_t>(cfg.codebook_size)) {
      picks = rng.sample_without_replacement(pool.size(), cfg.codebook_size);
    } else {
      picks.reserve(cfg.codebook_size);
      for (int k = 0; k < cfg.codebook_size; ++k) {
        picks.push_back(rng.uniform_int(pool.size()));
      }
    }
    for (int k = 0; k < cfg.codebook_size; ++k) {
      double* z = codec.codeword(level, k);
      const std::vector<double>& src = pool[picks[k]];
      std::copy(src.begin(), src.end(), z);
      // Seed the EMA state so the first update decays from the init point.
      codec.ema_count[level][k] = 1.0;
      double* m = codec.ema_sum[level].data() + static_cast<std::size_t>(k) * cfg.d_lat;
      std::copy(src.begin(), src.end(), m);
    }
    for (std::vector<double>& r : pool) {
      int best = 0;
      double best_dist = std::numeric_limits<double>::infinity();
      for (int k = 0; k < cfg.codebook_size; ++k) {
        const double dist = squared_distance(r.data(), codec.codeword(level, k), cfg.d_lat);
        if (dist < best_dist) {
          best_dist = dist;
          best = k;
        }
      }
      const double* z = codec.codeword(level, best);
      for (int i = 0; i < cfg.d_lat; ++i) r[i] -= z[i];
    }
  }
}

}  // namespace

CodecTrainResult train_codec(std::span<const ItemDescriptor> items, const CodecConfig& cfg,
                             std::uint64_t seed) {
  cfg.validate();
  const std::vector<std::vector<double>> features = collect_features(items, cfg);
  const std::size_t n = features.size();

  Codec codec = Codec::make(cfg, seed);
  Rng rng(derive_seed(seed, "codec.train"));
  Adam adam(cfg.lr);
  const auto walk = [&codec](const ParamVisitor& fn) { codec.visit_params(fn); };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  // Warm phase: plain autoencoder so the latent space is meaningful before
  // the codebooks are planted in it.
  for (int epoch = 0; epoch < cfg.warm_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(stop - start);
      codec.zero_grad();
      for (std::size_t b = start; b < stop; ++b) {
        const std::vector<double>& x = features[order[b]];
        Mlp::Trace enc_trace, dec_trace;
        const std::vector<double> latent = codec.encoder.forward(x, enc_trace);
        const std::vector<double> xhat = codec.decoder.forward(latent, dec_trace);
        std::vector<double> dxhat(cfg.d_feat);
        for (int i = 0; i < cfg.d_feat; ++i) dxhat[i] = 2.0 * (xhat[i] - x[i]) * inv;
        const std::vector<double> dlatent = codec.decoder.backward(dec_trace, dxhat);
        codec.encoder.backward(enc_trace, dlatent);
      }
      adam.step(walk);
    }
  }

  {
    std::vector<std::vector<double>> latents;
    latents.reserve(n);
    for (const std::vector<double>& x : features) latents.push_back(encode(codec, x));
    init_codebooks(codec, latents, rng);
  }

  Codec& c = codec;
  std::vector<CodecEpochLog> log;
  std::vector<std::vector<double>> epoch_latents(n);
  std::vector<std::vector<char>> assigned(cfg.levels,
                                          std::vector<char>(cfg.codebook_size, 0));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (auto& level : assigned) std::fill(level.begin(), level.end(), 0);
    double recon_sum = 0.0;
    double quant_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::vector<std::vector<double>> batch;
      batch.reserve(stop - start);
      RqvaePlan plan;
      BatchAssignments stats = BatchAssignments::zeros(cfg);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        batch.push_back(features[idx]);
        const std::vector<double> latent = encode(c, features[idx]);
        epoch_latents[idx] = latent;
        QuantizeResult q = quantize(c, latent);
        for (int level = 0; level < cfg.levels; ++level) {
          assigned[level][q.sid.codes[level]] = 1;
        }
        stats.accumulate(q);
        RqvaePlan::Item item;
        item.sid = q.sid;
        item.st_offset.resize(cfg.d_lat);
        for (int i = 0; i < cfg.d_lat; ++i) item.st_offset[i] = q.quantized[i] - latent[i];
        item.frozen_z = std::move(q.selected);
        item.frozen_r = std::move(q.residuals);
        plan.items.push_back(std::move(item));
      }
      c.zero_grad();
      const RqvaeBreakdown bd = rqvae_backward(c, batch, plan);
      if (!std::isfinite(bd.total)) {
        throw std::runtime_error("train_codec: loss diverged at epoch " +
                                 std::to_string(epoch));
      }
      adam.step(walk);
      if (cfg.ema_enabled) ema_update(c, stats);
      recon_sum += bd.recon * static_cast<double>(batch.size());
      quant_sum += (bd.commit + bd.codebook) * static_cast<double>(batch.size());
    }

    // Reseed codewords that went a full epoch without an assignment.
    int reseeded = 0;
    for (int level = 0; level < cfg.levels; ++level) {
      for (int k = 0; k < cfg.codebook_size; ++k) {
        if (assigned[level][k]) continue;
        const std::vector<double>& src = epoch_latents[rng.uniform_int(n)];
        double* z = c.codeword(level, k);
        std::copy(src.begin(), src.end(), z);
        c.ema_count[level][k] = 1.0;
        double* m = c.ema_sum[level].data() + static_cast<std::size_t>(k) * cfg.d_lat;
        std::copy(src.begin(), src.end(), m);
        ++reseeded;
      }
    }

    log.push_back({epoch, recon_sum / static_cast<double>(n),
                   quant_sum / static_cast<double>(n), reseeded});
  }
  return {std::move(codec), std::move(log)};
}

CodecTrainResult train_codec(const Corpus& corpus, const CodecConfig& cfg,
                             std::uint64_t seed) {
  return train_codec(std::span<const ItemDescriptor>(corpus.items), cfg, seed);
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

const SemanticId& SidAssignment::sid_of(ItemId item) const {
  const auto it = by_item.find(item);
  if (it == by_item.end()) {
    throw std::out_of_range("SidAssignment: unknown item " + std::to_string(item));
  }
  return it->second;
}

SidAssignment assign_all(const Codec& codec, std::span<const ItemDescriptor> items) {
  SidAssignment out;
  out.by_index.reserve(items.size());
  std::unordered_map<std::uint64_t, std::vector<ItemId>> groups;
  for (const ItemDescriptor& item : items) {
    QuantizeResult q = quantize(codec, encode(codec, item.features));
    groups[q.sid.packed()].push_back(item.item);
    out.by_item.emplace(item.item, q.sid);
    out.by_index.push_back(std::move(q.sid));
  }
  std::size_t distinct = groups.size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto it = groups.find(out.by_index[i].packed());
    if (it != groups.end() && it->second.size() >= 2) {
      out.collisions.push_back({out.by_index[i], it->second});
      groups.erase(it);  // report each colliding id once, in first-seen order
    }
  }
  if (!items.empty()) {
    out.collision_rate =
        static_cast<double>(items.size() - distinct) / static_cast<double>(items.size());
  }
  return out;
}

void SidAssignment::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("SidAssignment::save: cannot open " + path);
  // One line per item: item id then one code per level, tab-separated.
  std::vector<ItemId> ids;
  ids.reserve(by_item.size());
  for (const auto& [id, sid] : by_item) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  for (const ItemId id : ids) {
    out << id;
    for (const std::uint16_t code : by_item.at(id).codes) out << '\t' << code;
    out << '\n';
  }
  if (!out) throw std::runtime_error("SidAssignment::save: write failed for " + path);
}

SidAssignment SidAssignment::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("SidAssignment::load: cannot open " + path);
  SidAssignment out;
  std::unordered_map<std::uint64_t, std::vector<ItemId>> groups;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ItemId id = 0;
    if (!(ss >> id)) {
      throw std::runtime_error("SidAssignment::load: bad line " + std::to_string(line_no));
    }
    SemanticId sid;
    long code = 0;
    while (ss >> code) {
      if (code < 0 || code > 65535) {
        throw std::runtime_error("SidAssignment::load: code out of range at line " +
                                 std::to_string(line_no));
      }
      sid.codes.push_back(static_cast<std::uint16_t>(code));
    }
    if (sid.codes.empty()) {
      throw std::runtime_error("SidAssignment::load: no codes at line " +
                               std::to_string(line_no));
    }
    groups[sid.packed()].push_back(id);
    out.by_item.emplace(id, sid);
    out.by_index.push_back(std::move(sid));
  }
  const std::size_t distinct = groups.size();
  for (std::size_t i = 0; i < out.by_index.size(); ++i) {
    const auto it = groups.find(out.by_index[i].packed());
    if (it != groups.end() && it->second.size() >= 2) {
      out.collisions.push_back({out.by_index[i], it->second});
      groups.erase(it);
    }
  }
  if (!out.by_index.empty()) {
    out.collision_rate = static_cast<double>(out.by_index.size() - distinct) /
                         static_cast<double>(out.by_index.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void Codec::save(const std::string& path) const {
  TensorFile file;
  file.set_meta("kind", 1);  // 1 = residual-quantizing autoencoder
  file.set_meta("d_feat", cfg.d_feat);
  file.set_meta("d_lat", cfg.d_lat);
  file.set_meta("levels", cfg.levels);
  file.set_meta("codebook_size", cfg.codebook_size);
  file.set_meta("hidden", cfg.hidden);
  file.set_meta("ema_enabled", cfg.ema_enabled ? 1 : 0);
  file.set_meta("epochs", cfg.epochs);
  file.set_meta("warm_epochs", cfg.warm_epochs);
  file.set_meta("batch_size", cfg.batch_size);
  file.add("cfg.lambda", {1}, {cfg.lambda});
  file.add("cfg.ema_decay", {1}, {cfg.ema_decay});
  file.add("cfg.lr", {1}, {cfg.lr});
  const auto add_mlp = [&file](const std::string& prefix, const Mlp& mlp) {
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
      const Mlp::Layer& layer = mlp.layers[l];
      file.add(prefix + "." + std::to_string(l) + ".w",
               {static_cast<std::size_t>(layer.out), static_cast<std::size_t>(layer.in)},
               layer.w);
      file.add(prefix + "." + std::to_string(l) + ".b",
               {static_cast<std::size_t>(layer.out)}, layer.b);
    }
  };
  add_mlp("enc", encoder);
  add_mlp("dec", decoder);
  for (int d = 0; d < cfg.levels; ++d) {
    const auto k = static_cast<std::size_t>(cfg.codebook_size);
    const auto dl = static_cast<std::size_t>(cfg.d_lat);
    file.add("codebook." + std::to_string(d), {k, dl}, codebooks[d]);
    file.add("ema_count." + std::to_string(d), {k}, ema_count[d]);
    file.add("ema_sum." + std::to_string(d), {k, dl}, ema_sum[d]);
  }
  file.save(path);
}

Codec Codec::load(const std::string& path) {
  const TensorFile file = TensorFile::load(path);
  if (!file.has_meta("kind") || file.meta("kind") != 1) {
    throw std::runtime_error("Codec::load: " + path + " is not a codec file");
  }
  CodecConfig cfg;
  cfg.d_feat = static_cast<int>(file.meta("d_feat"));
  cfg.d_lat = static_cast<int>(file.meta("d_lat"));
  cfg.levels = static_cast<int>(file.meta("levels"));
  cfg.codebook_size = static_cast<int>(file.meta("codebook_size"));
  cfg.hidden = static_cast<int>(file.meta("hidden"));
  cfg.ema_enabled = file.meta("ema_enabled") != 0;
  cfg.epochs = static_cast<int>(file.meta("epochs"));
  cfg.warm_epochs = static_cast<int>(file.meta("warm_epochs"));
  cfg.batch_size = static_cast<int>(file.meta("batch_size"));
  cfg.lambda = file.values("cfg.lambda").at(0);
  cfg.ema_decay = file.values("cfg.ema_decay").at(0);
  cfg.lr = file.values("cfg.lr").at(0);
  Codec codec = Codec::make(cfg, 0);
  const auto load_mlp = [&file](const std::string& prefix, Mlp& mlp) {
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
      Mlp::Layer& layer = mlp.layers[l];
      layer.w = file.values(prefix + "." + std::to_string(l) + ".w");
      layer.b = file.values(prefix + "." + std::to_string(l) + ".b");
      if (layer.w.size() != static_cast<std::size_t>(layer.in) * layer.out ||
          layer.b.size() != static_cast<std::size_t>(layer.out)) {
        throw std::runtime_error("Codec::load: tensor shape mismatch for " + prefix);
      }
    }
  };
  load_mlp("enc", codec.encoder);
  load_mlp("dec", codec.decoder);
  for (int d = 0; d < cfg.levels; ++d) {
    codec.codebooks[d] = file.values("codebook." + std::to_string(d));
    codec.ema_count[d] = file.values("ema_count." + std::to_string(d));
    codec.ema_sum[d] = file.values("ema_sum." + std::to_string(d));
  }
  return codec;
}

}  // namespace negrec
