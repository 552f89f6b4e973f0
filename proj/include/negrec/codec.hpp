// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "negrec/corpus.hpp"
#include "negrec/optimizer.hpp"
#include "negrec/rng.hpp"
#include "negrec/types.hpp"

namespace negrec {

// ---------------------------------------------------------------------------
// Small dense MLP with tanh hidden activations and a linear output layer.
// Forward/backward are hand-written; backward accumulates parameter gradients
// and returns the gradient with respect to the input.
// ---------------------------------------------------------------------------

struct Mlp {
  struct Layer {
    int in = 0;
    int out = 0;
    std::vector<double> w;   // row-major [out][in]
    std::vector<double> b;   // [out]
    std::vector<double> gw;  // gradient accumulators, same shapes
    std::vector<double> gb;
  };

  std::vector<Layer> layers;

  // Builds zero-initialized layers with the given sizes, e.g. {32, 64, 16}
  // gives two layers 32->64->16.
  static Mlp make(const std::vector<int>& sizes);

  // Gaussian init with scale 1/sqrt(fan_in); biases zero.
  void init_random(Rng& rng);

  int input_dim() const { return layers.front().in; }
  int output_dim() const { return layers.back().out; }

  // Intermediate activations kept for backward: inputs[l] is the input to
  // layer l, pre[l] the pre-activation output of layer l.
  struct Trace {
    std::vector<std::vector<double>> inputs;
    std::vector<std::vector<double>> pre;
  };

  std::vector<double> forward(std::span<const double> x) const;
  std::vector<double> forward(std::span<const double> x, Trace& trace) const;

  // Accumulates into gw/gb; returns dLoss/dInput. `trace` must come from a
  // forward call on the same input with the current parameters.
  std::vector<double> backward(const Trace& trace, std::span<const double> dy);

  void zero_grad();
  void visit_params(const ParamVisitor& fn);
  std::size_t num_params() const;
};

// ---------------------------------------------------------------------------
// Residual quantizer: per level a codebook of `codebook_size` vectors in the
// latent space. Assignment is greedy nearest-codeword per level (squared
// Euclidean distance, ties broken toward the lowest index).
// ---------------------------------------------------------------------------

struct CodecConfig {
  int d_feat = 32;
  int d_lat = 16;
  int levels = 3;
  int codebook_size = 64;
  int hidden = 64;           // hidden layer width; 0 = single linear layer
  double lambda = 0.25;      // weight of the quantization terms in the loss
  double ema_decay = 0.99;   // codebook EMA decay
  bool ema_enabled = true;   // false: codebooks learn from the gradient term
  int epochs = 40;
  int warm_epochs = 1;       // autoencoder-only epochs before codebook init
  int batch_size = 32;
  double lr = 1e-3;

  void validate() const;
};

struct Codec {
  CodecConfig cfg;
  Mlp encoder;
  Mlp decoder;
  // codebooks[d] is row-major [codebook_size][d_lat].
  std::vector<std::vector<double>> codebooks;
  // EMA statistics per level: counts [K], vector sums [K][d_lat] (row-major).
  std::vector<std::vector<double>> ema_count;
  std::vector<std::vector<double>> ema_sum;
  // Gradient accumulators for the codebooks (used when EMA is disabled).
  std::vector<std::vector<double>> gcodebooks;

  static Codec make(const CodecConfig& cfg, std::uint64_t seed);

  const double* codeword(int level, int index) const;
  double* codeword(int level, int index);

  void zero_grad();
  // Walks encoder, decoder, and (when EMA is disabled) codebook parameters.
  void visit_params(const ParamVisitor& fn);

  void save(const std::string& path) const;
  static Codec load(const std::string& path);
};

// Laplace-style denominator guard in the EMA codeword update m / (N + eps).
inline constexpr double kEmaEps = 1e-5;

struct QuantizeResult {
  SemanticId sid;
  std::vector<double> quantized;               // sum of selected codewords
  std::vector<std::vector<double>> residuals;  // residual entering each level
  std::vector<std::vector<double>> selected;   // selected codeword per level
};

std::vector<double> encode(const Codec& codec, std::span<const double> features);
QuantizeResult quantize(const Codec& codec, std::span<const double> latent);
std::vector<double> decode(const Codec& codec, std::span<const double> latent);
// Sum of the codewords named by the id; throws on level/index out of range.
std::vector<double> reconstruct_from_sid(const Codec& codec, const SemanticId& sid);

// ---------------------------------------------------------------------------
// Loss. total = recon + lambda * (commit + codebook) where
//   recon    = |x - dec(straight_through(latent))|^2
//   commit   = sum_d |R_d - sg[Z_d]|^2   (pulls the encoder toward codewords)
//   codebook = sum_d |sg[R_d] - Z_d|^2   (pulls codewords toward residuals)
// All values are means over the batch. The "plan" freezes everything the
// stop-gradients hold constant (assignments, sg'd vectors, the straight-
// through offset), so the loss becomes an ordinary differentiable function of
// the parameters; at the point where the plan was built it equals the live
// loss exactly.
// ---------------------------------------------------------------------------

struct RqvaeBreakdown {
  double total = 0.0;
  double recon = 0.0;
  double commit = 0.0;
  double codebook = 0.0;
};

struct RqvaePlan {
  struct Item {
    SemanticId sid;
    std::vector<double> st_offset;             // quantized - latent at base point
    std::vector<std::vector<double>> frozen_z;  // sg[Z_d]
    std::vector<std::vector<double>> frozen_r;  // sg[R_d]
  };
  std::vector<Item> items;
};

using FeatureBatch = std::span<const std::vector<double>>;

RqvaePlan make_rqvae_plan(const Codec& codec, FeatureBatch batch);
RqvaeBreakdown rqvae_loss(const Codec& codec, FeatureBatch batch);
RqvaeBreakdown rqvae_loss(const Codec& codec, std::span<const double> features);
RqvaeBreakdown rqvae_loss_with_plan(const Codec& codec, FeatureBatch batch,
                                    const RqvaePlan& plan);
// Accumulates parameter gradients of the planned loss (mean over the batch)
// into the codec; returns the loss breakdown at the current point.
RqvaeBreakdown rqvae_backward(Codec& codec, FeatureBatch batch, const RqvaePlan& plan);

// ---------------------------------------------------------------------------
// EMA codebook maintenance.
// ---------------------------------------------------------------------------

struct BatchAssignments {
  int levels = 0;
  int codebook_size = 0;
  int d_lat = 0;
  std::vector<std::vector<double>> count;  // [levels][K]
  std::vector<std::vector<double>> sum;    // [levels][K*d_lat]

  static BatchAssignments zeros(const CodecConfig& cfg);
  // Adds one quantized sample: per level, count[k] += 1 and sum[k] += R_d.
  void accumulate(const QuantizeResult& q);
};

// N' = decay*N + (1-decay)*n,  m' = decay*m + (1-decay)*s,
// codeword = m' / (N' + kEmaEps).
void ema_update(Codec& codec, const BatchAssignments& batch);

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

struct CodecEpochLog {
  int epoch = 0;
  double recon = 0.0;  // mean reconstruction term
  double quant = 0.0;  // mean commit + codebook terms (unweighted by lambda)
  int reseeded = 0;    // codewords reset this epoch
};

struct CodecTrainResult {
  Codec codec;
  std::vector<CodecEpochLog> log;
};

CodecTrainResult train_codec(std::span<const ItemDescriptor> items,
                             const CodecConfig& cfg, std::uint64_t seed);
CodecTrainResult train_codec(const Corpus& corpus, const CodecConfig& cfg,
                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Assignment of ids to a full catalog.
// ---------------------------------------------------------------------------

struct SidCollision {
  SemanticId sid;
  std::vector<ItemId> items;  // every item sharing this id (size >= 2)
};

struct SidAssignment {
  std::vector<SemanticId> by_index;  // parallel to the input item span
  std::unordered_map<ItemId, SemanticId> by_item;
  std::vector<SidCollision> collisions;
  double collision_rate = 0.0;  // (items - distinct ids) / items

  const SemanticId& sid_of(ItemId item) const;

  void save(const std::string& path) const;
  static SidAssignment load(const std::string& path);
};

SidAssignment assign_all(const Codec& codec, std::span<const ItemDescriptor> items);

}  // namespace negrec
