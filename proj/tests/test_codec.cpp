// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/codec.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "negrec/corpus.hpp"
#include "negrec/rng.hpp"
#include "negrec/serialize.hpp"
#include "oracles.hpp"

using namespace negrec;
namespace oracle = negrec::testing;

namespace {

// Codec with single-layer identity encoder/decoder (d_feat == d_lat) and
// hand-set codebooks; the whole pipeline is then traceable by hand.
Codec identity_codec(int dim, int levels, int codebook_size) {
  CodecConfig cfg;
  cfg.d_feat = dim;
  cfg.d_lat = dim;
  cfg.levels = levels;
  cfg.codebook_size = codebook_size;
  cfg.hidden = 0;
  Codec codec = Codec::make(cfg, 0);
  for (Mlp* mlp : {&codec.encoder, &codec.decoder}) {
    Mlp::Layer& layer = mlp->layers.at(0);
    std::fill(layer.w.begin(), layer.w.end(), 0.0);
    std::fill(layer.b.begin(), layer.b.end(), 0.0);
    for (int i = 0; i < dim; ++i) layer.w[static_cast<std::size_t>(i) * dim + i] = 1.0;
  }
  return codec;
}

void set_codeword(Codec& codec, int level, int index, const std::vector<double>& v) {
  REQUIRE(static_cast<int>(v.size()) == codec.cfg.d_lat);
  std::copy(v.begin(), v.end(), codec.codeword(level, index));
}

Codec random_codec(const CodecConfig& cfg, std::uint64_t seed) {
  Codec codec = Codec::make(cfg, seed);
  Rng rng(derive_seed(seed, "test.codebooks"));
  for (auto& book : codec.codebooks) {
    for (double& v : book) v = rng.normal();
  }
  return codec;
}

std::vector<std::vector<double>> random_batch(int n, int dim, Rng& rng) {
  std::vector<std::vector<double>> batch(n, std::vector<double>(dim));
  for (auto& row : batch) {
    for (double& v : row) v = rng.normal();
  }
  return batch;
}

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("mlp: identity single layer reproduces its input") {
  Mlp mlp = Mlp::make({3, 3});
  for (int i = 0; i < 3; ++i) mlp.layers[0].w[static_cast<std::size_t>(i) * 3 + i] = 1.0;
  const std::vector<double> x = {0.25, -1.5, 3.0};
  const std::vector<double> y = mlp.forward(x);
  CHECK(y == x);
}

TEST_CASE("mlp: gradients match central finite differences") {
  Mlp mlp = Mlp::make({3, 5, 2});
  Rng rng(derive_seed(99, "mlp.fd"));
  mlp.init_random(rng);
  const std::vector<double> x = {0.3, -0.7, 1.1};
  const std::vector<double> head = {0.8, -1.3};  // loss = sum_j head_j * y_j

  Mlp::Trace trace;
  const std::vector<double> y0 = mlp.forward(x, trace);
  mlp.zero_grad();
  std::vector<double> x_mut = x;
  const std::vector<double> dx = mlp.backward(trace, head);

  const auto loss = [&]() {
    const std::vector<double> y = mlp.forward(x_mut);
    return head[0] * y[0] + head[1] * y[1];
  };

  SUBCASE("input gradient") {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double fd = oracle::central_diff(&x_mut[i], loss, 1e-5);
      CHECK(oracle::rel_err(dx[i], fd) < 1e-4);
    }
  }

  SUBCASE("parameter gradients") {
    mlp.visit_params([&](double* w, double* g, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) {
        const double fd = oracle::central_diff(&w[i], loss, 1e-5);
        CHECK(oracle::rel_err(g[i], fd) < 1e-4);
      }
    });
  }
}

TEST_CASE("quantize: greedy per-level choice matches exhaustive search") {
  CodecConfig cfg;
  cfg.d_feat = 6;
  cfg.d_lat = 5;
  cfg.levels = 3;
  cfg.codebook_size = 17;
  cfg.hidden = 4;
  Codec codec = random_codec(cfg, 42);
  Rng rng(derive_seed(42, "quantize.oracle"));

  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> latent(cfg.d_lat);
    for (double& v : latent) v = 2.0 * rng.normal();
    const QuantizeResult q = quantize(codec, latent);
    REQUIRE(q.sid.codes.size() == 3);
    REQUIRE(q.residuals.size() == 3);
    CHECK(q.residuals[0] == latent);

    std::vector<double> residual = latent;
    std::vector<double> expected_sum(cfg.d_lat, 0.0);
    for (int level = 0; level < cfg.levels; ++level) {
      std::vector<std::vector<double>> rows;
      for (int k = 0; k < cfg.codebook_size; ++k) {
        const double* z = codec.codeword(level, k);
        rows.emplace_back(z, z + cfg.d_lat);
      }
      const int want = oracle::nearest_row(residual, rows);
      CHECK(q.sid.codes[level] == want);
      for (std::size_t i = 0; i < residual.size(); ++i) {
        CHECK(q.residuals[level][i] == doctest::Approx(residual[i]).epsilon(1e-12));
        expected_sum[i] += rows[want][i];
        residual[i] -= rows[want][i];
      }
    }
    // Telescoping: latent - quantized equals the residual left after the
    // last level.
    for (std::size_t i = 0; i < latent.size(); ++i) {
      CHECK(q.quantized[i] == doctest::Approx(expected_sum[i]).epsilon(1e-12));
      CHECK(latent[i] - q.quantized[i] == doctest::Approx(residual[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("quantize: exact ties resolve to the lowest codeword index") {
  Codec codec = identity_codec(1, 2, 2);
  set_codeword(codec, 0, 0, {1.0});
  set_codeword(codec, 0, 1, {-1.0});
  // Level 1: residual is 0 - 1 = -1, equidistant from -3 and +1.
  set_codeword(codec, 1, 0, {-3.0});
  set_codeword(codec, 1, 1, {1.0});

  const QuantizeResult q = quantize(codec, std::vector<double>{0.0});
  CHECK(q.sid.codes == std::vector<std::uint16_t>{0, 0});
  CHECK(q.quantized == std::vector<double>{-2.0});

  // Swapping the level-0 rows still selects index 0: the rule is lowest
  // index, not a preferred sign.
  set_codeword(codec, 0, 0, {-1.0});
  set_codeword(codec, 0, 1, {1.0});
  const QuantizeResult q2 = quantize(codec, std::vector<double>{0.0});
  CHECK(q2.sid.codes[0] == 0);
}

TEST_CASE("rqvae loss: identity pipeline traced by hand") {
  // encoder = decoder = identity, level-0 codewords (1,1) and (-1,-1),
  // level-1 codewords (0,0) and (0.5,0), lambda = 0.25, x = (0.4, 0.8).
  // latent (0.4,0.8) -> level 0 picks (1,1)   [0.40 vs 5.20]
  // residual (-0.6,-0.2) -> level 1 picks (0,0) [0.40 vs 1.25]
  // recon |x - (1,1)|^2 = 0.40, commit = codebook = 0.40 + 0.40 = 0.80
  // total = 0.40 + 0.25 * 1.60 = 0.80
  Codec codec = identity_codec(2, 2, 2);
  codec.cfg.lambda = 0.25;
  set_codeword(codec, 0, 0, {1.0, 1.0});
  set_codeword(codec, 0, 1, {-1.0, -1.0});
  set_codeword(codec, 1, 0, {0.0, 0.0});
  set_codeword(codec, 1, 1, {0.5, 0.0});

  const std::vector<double> x = {0.4, 0.8};
  const QuantizeResult q = quantize(codec, encode(codec, x));
  CHECK(q.sid.codes == std::vector<std::uint16_t>{0, 0});

  const RqvaeBreakdown bd = rqvae_loss(codec, std::span<const double>(x));
  CHECK(bd.recon == doctest::Approx(0.40).epsilon(1e-12));
  CHECK(bd.commit == doctest::Approx(0.80).epsilon(1e-12));
  CHECK(bd.codebook == doctest::Approx(0.80).epsilon(1e-12));
  CHECK(bd.total == doctest::Approx(0.80).epsilon(1e-12));
}

TEST_CASE("rqvae loss: zero when the input sits exactly on a codeword") {
  Codec codec = identity_codec(2, 2, 2);
  const std::vector<double> x = {0.75, -0.5};
  set_codeword(codec, 0, 0, x);
  set_codeword(codec, 0, 1, {10.0, 10.0});
  // Level-1 codebook stays all-zero; the zero residual picks index 0 exactly.
  const RqvaeBreakdown bd = rqvae_loss(codec, std::span<const double>(x));
  CHECK(bd.recon == 0.0);
  CHECK(bd.commit == 0.0);
  CHECK(bd.codebook == 0.0);
  CHECK(bd.total == 0.0);
}

TEST_CASE("rqvae loss: lambda 0 reduces to pure reconstruction error") {
  CodecConfig cfg;
  cfg.d_feat = 4;
  cfg.d_lat = 3;
  cfg.levels = 2;
  cfg.codebook_size = 4;
  cfg.hidden = 5;
  cfg.lambda = 0.0;
  Codec codec = random_codec(cfg, 7);
  Rng rng(derive_seed(7, "lambda0"));
  const auto batch = random_batch(3, cfg.d_feat, rng);

  const RqvaeBreakdown bd = rqvae_loss(codec, FeatureBatch(batch));
  CHECK(bd.total == bd.recon);

  double want = 0.0;
  for (const auto& x : batch) {
    const QuantizeResult q = quantize(codec, encode(codec, x));
    const std::vector<double> xhat = decode(codec, q.quantized);
    for (std::size_t i = 0; i < x.size(); ++i) {
      want += (xhat[i] - x[i]) * (xhat[i] - x[i]);
    }
  }
  want /= static_cast<double>(batch.size());
  CHECK(bd.recon == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("rqvae loss: frozen plan equals the live loss at the base point") {
  CodecConfig cfg;
  cfg.d_feat = 4;
  cfg.d_lat = 3;
  cfg.levels = 3;
  cfg.codebook_size = 5;
  cfg.hidden = 6;
  cfg.lambda = 0.7;
  Codec codec = random_codec(cfg, 13);
  Rng rng(derive_seed(13, "planeq"));
  const auto batch = random_batch(4, cfg.d_feat, rng);

  const RqvaePlan plan = make_rqvae_plan(codec, batch);
  const RqvaeBreakdown live = rqvae_loss(codec, FeatureBatch(batch));
  const RqvaeBreakdown planned = rqvae_loss_with_plan(codec, FeatureBatch(batch), plan);
  CHECK(planned.total == doctest::Approx(live.total).epsilon(1e-14));
  CHECK(planned.recon == doctest::Approx(live.recon).epsilon(1e-14));
  CHECK(planned.commit == doctest::Approx(live.commit).epsilon(1e-14));
  CHECK(planned.codebook == doctest::Approx(live.codebook).epsilon(1e-14));
}

TEST_CASE("rqvae backward: analytic gradients match finite differences") {
  CodecConfig cfg;
  cfg.d_feat = 4;
  cfg.d_lat = 3;
  cfg.levels = 2;
  cfg.codebook_size = 4;
  cfg.hidden = 5;
  cfg.lambda = 0.7;
  cfg.ema_enabled = false;  // codebooks are ordinary parameters here
  Codec codec = random_codec(cfg, 21);
  Rng rng(derive_seed(21, "rqvae.fd"));
  const auto batch = random_batch(3, cfg.d_feat, rng);

  const RqvaePlan plan = make_rqvae_plan(codec, batch);
  codec.zero_grad();
  const RqvaeBreakdown bd = rqvae_backward(codec, FeatureBatch(batch), plan);
  CHECK(bd.total ==
        doctest::Approx(rqvae_loss(codec, FeatureBatch(batch)).total).epsilon(1e-12));

  // Snapshot analytic gradients, then compare every parameter against a
  // central difference through the plan-frozen loss.
  std::vector<std::pair<double*, double>> params;
  codec.visit_params([&](double* w, double* g, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) params.emplace_back(&w[i], g[i]);
  });
  CHECK(params.size() > 100);

  const auto loss = [&]() {
    return rqvae_loss_with_plan(codec, FeatureBatch(batch), plan).total;
  };
  double worst = 0.0;
  for (auto& [ptr, analytic] : params) {
    const double fd = oracle::central_diff(ptr, loss, 1e-5);
    worst = std::max(worst, oracle::rel_err(analytic, fd));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("ema update: two-batch recursion matches the hand computation") {
  CodecConfig cfg;
  cfg.d_feat = 1;
  cfg.d_lat = 1;
  cfg.levels = 1;
  cfg.codebook_size = 2;
  cfg.hidden = 0;
  cfg.ema_decay = 0.5;
  Codec codec = Codec::make(cfg, 0);
  codec.ema_count[0] = {1.0, 1.0};
  codec.ema_sum[0] = {2.0, -2.0};

  BatchAssignments b1 = BatchAssignments::zeros(cfg);
  b1.count[0] = {2.0, 0.0};
  b1.sum[0] = {3.0, 0.0};
  ema_update(codec, b1);
  // N0 = .5*1 + .5*2 = 1.5, m0 = .5*2 + .5*3 = 2.5, z0 = 2.5/(1.5+1e-5)
  // N1 = .5,          m1 = -1,                z1 = -1/(0.5+1e-5)
  CHECK(codec.ema_count[0][0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(codec.ema_sum[0][0] == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(*codec.codeword(0, 0) == doctest::Approx(2.5 / (1.5 + 1e-5)).epsilon(1e-14));
  CHECK(*codec.codeword(0, 1) == doctest::Approx(-1.0 / (0.5 + 1e-5)).epsilon(1e-14));

  BatchAssignments b2 = BatchAssignments::zeros(cfg);
  b2.count[0] = {1.0, 0.0};
  b2.sum[0] = {-0.5, 0.0};
  ema_update(codec, b2);
  // N0 = .5*1.5 + .5*1 = 1.25, m0 = .5*2.5 + .5*(-.5) = 1.0
  CHECK(codec.ema_count[0][0] == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(*codec.codeword(0, 0) == doctest::Approx(1.0 / (1.25 + 1e-5)).epsilon(1e-14));
  CHECK(*codec.codeword(0, 1) == doctest::Approx(-0.5 / (0.25 + 1e-5)).epsilon(1e-14));
}

TEST_CASE("ema update: decay 0 lands on the batch mean") {
  CodecConfig cfg;
  cfg.d_feat = 1;
  cfg.d_lat = 1;
  cfg.levels = 1;
  cfg.codebook_size = 2;
  cfg.hidden = 0;
  cfg.ema_decay = 0.0;
  Codec codec = Codec::make(cfg, 0);
  codec.ema_count[0] = {7.0, 7.0};
  codec.ema_sum[0] = {100.0, 100.0};

  BatchAssignments b = BatchAssignments::zeros(cfg);
  b.count[0] = {2.0, 0.0};
  b.sum[0] = {3.0, 0.0};
  ema_update(codec, b);
  CHECK(*codec.codeword(0, 0) == 3.0 / (2.0 + 1e-5));
  CHECK(*codec.codeword(0, 0) == doctest::Approx(1.5).epsilon(1e-4));
}

TEST_CASE("ema update: codeword with no assignments stays nearly fixed") {
  CodecConfig cfg;
  cfg.d_feat = 1;
  cfg.d_lat = 1;
  cfg.levels = 1;
  cfg.codebook_size = 1;
  cfg.hidden = 0;
  cfg.ema_decay = 0.99;
  Codec codec = Codec::make(cfg, 0);
  codec.ema_count[0] = {1.0};
  codec.ema_sum[0] = {5.0};
  const double before = 5.0 / (1.0 + kEmaEps);

  const BatchAssignments empty = BatchAssignments::zeros(cfg);
  for (int step = 0; step < 50; ++step) ema_update(codec, empty);
  const double after = *codec.codeword(0, 0);
  CHECK(std::abs(after - before) / std::abs(before) < 1e-4);
}

TEST_CASE("batch assignments: accumulate sums residuals per selected code") {
  CodecConfig cfg;
  cfg.d_feat = 2;
  cfg.d_lat = 2;
  cfg.levels = 2;
  cfg.codebook_size = 3;
  cfg.hidden = 0;
  BatchAssignments stats = BatchAssignments::zeros(cfg);
  QuantizeResult q;
  q.sid.codes = {1, 0};
  q.residuals = {{1.0, 2.0}, {-0.25, 0.5}};
  stats.accumulate(q);
  stats.accumulate(q);
  CHECK(stats.count[0] == std::vector<double>{0.0, 2.0, 0.0});
  CHECK(stats.count[1] == std::vector<double>{2.0, 0.0, 0.0});
  CHECK(stats.sum[0][2] == 2.0);   // code 1, component 0
  CHECK(stats.sum[0][3] == 4.0);   // code 1, component 1
  CHECK(stats.sum[1][0] == -0.5);  // code 0, component 0
  CHECK(stats.sum[1][1] == 1.0);
}

TEST_CASE("reconstruct_from_sid: sums codewords and validates indices") {
  Codec codec = identity_codec(2, 2, 2);
  set_codeword(codec, 0, 1, {1.0, 2.0});
  set_codeword(codec, 1, 0, {0.25, -0.5});
  SemanticId sid;
  sid.codes = {1, 0};
  CHECK(reconstruct_from_sid(codec, sid) == std::vector<double>{1.25, 1.5});

  SemanticId wrong_levels;
  wrong_levels.codes = {0};
  CHECK_THROWS_AS(reconstruct_from_sid(codec, wrong_levels), std::out_of_range);
  SemanticId bad_code;
  bad_code.codes = {0, 9};
  CHECK_THROWS_AS(reconstruct_from_sid(codec, bad_code), std::out_of_range);
}

TEST_CASE("codec: dimension and config validation") {
  Codec codec = identity_codec(2, 1, 2);
  CHECK_THROWS_AS(encode(codec, std::vector<double>{1.0, 2.0, 3.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(quantize(codec, std::vector<double>{1.0}), std::invalid_argument);
  CHECK_THROWS_AS(decode(codec, std::vector<double>{1.0, 2.0, 3.0}),
                  std::invalid_argument);
  const std::vector<std::vector<double>> empty;
  CHECK_THROWS_AS(rqvae_loss(codec, FeatureBatch(empty)), std::invalid_argument);

  CodecConfig bad;
  bad.levels = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = CodecConfig{};
  bad.codebook_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = CodecConfig{};
  bad.ema_decay = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = CodecConfig{};
  bad.lambda = -0.1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = CodecConfig{};
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("training: deterministic, converging, and low-collision") {
  SynthConfig synth;
  synth.seed = 1;
  const SynthCorpus sc = generate_synthetic_corpus(synth);

  CodecConfig cfg;
  cfg.d_feat = synth.d_feat;
  cfg.epochs = 40;
  cfg.lr = 2e-3;

  const CodecTrainResult run = train_codec(sc.corpus, cfg, 11);
  REQUIRE(run.log.size() == 40);
  for (const CodecEpochLog& row : run.log) {
    CHECK(std::isfinite(row.recon));
    CHECK(std::isfinite(row.quant));
  }

  SUBCASE("same seed twice gives bit-identical models") {
    const CodecTrainResult again = train_codec(sc.corpus, cfg, 11);
    CHECK(run.codec.codebooks == again.codec.codebooks);
    for (std::size_t l = 0; l < run.codec.encoder.layers.size(); ++l) {
      CHECK(run.codec.encoder.layers[l].w == again.codec.encoder.layers[l].w);
      CHECK(run.codec.decoder.layers[l].w == again.codec.decoder.layers[l].w);
    }
    CHECK(run.codec.ema_count == again.codec.ema_count);
  }

  SUBCASE("reconstruction improves and beats the mean-feature baseline") {
    std::vector<double> first5, last5;
    for (int i = 0; i < 5; ++i) {
      first5.push_back(run.log[i].recon);
      last5.push_back(run.log[run.log.size() - 5 + i].recon);
    }
    CHECK(oracle::mean(last5) < oracle::mean(first5));

    // Baseline: squared error of always predicting the mean feature vector.
    std::vector<double> mean_x(synth.d_feat, 0.0);
    for (const ItemDescriptor& item : sc.corpus.items) {
      for (int i = 0; i < synth.d_feat; ++i) mean_x[i] += item.features[i];
    }
    for (double& v : mean_x) v /= static_cast<double>(sc.corpus.items.size());
    double baseline = 0.0;
    for (const ItemDescriptor& item : sc.corpus.items) {
      for (int i = 0; i < synth.d_feat; ++i) {
        const double d = item.features[i] - mean_x[i];
        baseline += d * d;
      }
    }
    baseline /= static_cast<double>(sc.corpus.items.size());
    CHECK(run.log.back().recon < 0.25 * baseline);
  }

  SUBCASE("assignments collide on fewer than 5% of items") {
    const SidAssignment sids = assign_all(run.codec, sc.corpus.items);
    REQUIRE(sids.by_index.size() == sc.corpus.items.size());
    CHECK(sids.collision_rate < 0.05);
    for (const SidCollision& c : sids.collisions) CHECK(c.items.size() >= 2);
    // Reconstructing from an assigned id reproduces the quantized latent.
    for (std::size_t i = 0; i < 20; ++i) {
      const ItemDescriptor& item = sc.corpus.items[i * 7 % sc.corpus.items.size()];
      const QuantizeResult q = quantize(run.codec, encode(run.codec, item.features));
      CHECK(reconstruct_from_sid(run.codec, q.sid) == q.quantized);
    }
  }

  SUBCASE("save/load round trip") {
    const auto path1 = temp_path("negrec_codec_rt1.bin");
    const auto path2 = temp_path("negrec_codec_rt2.bin");
    run.codec.save(path1.string());
    const Codec loaded = Codec::load(path1.string());
    CHECK(loaded.cfg.d_feat == cfg.d_feat);
    CHECK(loaded.cfg.levels == cfg.levels);
    CHECK(loaded.cfg.codebook_size == cfg.codebook_size);
    loaded.save(path2.string());
    CHECK(hash_file(path1) == hash_file(path2));  // float32 rounding is idempotent

    const SidAssignment a = assign_all(run.codec, sc.corpus.items);
    const SidAssignment b = assign_all(loaded, sc.corpus.items);
    CHECK(a.by_index == b.by_index);
    std::filesystem::remove(path1);
    std::filesystem::remove(path2);
  }

  SUBCASE("sid table save/load round trip") {
    const SidAssignment sids = assign_all(run.codec, sc.corpus.items);
    const auto path = temp_path("negrec_sids_rt.tsv");
    sids.save(path.string());
    const SidAssignment loaded = SidAssignment::load(path.string());
    CHECK(loaded.by_item.size() == sids.by_item.size());
    for (const auto& [item, sid] : sids.by_item) CHECK(loaded.sid_of(item) == sid);
    CHECK(loaded.collisions.size() == sids.collisions.size());
    CHECK(loaded.collision_rate == doctest::Approx(sids.collision_rate).epsilon(1e-12));
    std::filesystem::remove(path);
  }
}

TEST_CASE("assign_all: collision bookkeeping on a hand-built catalog") {
  Codec codec = identity_codec(1, 1, 2);
  set_codeword(codec, 0, 0, {0.0});
  set_codeword(codec, 0, 1, {10.0});
  // Features 0.1, 0.2, 9.9, 0.3 quantize to codes 0, 0, 1, 0.
  std::vector<ItemDescriptor> items = {
      {100, 0, {0.1}}, {200, 0, {0.2}}, {300, 0, {9.9}}, {400, 0, {0.3}}};
  const SidAssignment sids = assign_all(codec, items);
  CHECK(sids.by_index.size() == 4);
  CHECK(sids.by_index[0].codes == std::vector<std::uint16_t>{0});
  CHECK(sids.by_index[2].codes == std::vector<std::uint16_t>{1});
  // 4 items, 2 distinct ids -> rate (4-2)/4 = 0.5; one colliding id.
  CHECK(sids.collision_rate == doctest::Approx(0.5));
  REQUIRE(sids.collisions.size() == 1);
  CHECK(sids.collisions[0].items == std::vector<ItemId>{100, 200, 400});
  CHECK(sids.sid_of(300).codes == std::vector<std::uint16_t>{1});
  CHECK_THROWS_AS(sids.sid_of(999), std::out_of_range);
}

TEST_CASE("codec make: seeded initialization is reproducible") {
  CodecConfig cfg;
  const Codec a = Codec::make(cfg, 5);
  const Codec b = Codec::make(cfg, 5);
  const Codec c = Codec::make(cfg, 6);
  CHECK(a.encoder.layers[0].w == b.encoder.layers[0].w);
  CHECK(a.encoder.layers[0].w != c.encoder.layers[0].w);
}
