// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>

#include "negrec/serialize.hpp"

namespace negrec {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * std::erfc(-x * M_SQRT1_2); }

double gelu_grad(double x) {
  const double phi = 0.5 * std::erfc(-x * M_SQRT1_2);              // CDF
  const double dens = std::exp(-0.5 * x * x) * 0.3989422804014327;  // PDF
  return phi + x * dens;
}

void check_token_range(const TokenVocab& vocab, std::span<const int> tokens) {
  for (int t : tokens) {
    if (t < 0 || t >= vocab.size()) {
      throw std::out_of_range("policy: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(vocab.size()));
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// TokenVocab
// ---------------------------------------------------------------------------

TokenVocab TokenVocab::make(int levels, int codebook_size) {
  if (levels < 1 || levels > 4) {
    throw std::invalid_argument("TokenVocab: levels must be in [1, 4]");
  }
  if (codebook_size < 1 || codebook_size > 65536) {
    throw std::invalid_argument("TokenVocab: codebook_size must be in [1, 65536]");
  }
  return TokenVocab{levels, codebook_size};
}

int TokenVocab::option_token(int slot) const {
  if (slot < 0 || slot >= kNumOptions) {
    throw std::out_of_range("TokenVocab: option slot out of range");
  }
  return kOption0 + slot;
}

int TokenVocab::level_begin(int level) const {
  if (level < 0 || level > levels) {
    throw std::out_of_range("TokenVocab: level out of range");
  }
  return kNumControl + level * codebook_size;
}

int TokenVocab::level_token(int level, int index) const {
  if (level < 0 || level >= levels) {
    throw std::out_of_range("TokenVocab: level out of range");
  }
  if (index < 0 || index >= codebook_size) {
    throw std::out_of_range("TokenVocab: codeword index out of range");
  }
  return kNumControl + level * codebook_size + index;
}

bool TokenVocab::is_level_token(int id, int level) const { return level_of(id) == level; }

int TokenVocab::level_of(int id) const {
  if (id < kNumControl || id >= size()) return -1;
  return (id - kNumControl) / codebook_size;
}

int TokenVocab::code_of(int id) const {
  if (id < kNumControl || id >= size()) return -1;
  return (id - kNumControl) % codebook_size;
}

void TokenVocab::append_sid(const SemanticId& sid, std::vector<int>& out) const {
  if (static_cast<int>(sid.levels()) != levels) {
    throw std::invalid_argument("TokenVocab: id has " + std::to_string(sid.levels()) +
                                " levels, vocabulary expects " + std::to_string(levels));
  }
  for (int d = 0; d < levels; ++d) out.push_back(level_token(d, sid.codes[d]));
}

std::vector<int> TokenVocab::sid_tokens(const SemanticId& sid) const {
  std::vector<int> out;
  out.reserve(levels);
  append_sid(sid, out);
  return out;
}

SemanticId TokenVocab::sid_from_tokens(std::span<const int> tokens) const {
  if (static_cast<int>(tokens.size()) != levels) {
    throw std::invalid_argument("TokenVocab: expected exactly one token per level");
  }
  std::vector<std::uint16_t> codes(tokens.size());
  for (int d = 0; d < levels; ++d) {
    if (!is_level_token(tokens[d], d)) {
      throw std::invalid_argument("TokenVocab: token " + std::to_string(tokens[d]) +
                                  " is not a level-" + std::to_string(d) + " token");
    }
    codes[d] = static_cast<std::uint16_t>(code_of(tokens[d]));
  }
  return SemanticId(std::move(codes));
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

LayerNorm LayerNorm::make(int dim) {
  LayerNorm ln;
  ln.gamma.assign(dim, 1.0);
  ln.beta.assign(dim, 0.0);
  ln.ggamma.assign(dim, 0.0);
  ln.gbeta.assign(dim, 0.0);
  return ln;
}

Linear Linear::make(int in, int out) {
  Linear l;
  l.in = in;
  l.out = out;
  l.w.assign(static_cast<std::size_t>(in) * out, 0.0);
  l.b.assign(out, 0.0);
  l.gw.assign(l.w.size(), 0.0);
  l.gb.assign(l.b.size(), 0.0);
  return l;
}

void Linear::forward(const double* x, double* y) const {
  for (int o = 0; o < out; ++o) {
    const double* row = w.data() + static_cast<std::size_t>(o) * in;
    double acc = b[o];
    for (int i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
  if (lora) {
    const int r = lora->rank;
    std::vector<double> ax(r, 0.0);
    for (int j = 0; j < r; ++j) {
      const double* arow = lora->a.data() + static_cast<std::size_t>(j) * in;
      double acc = 0.0;
      for (int i = 0; i < in; ++i) acc += arow[i] * x[i];
      ax[j] = acc;
    }
    for (int o = 0; o < out; ++o) {
      const double* brow = lora->b.data() + static_cast<std::size_t>(o) * r;
      double acc = 0.0;
      for (int j = 0; j < r; ++j) acc += brow[j] * ax[j];
      y[o] += acc;
    }
  }
}

namespace {

// Accumulates parameter gradients for y = W'x + b given dy, and adds the
// input gradient into dx. With an adapter attached the base W and b are
// frozen and only A and B receive gradients.
void linear_backward(Linear& l, const double* x, const double* dy, double* dx) {
  for (int o = 0; o < l.out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    const double* row = l.w.data() + static_cast<std::size_t>(o) * l.in;
    for (int i = 0; i < l.in; ++i) dx[i] += row[i] * g;
  }
  if (l.lora) {
    LoraAdapter& ad = *l.lora;
    const int r = ad.rank;
    std::vector<double> ax(r, 0.0), bty(r, 0.0);
    for (int j = 0; j < r; ++j) {
      const double* arow = ad.a.data() + static_cast<std::size_t>(j) * l.in;
      double acc = 0.0;
      for (int i = 0; i < l.in; ++i) acc += arow[i] * x[i];
      ax[j] = acc;
    }
    for (int o = 0; o < l.out; ++o) {
      const double g = dy[o];
      const double* brow = ad.b.data() + static_cast<std::size_t>(o) * r;
      double* gbrow = ad.gb.data() + static_cast<std::size_t>(o) * r;
      for (int j = 0; j < r; ++j) {
        bty[j] += brow[j] * g;
        gbrow[j] += g * ax[j];
      }
    }
    for (int j = 0; j < r; ++j) {
      const double g = bty[j];
      if (g == 0.0) continue;
      const double* arow = ad.a.data() + static_cast<std::size_t>(j) * l.in;
      double* garow = ad.ga.data() + static_cast<std::size_t>(j) * l.in;
      for (int i = 0; i < l.in; ++i) {
        garow[i] += g * x[i];
        dx[i] += arow[i] * g;
      }
    }
  } else {
    for (int o = 0; o < l.out; ++o) {
      const double g = dy[o];
      l.gb[o] += g;
      if (g == 0.0) continue;
      double* grow = l.gw.data() + static_cast<std::size_t>(o) * l.in;
      for (int i = 0; i < l.in; ++i) grow[i] += g * x[i];
    }
  }
}

void ln_forward(const LayerNorm& ln, const double* x, double* y, double& mu, double& rstd) {
  const int d = ln.dim();
  double m = 0.0;
  for (int i = 0; i < d; ++i) m += x[i];
  m /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = x[i] - m;
    var += c * c;
  }
  var /= d;
  mu = m;
  rstd = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < d; ++i) y[i] = ln.gamma[i] * ((x[i] - m) * rstd) + ln.beta[i];
}

// dx += dL/dx given dy = dL/dy; also accumulates gamma/beta gradients.
void ln_backward(LayerNorm& ln, const double* x, double mu, double rstd, const double* dy,
                 double* dx) {
  const int d = ln.dim();
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mu) * rstd;
    const double dxhat = dy[i] * ln.gamma[i];
    ln.ggamma[i] += dy[i] * xhat;
    ln.gbeta[i] += dy[i];
    m1 += dxhat;
    m2 += dxhat * xhat;
  }
  m1 /= d;
  m2 /= d;
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mu) * rstd;
    const double dxhat = dy[i] * ln.gamma[i];
    dx[i] += rstd * (dxhat - m1 - xhat * m2);
  }
}

}  // namespace

void PolicyConfig::validate() const {
  if (d_model < 1) throw std::invalid_argument("PolicyConfig: d_model must be positive");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("PolicyConfig: n_heads must divide d_model");
  }
  if (n_blocks < 1) throw std::invalid_argument("PolicyConfig: n_blocks must be positive");
  if (d_ff < 1) throw std::invalid_argument("PolicyConfig: d_ff must be positive");
  if (max_seq < 1) throw std::invalid_argument("PolicyConfig: max_seq must be positive");
}

Policy Policy::make(TokenVocab vocab, PolicyConfig cfg) {
  cfg.validate();
  Policy p;
  p.vocab = vocab;
  p.cfg = cfg;
  const std::size_t v = static_cast<std::size_t>(vocab.size());
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  p.tok_emb.assign(v * d, 0.0);
  p.gtok_emb.assign(v * d, 0.0);
  p.pos_emb.assign(static_cast<std::size_t>(cfg.max_seq) * d, 0.0);
  p.gpos_emb.assign(p.pos_emb.size(), 0.0);
  p.blocks.resize(cfg.n_blocks);
  for (Block& blk : p.blocks) {
    blk.ln1 = LayerNorm::make(cfg.d_model);
    blk.attn.wq = Linear::make(cfg.d_model, cfg.d_model);
    blk.attn.wk = Linear::make(cfg.d_model, cfg.d_model);
    blk.attn.wv = Linear::make(cfg.d_model, cfg.d_model);
    blk.attn.wo = Linear::make(cfg.d_model, cfg.d_model);
    blk.ln2 = LayerNorm::make(cfg.d_model);
    blk.ffn.w1 = Linear::make(cfg.d_model, cfg.d_ff);
    blk.ffn.w2 = Linear::make(cfg.d_ff, cfg.d_model);
  }
  p.final_ln = LayerNorm::make(cfg.d_model);
  p.head = Linear::make(cfg.d_model, vocab.size());
  return p;
}

void Policy::init_random(Rng& rng, double scale, bool zero_head) {
  auto fill_linear = [&](Linear& l, double residual_scale) {
    const double sd = residual_scale / std::sqrt(static_cast<double>(l.in));
    for (double& x : l.w) x = rng.normal(0.0, sd);
    std::fill(l.b.begin(), l.b.end(), 0.0);
  };
  // Residual-feeding projections start smaller so deep stacks stay near the
  // identity at initialization.
  const double res = 1.0 / std::sqrt(2.0 * cfg.n_blocks);
  for (double& x : tok_emb) x = rng.normal(0.0, scale);
  for (double& x : pos_emb) x = rng.normal(0.0, scale);
  for (Block& blk : blocks) {
    fill_linear(blk.attn.wq, 1.0);
    fill_linear(blk.attn.wk, 1.0);
    fill_linear(blk.attn.wv, 1.0);
    fill_linear(blk.attn.wo, res);
    fill_linear(blk.ffn.w1, 1.0);
    fill_linear(blk.ffn.w2, res);
  }
  if (zero_head) {
    std::fill(head.w.begin(), head.w.end(), 0.0);
    std::fill(head.b.begin(), head.b.end(), 0.0);
  } else {
    fill_linear(head, 1.0);
  }
}

void Policy::zero_grad() {
  auto zero = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
  zero(gtok_emb);
  zero(gpos_emb);
  auto zero_linear = [&](Linear& l) {
    zero(l.gw);
    zero(l.gb);
    if (l.lora) {
      zero(l.lora->ga);
      zero(l.lora->gb);
    }
  };
  for (Block& blk : blocks) {
    zero(blk.ln1.ggamma);
    zero(blk.ln1.gbeta);
    zero_linear(blk.attn.wq);
    zero_linear(blk.attn.wk);
    zero_linear(blk.attn.wv);
    zero_linear(blk.attn.wo);
    zero(blk.ln2.ggamma);
    zero(blk.ln2.gbeta);
    zero_linear(blk.ffn.w1);
    zero_linear(blk.ffn.w2);
  }
  zero(final_ln.ggamma);
  zero(final_ln.gbeta);
  zero_linear(head);
}

bool Policy::lora_attached() const {
  for (const Block& blk : blocks) {
    if (blk.attn.wq.lora || blk.attn.wk.lora || blk.attn.wv.lora || blk.attn.wo.lora ||
        blk.ffn.w1.lora || blk.ffn.w2.lora) {
      return true;
    }
  }
  return head.lora.has_value();
}

void Policy::visit_params(const ParamVisitor& visit) {
  const bool adapters_only = lora_attached();
  auto visit_linear = [&](Linear& l) {
    if (adapters_only) {
      if (l.lora) {
        visit(l.lora->a.data(), l.lora->ga.data(), l.lora->a.size());
        visit(l.lora->b.data(), l.lora->gb.data(), l.lora->b.size());
      }
    } else {
      visit(l.w.data(), l.gw.data(), l.w.size());
      visit(l.b.data(), l.gb.data(), l.b.size());
    }
  };
  auto visit_ln = [&](LayerNorm& ln) {
    visit(ln.gamma.data(), ln.ggamma.data(), ln.gamma.size());
    visit(ln.beta.data(), ln.gbeta.data(), ln.beta.size());
  };
  if (!adapters_only) {
    visit(tok_emb.data(), gtok_emb.data(), tok_emb.size());
    visit(pos_emb.data(), gpos_emb.data(), pos_emb.size());
  }
  for (Block& blk : blocks) {
    if (!adapters_only) visit_ln(blk.ln1);
    visit_linear(blk.attn.wq);
    visit_linear(blk.attn.wk);
    visit_linear(blk.attn.wv);
    visit_linear(blk.attn.wo);
    if (!adapters_only) visit_ln(blk.ln2);
    visit_linear(blk.ffn.w1);
    visit_linear(blk.ffn.w2);
  }
  if (!adapters_only) visit_ln(final_ln);
  visit_linear(head);
}

std::size_t Policy::num_params() const {
  std::size_t n = tok_emb.size() + pos_emb.size();
  auto linear_n = [](const Linear& l) { return l.w.size() + l.b.size(); };
  for (const Block& blk : blocks) {
    n += blk.ln1.gamma.size() * 2 + blk.ln2.gamma.size() * 2;
    n += linear_n(blk.attn.wq) + linear_n(blk.attn.wk) + linear_n(blk.attn.wv) +
         linear_n(blk.attn.wo) + linear_n(blk.ffn.w1) + linear_n(blk.ffn.w2);
  }
  n += final_ln.gamma.size() * 2;
  n += linear_n(head);
  return n;
}

std::size_t Policy::num_trainable_params() {
  std::size_t n = 0;
  visit_params([&](double*, double*, std::size_t count) { n += count; });
  return n;
}

ParamWalk param_walk(Policy& policy) {
  return [&policy](const ParamVisitor& visit) { policy.visit_params(visit); };
}

// ---------------------------------------------------------------------------
// Low-rank adaptation
// ---------------------------------------------------------------------------

namespace {

void attach_adapter(Linear& l, int rank, Rng& rng) {
  LoraAdapter ad;
  ad.rank = rank;
  ad.a.resize(static_cast<std::size_t>(rank) * l.in);
  ad.b.assign(static_cast<std::size_t>(l.out) * rank, 0.0);
  const double sd = 1.0 / std::sqrt(static_cast<double>(l.in));
  for (double& x : ad.a) x = rng.normal(0.0, sd);
  ad.ga.assign(ad.a.size(), 0.0);
  ad.gb.assign(ad.b.size(), 0.0);
  l.lora = std::move(ad);
}

void merge_adapter(Linear& l) {
  if (!l.lora) return;
  const LoraAdapter& ad = *l.lora;
  for (int o = 0; o < l.out; ++o) {
    const double* brow = ad.b.data() + static_cast<std::size_t>(o) * ad.rank;
    double* wrow = l.w.data() + static_cast<std::size_t>(o) * l.in;
    for (int j = 0; j < ad.rank; ++j) {
      const double bj = brow[j];
      if (bj == 0.0) continue;
      const double* arow = ad.a.data() + static_cast<std::size_t>(j) * l.in;
      for (int i = 0; i < l.in; ++i) wrow[i] += bj * arow[i];
    }
  }
  l.lora.reset();
}

}  // namespace

Policy apply_lora(const Policy& base, int rank, unsigned targets, Rng& rng) {
  if (rank < 1) throw std::invalid_argument("apply_lora: rank must be >= 1");
  if ((targets & kLoraAll) == 0u) {
    throw std::invalid_argument("apply_lora: no target matrices selected");
  }
  if (base.lora_attached()) {
    throw std::invalid_argument("apply_lora: policy already carries adapters");
  }
  Policy p = base;
  for (Block& blk : p.blocks) {
    if (targets & kLoraAttnQ) attach_adapter(blk.attn.wq, rank, rng);
    if (targets & kLoraAttnK) attach_adapter(blk.attn.wk, rank, rng);
    if (targets & kLoraAttnV) attach_adapter(blk.attn.wv, rank, rng);
    if (targets & kLoraAttnO) attach_adapter(blk.attn.wo, rank, rng);
    if (targets & kLoraFfnIn) attach_adapter(blk.ffn.w1, rank, rng);
    if (targets & kLoraFfnOut) attach_adapter(blk.ffn.w2, rank, rng);
  }
  if (targets & kLoraHead) attach_adapter(p.head, rank, rng);
  return p;
}

Policy merge_lora(const Policy& adapted) {
  if (!adapted.lora_attached()) {
    throw std::invalid_argument("merge_lora: policy has no adapters to merge");
  }
  Policy p = adapted;
  for (Block& blk : p.blocks) {
    merge_adapter(blk.attn.wq);
    merge_adapter(blk.attn.wk);
    merge_adapter(blk.attn.wv);
    merge_adapter(blk.attn.wo);
    merge_adapter(blk.ffn.w1);
    merge_adapter(blk.ffn.w2);
  }
  merge_adapter(p.head);
  return p;
}

// ---------------------------------------------------------------------------
// Full forward pass with a trace for backpropagation
// ---------------------------------------------------------------------------

namespace {

struct BlockTrace {
  std::vector<double> x_in;             // T*d residual stream entering the block
  std::vector<double> n1, mu1, rstd1;   // post-LN1, per-row stats
  std::vector<double> q, k, v;          // T*d each
  std::vector<double> probs;            // H*T*T attention weights (lower-triangular)
  std::vector<double> attn_out;         // T*d concatenated head outputs
  std::vector<double> x_mid;            // T*d stream after the attention residual
  std::vector<double> n2, mu2, rstd2;
  std::vector<double> h1;               // T*d_ff pre-activation
  std::vector<double> act;              // T*d_ff gelu(h1)
};

struct ForwardTrace {
  int T = 0;
  std::vector<int> tokens;
  std::vector<BlockTrace> blocks;
  std::vector<double> x_final;          // T*d stream after the last block
  std::vector<double> nf, muf, rstdf;   // final layer norm
};

void forward_full(const Policy& policy, std::span<const int> tokens, ForwardTrace& tr) {
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw std::invalid_argument("policy: empty token sequence");
  if (T > policy.cfg.max_seq) {
    throw std::invalid_argument("policy: sequence length " + std::to_string(T) +
                                " exceeds max_seq " + std::to_string(policy.cfg.max_seq));
  }
  check_token_range(policy.vocab, tokens);
  const int d = policy.cfg.d_model;
  const int H = policy.cfg.n_heads;
  const int dh = d / H;
  const int dff = policy.cfg.d_ff;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  tr.T = T;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.blocks.resize(policy.blocks.size());

  std::vector<double> x(static_cast<std::size_t>(T) * d);
  for (int t = 0; t < T; ++t) {
    const double* te = policy.tok_emb.data() + static_cast<std::size_t>(tokens[t]) * d;
    const double* pe = policy.pos_emb.data() + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(t) * d + i] = te[i] + pe[i];
  }

  for (std::size_t b = 0; b < policy.blocks.size(); ++b) {
    const Block& blk = policy.blocks[b];
    BlockTrace& bt = tr.blocks[b];
    bt.x_in = x;
    bt.n1.resize(x.size());
    bt.mu1.resize(T);
    bt.rstd1.resize(T);
    for (int t = 0; t < T; ++t) {
      ln_forward(blk.ln1, bt.x_in.data() + static_cast<std::size_t>(t) * d,
                 bt.n1.data() + static_cast<std::size_t>(t) * d, bt.mu1[t], bt.rstd1[t]);
    }
    bt.q.resize(x.size());
    bt.k.resize(x.size());
    bt.v.resize(x.size());
    for (int t = 0; t < T; ++t) {
      const double* n1t = bt.n1.data() + static_cast<std::size_t>(t) * d;
      blk.attn.wq.forward(n1t, bt.q.data() + static_cast<std::size_t>(t) * d);
      blk.attn.wk.forward(n1t, bt.k.data() + static_cast<std::size_t>(t) * d);
      blk.attn.wv.forward(n1t, bt.v.data() + static_cast<std::size_t>(t) * d);
    }
    bt.probs.assign(static_cast<std::size_t>(H) * T * T, 0.0);
    bt.attn_out.assign(x.size(), 0.0);
    std::vector<double> scores;
    for (int h = 0; h < H; ++h) {
      const int off = h * dh;
      for (int t = 0; t < T; ++t) {
        scores.assign(t + 1, 0.0);
        const double* qt = bt.q.data() + static_cast<std::size_t>(t) * d + off;
        double smax = -1e300;
        for (int u = 0; u <= t; ++u) {
          const double* ku = bt.k.data() + static_cast<std::size_t>(u) * d + off;
          double s = 0.0;
          for (int i = 0; i < dh; ++i) s += qt[i] * ku[i];
          s *= inv_sqrt_dh;
          scores[u] = s;
          smax = std::max(smax, s);
        }
        double z = 0.0;
        for (int u = 0; u <= t; ++u) {
          scores[u] = std::exp(scores[u] - smax);
          z += scores[u];
        }
        double* prow = bt.probs.data() + (static_cast<std::size_t>(h) * T + t) * T;
        double* orow = bt.attn_out.data() + static_cast<std::size_t>(t) * d + off;
        for (int u = 0; u <= t; ++u) {
          const double p = scores[u] / z;
          prow[u] = p;
          const double* vu = bt.v.data() + static_cast<std::size_t>(u) * d + off;
          for (int i = 0; i < dh; ++i) orow[i] += p * vu[i];
        }
      }
    }
    std::vector<double> a(d);
    for (int t = 0; t < T; ++t) {
      blk.attn.wo.forward(bt.attn_out.data() + static_cast<std::size_t>(t) * d, a.data());
      double* xt = x.data() + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) xt[i] += a[i];
    }
    bt.x_mid = x;
    bt.n2.resize(x.size());
    bt.mu2.resize(T);
    bt.rstd2.resize(T);
    for (int t = 0; t < T; ++t) {
      ln_forward(blk.ln2, bt.x_mid.data() + static_cast<std::size_t>(t) * d,
                 bt.n2.data() + static_cast<std::size_t>(t) * d, bt.mu2[t], bt.rstd2[t]);
    }
    bt.h1.resize(static_cast<std::size_t>(T) * dff);
    bt.act.resize(bt.h1.size());
    std::vector<double> f(d);
    for (int t = 0; t < T; ++t) {
      double* h1t = bt.h1.data() + static_cast<std::size_t>(t) * dff;
      double* at = bt.act.data() + static_cast<std::size_t>(t) * dff;
      blk.ffn.w1.forward(bt.n2.data() + static_cast<std::size_t>(t) * d, h1t);
      for (int i = 0; i < dff; ++i) at[i] = gelu(h1t[i]);
      blk.ffn.w2.forward(at, f.data());
      double* xt = x.data() + static_cast<std::size_t>(t) * d;
      for (int i = 0; i < d; ++i) xt[i] += f[i];
    }
  }

  tr.x_final = std::move(x);
  tr.nf.resize(tr.x_final.size());
  tr.muf.resize(T);
  tr.rstdf.resize(T);
  for (int t = 0; t < T; ++t) {
    ln_forward(policy.final_ln, tr.x_final.data() + static_cast<std::size_t>(t) * d,
               tr.nf.data() + static_cast<std::size_t>(t) * d, tr.muf[t], tr.rstdf[t]);
  }
}

// Backpropagates d(objective)/d(logits) for the given rows through the whole
// network, accumulating parameter gradients.
void backward_full(Policy& policy, const ForwardTrace& tr,
                   const std::map<int, std::vector<double>>& dlogit_rows) {
  const int T = tr.T;
  const int d = policy.cfg.d_model;
  const int H = policy.cfg.n_heads;
  const int dh = d / H;
  const int dff = policy.cfg.d_ff;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> dnf(static_cast<std::size_t>(T) * d, 0.0);
  for (const auto& [row, dz] : dlogit_rows) {
    linear_backward(policy.head, tr.nf.data() + static_cast<std::size_t>(row) * d, dz.data(),
                    dnf.data() + static_cast<std::size_t>(row) * d);
  }

  std::vector<double> dstream(static_cast<std::size_t>(T) * d, 0.0);
  for (int t = 0; t < T; ++t) {
    ln_backward(policy.final_ln, tr.x_final.data() + static_cast<std::size_t>(t) * d, tr.muf[t],
                tr.rstdf[t], dnf.data() + static_cast<std::size_t>(t) * d,
                dstream.data() + static_cast<std::size_t>(t) * d);
  }

  std::vector<double> dact(dff), dh1(dff), dn2(d);
  std::vector<double> dattn(static_cast<std::size_t>(T) * d);
  std::vector<double> dq(static_cast<std::size_t>(T) * d);
  std::vector<double> dk(static_cast<std::size_t>(T) * d);
  std::vector<double> dv(static_cast<std::size_t>(T) * d);
  std::vector<double> dp, ds;
  for (std::size_t bi = policy.blocks.size(); bi-- > 0;) {
    Block& blk = policy.blocks[bi];
    const BlockTrace& bt = tr.blocks[bi];

    // Feed-forward sub-block: stream holds d(x_mid + f); the skip part stays
    // in place and the branch part is backpropagated and added on top.
    for (int t = 0; t < T; ++t) {
      const double* df = dstream.data() + static_cast<std::size_t>(t) * d;
      std::fill(dact.begin(), dact.end(), 0.0);
      linear_backward(blk.ffn.w2, bt.act.data() + static_cast<std::size_t>(t) * dff, df,
                      dact.data());
      const double* h1t = bt.h1.data() + static_cast<std::size_t>(t) * dff;
      for (int i = 0; i < dff; ++i) dh1[i] = dact[i] * gelu_grad(h1t[i]);
      std::fill(dn2.begin(), dn2.end(), 0.0);
      linear_backward(blk.ffn.w1, bt.n2.data() + static_cast<std::size_t>(t) * d, dh1.data(),
                      dn2.data());
      ln_backward(blk.ln2, bt.x_mid.data() + static_cast<std::size_t>(t) * d, bt.mu2[t],
                  bt.rstd2[t], dn2.data(), dstream.data() + static_cast<std::size_t>(t) * d);
    }

    // Attention sub-block: stream now holds d(x_in + wo(attn)).
    std::fill(dattn.begin(), dattn.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      linear_backward(blk.attn.wo, bt.attn_out.data() + static_cast<std::size_t>(t) * d,
                      dstream.data() + static_cast<std::size_t>(t) * d,
                      dattn.data() + static_cast<std::size_t>(t) * d);
    }
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (int h = 0; h < H; ++h) {
      const int off = h * dh;
      for (int t = 0; t < T; ++t) {
        const double* dot = dattn.data() + static_cast<std::size_t>(t) * d + off;
        const double* prow = bt.probs.data() + (static_cast<std::size_t>(h) * T + t) * T;
        dp.assign(t + 1, 0.0);
        ds.assign(t + 1, 0.0);
        double inner = 0.0;
        for (int u = 0; u <= t; ++u) {
          const double* vu = bt.v.data() + static_cast<std::size_t>(u) * d + off;
          double acc = 0.0;
          for (int i = 0; i < dh; ++i) acc += dot[i] * vu[i];
          dp[u] = acc;
          inner += acc * prow[u];
          double* dvu = dv.data() + static_cast<std::size_t>(u) * d + off;
          for (int i = 0; i < dh; ++i) dvu[i] += prow[u] * dot[i];
        }
        const double* qt = bt.q.data() + static_cast<std::size_t>(t) * d + off;
        double* dqt = dq.data() + static_cast<std::size_t>(t) * d + off;
        for (int u = 0; u <= t; ++u) {
          ds[u] = prow[u] * (dp[u] - inner) * inv_sqrt_dh;
          const double* ku = bt.k.data() + static_cast<std::size_t>(u) * d + off;
          double* dku = dk.data() + static_cast<std::size_t>(u) * d + off;
          for (int i = 0; i < dh; ++i) {
            dqt[i] += ds[u] * ku[i];
            dku[i] += ds[u] * qt[i];
          }
        }
      }
    }
    std::vector<double> dn1(d);
    for (int t = 0; t < T; ++t) {
      std::fill(dn1.begin(), dn1.end(), 0.0);
      const double* n1t = bt.n1.data() + static_cast<std::size_t>(t) * d;
      linear_backward(blk.attn.wq, n1t, dq.data() + static_cast<std::size_t>(t) * d, dn1.data());
      linear_backward(blk.attn.wk, n1t, dk.data() + static_cast<std::size_t>(t) * d, dn1.data());
      linear_backward(blk.attn.wv, n1t, dv.data() + static_cast<std::size_t>(t) * d, dn1.data());
      ln_backward(blk.ln1, bt.x_in.data() + static_cast<std::size_t>(t) * d, bt.mu1[t],
                  bt.rstd1[t], dn1.data(), dstream.data() + static_cast<std::size_t>(t) * d);
    }
  }

  for (int t = 0; t < T; ++t) {
    const double* dt = dstream.data() + static_cast<std::size_t>(t) * d;
    double* gte = policy.gtok_emb.data() + static_cast<std::size_t>(tr.tokens[t]) * d;
    double* gpe = policy.gpos_emb.data() + static_cast<std::size_t>(t) * d;
    for (int i = 0; i < d; ++i) {
      gte[i] += dt[i];
      gpe[i] += dt[i];
    }
  }
}

struct SliceBounds {
  int begin = 0;
  int end = 0;
};

SliceBounds scored_slice(const Policy& policy, const ScoredPosition& sp, int T) {
  if (sp.row < 0 || sp.row >= T) {
    throw std::out_of_range("scored position row outside the sequence");
  }
  if (sp.masked_level >= 0) {
    if (sp.masked_level >= policy.vocab.levels) {
      throw std::out_of_range("scored position level outside the vocabulary");
    }
    const int begin = policy.vocab.level_begin(sp.masked_level);
    if (!policy.vocab.is_level_token(sp.token, sp.masked_level)) {
      throw std::invalid_argument("scored token does not belong to the masked level");
    }
    return {begin, begin + policy.vocab.codebook_size};
  }
  if (sp.token < 0 || sp.token >= policy.vocab.size()) {
    throw std::out_of_range("scored token outside the vocabulary");
  }
  return {0, policy.vocab.size()};
}

// log softmax(z)[token] over [begin, end), with the normalizer returned so
// gradients can reuse the probabilities.
double slice_logprob(std::span<const double> logits, int begin, int end, int token,
                     double& lse_out) {
  double m = -1e300;
  for (int j = begin; j < end; ++j) m = std::max(m, logits[j]);
  double z = 0.0;
  for (int j = begin; j < end; ++j) z += std::exp(logits[j] - m);
  lse_out = m + std::log(z);
  return logits[token] - lse_out;
}

// Evaluates the weighted log-probability objective; when `grad_into` is given
// (and aliases `policy`), also accumulates its parameter gradients.
double scored_apply(const Policy& policy, std::span<const int> tokens,
                    std::span<const ScoredPosition> positions, Policy* grad_into,
                    std::vector<double>* per_position) {
  const bool with_grad = grad_into != nullptr;
  ForwardTrace tr;
  forward_full(policy, tokens, tr);
  const int d = policy.cfg.d_model;
  const int V = policy.vocab.size();

  std::map<int, std::vector<double>> logits_by_row;
  auto row_logits = [&](int row) -> const std::vector<double>& {
    auto it = logits_by_row.find(row);
    if (it == logits_by_row.end()) {
      std::vector<double> z(V);
      policy.head.forward(tr.nf.data() + static_cast<std::size_t>(row) * d, z.data());
      it = logits_by_row.emplace(row, std::move(z)).first;
    }
    return it->second;
  };

  std::map<int, std::vector<double>> dlogit_rows;
  double total = 0.0;
  if (per_position) per_position->clear();
  for (const ScoredPosition& sp : positions) {
    const SliceBounds sl = scored_slice(policy, sp, tr.T);
    const std::vector<double>& z = row_logits(sp.row);
    double lse = 0.0;
    const double lp = slice_logprob(z, sl.begin, sl.end, sp.token, lse);
    total += sp.coeff * lp;
    if (per_position) per_position->push_back(lp);
    if (with_grad) {
      auto [it, fresh] = dlogit_rows.try_emplace(sp.row);
      if (fresh) it->second.assign(V, 0.0);
      std::vector<double>& dz = it->second;
      for (int j = sl.begin; j < sl.end; ++j) {
        dz[j] -= sp.coeff * std::exp(z[j] - lse);
      }
      dz[sp.token] += sp.coeff;
    }
  }
  if (with_grad && !dlogit_rows.empty()) {
    backward_full(*grad_into, tr, dlogit_rows);
  }
  return total;
}

}  // namespace

std::vector<std::vector<double>> next_token_logits(const Policy& policy,
                                                   std::span<const int> tokens) {
  ForwardTrace tr;
  forward_full(policy, tokens, tr);
  const int d = policy.cfg.d_model;
  const int V = policy.vocab.size();
  std::vector<std::vector<double>> rows(tr.T, std::vector<double>(V));
  for (int t = 0; t < tr.T; ++t) {
    policy.head.forward(tr.nf.data() + static_cast<std::size_t>(t) * d, rows[t].data());
  }
  return rows;
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  double m = -1e300;
  for (double z : logits) m = std::max(m, z);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

std::vector<double> scored_logprobs(const Policy& policy, std::span<const int> tokens,
                                    std::span<const ScoredPosition> positions) {
  std::vector<double> out;
  scored_apply(policy, tokens, positions, nullptr, &out);
  return out;
}

double scored_logprob_sum(const Policy& policy, std::span<const int> tokens,
                          std::span<const ScoredPosition> positions) {
  return scored_apply(policy, tokens, positions, nullptr, nullptr);
}

double scored_logprob_backward(Policy& policy, std::span<const int> tokens,
                               std::span<const ScoredPosition> positions) {
  return scored_apply(policy, tokens, positions, &policy, nullptr);
}

namespace {

std::vector<ScoredPosition> sid_positions(const TokenVocab& vocab, std::size_t context_len,
                                          std::span<const int> sid_tokens, bool masked) {
  if (context_len == 0) {
    throw std::invalid_argument("policy scoring: context must be non-empty");
  }
  std::vector<ScoredPosition> positions;
  positions.reserve(sid_tokens.size());
  for (std::size_t dlev = 0; dlev < sid_tokens.size(); ++dlev) {
    ScoredPosition sp;
    sp.row = static_cast<int>(context_len - 1 + dlev);
    sp.token = sid_tokens[dlev];
    sp.coeff = 1.0;
    sp.masked_level = masked ? static_cast<int>(dlev) : -1;
    positions.push_back(sp);
  }
  (void)vocab;
  return positions;
}

std::vector<int> concat_tokens(std::span<const int> context, std::span<const int> tail) {
  std::vector<int> tokens;
  tokens.reserve(context.size() + tail.size());
  tokens.insert(tokens.end(), context.begin(), context.end());
  tokens.insert(tokens.end(), tail.begin(), tail.end());
  return tokens;
}

}  // namespace

double sequence_logprob(const Policy& policy, std::span<const int> context,
                        const SemanticId& sid) {
  const std::vector<int> sid_toks = policy.vocab.sid_tokens(sid);
  const std::vector<int> tokens = concat_tokens(context, sid_toks);
  const auto positions = sid_positions(policy.vocab, context.size(), sid_toks, /*masked=*/false);
  return scored_logprob_sum(policy, tokens, positions);
}

std::vector<double> generation_logprobs(const Policy& policy, std::span<const int> context,
                                        std::span<const int> sid_tokens) {
  const std::vector<int> tokens = concat_tokens(context, sid_tokens);
  const auto positions = sid_positions(policy.vocab, context.size(), sid_tokens, /*masked=*/true);
  return scored_logprobs(policy, tokens, positions);
}

// ---------------------------------------------------------------------------
// Context serialization
// ---------------------------------------------------------------------------

std::vector<int> serialize_context(std::span<const InteractionEvent> context, Stage stage,
                                   const TokenVocab& vocab, const SidAssignment& sids,
                                   int max_events) {
  if (max_events < 0) throw std::invalid_argument("serialize_context: max_events must be >= 0");
  std::span<const InteractionEvent> events = context;
  if (static_cast<int>(events.size()) > max_events) {
    events = events.subspan(events.size() - static_cast<std::size_t>(max_events));
  }
  std::vector<int> neg_tokens, pos_tokens;
  for (const InteractionEvent& e : events) {
    if (e.polarity == Polarity::NegativeFeedback) {
      vocab.append_sid(sids.sid_of(e.item), neg_tokens);
    } else if (stage == Stage::NegPlusPos && e.polarity != Polarity::Exposure) {
      vocab.append_sid(sids.sid_of(e.item), pos_tokens);
    }
  }
  std::vector<int> out;
  out.reserve(2 + neg_tokens.size() + 1 + pos_tokens.size());
  out.push_back(TokenVocab::kBos);
  out.push_back(TokenVocab::kSepNeg);
  out.insert(out.end(), neg_tokens.begin(), neg_tokens.end());
  if (stage == Stage::NegPlusPos && !pos_tokens.empty()) {
    out.push_back(TokenVocab::kSepPos);
    out.insert(out.end(), pos_tokens.begin(), pos_tokens.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

void decode_step(const Policy& policy, DecodeState& state, int token) {
  const int d = policy.cfg.d_model;
  const int H = policy.cfg.n_heads;
  const int dh = d / H;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const int pos = state.len;
  if (pos >= policy.cfg.max_seq) {
    throw std::invalid_argument("decode_step: sequence exceeds max_seq");
  }
  if (token < 0 || token >= policy.vocab.size()) {
    throw std::out_of_range("decode_step: token outside vocabulary");
  }
  if (state.k.empty()) {
    state.k.resize(policy.blocks.size());
    state.v.resize(policy.blocks.size());
  }

  std::vector<double> x(d);
  {
    const double* te = policy.tok_emb.data() + static_cast<std::size_t>(token) * d;
    const double* pe = policy.pos_emb.data() + static_cast<std::size_t>(pos) * d;
    for (int i = 0; i < d; ++i) x[i] = te[i] + pe[i];
  }

  std::vector<double> n1(d), q(d), krow(d), vrow(d), attn(d), a(d);
  std::vector<double> n2(d), h1(policy.cfg.d_ff), act(policy.cfg.d_ff), f(d);
  std::vector<double> scores;
  double mu = 0.0, rstd = 0.0;
  for (std::size_t b = 0; b < policy.blocks.size(); ++b) {
    const Block& blk = policy.blocks[b];
    ln_forward(blk.ln1, x.data(), n1.data(), mu, rstd);
    blk.attn.wq.forward(n1.data(), q.data());
    blk.attn.wk.forward(n1.data(), krow.data());
    blk.attn.wv.forward(n1.data(), vrow.data());
    std::vector<double>& kc = state.k[b];
    std::vector<double>& vc = state.v[b];
    kc.insert(kc.end(), krow.begin(), krow.end());
    vc.insert(vc.end(), vrow.begin(), vrow.end());
    std::fill(attn.begin(), attn.end(), 0.0);
    for (int h = 0; h < H; ++h) {
      const int off = h * dh;
      scores.assign(pos + 1, 0.0);
      double smax = -1e300;
      for (int u = 0; u <= pos; ++u) {
        const double* ku = kc.data() + static_cast<std::size_t>(u) * d + off;
        double s = 0.0;
        for (int i = 0; i < dh; ++i) s += q[off + i] * ku[i];
        s *= inv_sqrt_dh;
        scores[u] = s;
        smax = std::max(smax, s);
      }
      double z = 0.0;
      for (int u = 0; u <= pos; ++u) {
        scores[u] = std::exp(scores[u] - smax);
        z += scores[u];
      }
      for (int u = 0; u <= pos; ++u) {
        const double p = scores[u] / z;
        const double* vu = vc.data() + static_cast<std::size_t>(u) * d + off;
        for (int i = 0; i < dh; ++i) attn[off + i] += p * vu[i];
      }
    }
    blk.attn.wo.forward(attn.data(), a.data());
    for (int i = 0; i < d; ++i) x[i] += a[i];
    ln_forward(blk.ln2, x.data(), n2.data(), mu, rstd);
    blk.ffn.w1.forward(n2.data(), h1.data());
    for (int i = 0; i < policy.cfg.d_ff; ++i) act[i] = gelu(h1[i]);
    blk.ffn.w2.forward(act.data(), f.data());
    for (int i = 0; i < d; ++i) x[i] += f[i];
  }
  ln_forward(policy.final_ln, x.data(), n1.data(), mu, rstd);
  state.next_logits.resize(policy.vocab.size());
  policy.head.forward(n1.data(), state.next_logits.data());
  state.len = pos + 1;
}

DecodeState encode_context(const Policy& policy, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("encode_context: empty context");
  DecodeState state;
  for (int t : tokens) decode_step(policy, state, t);
  return state;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace {

// Log-probabilities of one level's slice of a logits row, optionally tempered.
std::vector<double> level_logprobs(const Policy& policy, const std::vector<double>& logits,
                                   int level, double temperature) {
  const int begin = policy.vocab.level_begin(level);
  const int K = policy.vocab.codebook_size;
  std::vector<double> lp(K);
  double m = -1e300;
  for (int j = 0; j < K; ++j) {
    lp[j] = logits[begin + j] / temperature;
    m = std::max(m, lp[j]);
  }
  double z = 0.0;
  for (int j = 0; j < K; ++j) z += std::exp(lp[j] - m);
  const double lse = m + std::log(z);
  for (int j = 0; j < K; ++j) lp[j] -= lse;
  return lp;
}

int argmax_level(const Policy& policy, const std::vector<double>& logits, int level) {
  const int begin = policy.vocab.level_begin(level);
  int best = 0;
  for (int j = 1; j < policy.vocab.codebook_size; ++j) {
    if (logits[begin + j] > logits[begin + best]) best = j;
  }
  return best;
}

}  // namespace

std::vector<SampledSequence> sample_group(const Policy& policy, std::span<const int> context,
                                          int group_size, double temperature,
                                          std::uint64_t seed) {
  if (group_size < 2) throw std::invalid_argument("sample_group: group size must be >= 2");
  if (temperature < 0.0) throw std::invalid_argument("sample_group: temperature must be >= 0");
  const DecodeState enc = encode_context(policy, context);
  const int levels = policy.vocab.levels;
  Rng rng(seed);
  std::vector<SampledSequence> group;
  group.reserve(group_size);
  for (int g = 0; g < group_size; ++g) {
    DecodeState state = enc;
    SampledSequence seq;
    std::vector<std::uint16_t> codes;
    for (int lev = 0; lev < levels; ++lev) {
      int pick;
      double lp;
      if (temperature == 0.0) {
        pick = argmax_level(policy, state.next_logits, lev);
        lp = 0.0;  // the zero-temperature limit is a point mass
      } else {
        const std::vector<double> logp = level_logprobs(policy, state.next_logits, lev,
                                                        temperature);
        const double u = rng.uniform();
        double acc = 0.0;
        pick = policy.vocab.codebook_size - 1;
        for (int j = 0; j < policy.vocab.codebook_size; ++j) {
          acc += std::exp(logp[j]);
          if (u < acc) {
            pick = j;
            break;
          }
        }
        lp = logp[pick];
      }
      const int token = policy.vocab.level_token(lev, pick);
      seq.tokens.push_back(token);
      seq.logprobs.push_back(lp);
      seq.total_logprob += lp;
      codes.push_back(static_cast<std::uint16_t>(pick));
      if (lev + 1 < levels) decode_step(policy, state, token);
    }
    seq.sid = SemanticId(std::move(codes));
    group.push_back(std::move(seq));
  }
  return group;
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

SidTrie SidTrie::build(std::span<const SemanticId> sids) {
  SidTrie trie;
  trie.nodes.emplace_back();
  if (sids.empty()) return trie;
  trie.levels = static_cast<int>(sids.front().levels());
  for (const SemanticId& sid : sids) {
    if (static_cast<int>(sid.levels()) != trie.levels) {
      throw std::invalid_argument("SidTrie: mixed id depths");
    }
    int node = 0;
    for (std::uint16_t code : sid.codes) {
      auto& ch = trie.nodes[node].children;
      auto it = std::lower_bound(ch.begin(), ch.end(), code,
                                 [](const auto& e, std::uint16_t c) { return e.first < c; });
      if (it == ch.end() || it->first != code) {
        const int fresh = static_cast<int>(trie.nodes.size());
        // Insert before touching nodes: emplace_back may invalidate `ch`.
        trie.nodes[node].children.insert(it, {code, fresh});
        trie.nodes.emplace_back();
        node = fresh;
      } else {
        node = it->second;
      }
    }
  }
  return trie;
}

const SidTrie::Node* SidTrie::walk(std::span<const int> codes) const {
  if (nodes.empty()) return nullptr;
  int node = 0;
  for (int code : codes) {
    const auto& ch = nodes[node].children;
    auto it = std::lower_bound(ch.begin(), ch.end(), code,
                               [](const auto& e, int c) { return e.first < c; });
    if (it == ch.end() || it->first != code) return nullptr;
    node = it->second;
  }
  return &nodes[node];
}

std::size_t SidTrie::num_sequences() const {
  if (nodes.empty()) return 0;
  // Leaves sit exactly `levels` deep; count nodes with no children, excluding
  // a bare root.
  if (levels == 0) return 0;
  std::size_t count = 0;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    if (nodes[i].children.empty()) ++count;
  }
  return count;
}

SidTrie assigned_sid_trie(const SidAssignment& sids) {
  std::set<SemanticId> distinct;
  for (const auto& [item, sid] : sids.by_item) distinct.insert(sid);
  std::vector<SemanticId> list(distinct.begin(), distinct.end());
  return SidTrie::build(list);
}

std::vector<BeamResult> beam_search(const Policy& policy, std::span<const int> context,
                                    int beam_width, const SidTrie* trie) {
  if (beam_width < 1) throw std::invalid_argument("beam_search: beam width must be >= 1");
  if (trie && trie->levels != 0 && trie->levels != policy.vocab.levels) {
    throw std::invalid_argument("beam_search: trie depth does not match vocabulary levels");
  }
  const DecodeState enc = encode_context(policy, context);
  const int levels = policy.vocab.levels;

  struct Beam {
    std::vector<int> codes;
    double score = 0.0;
    DecodeState state;
    int trie_node = 0;
  };
  std::vector<Beam> beams;
  beams.push_back(Beam{{}, 0.0, enc, 0});
  if (trie && trie->nodes[0].children.empty()) return {};

  for (int lev = 0; lev < levels; ++lev) {
    struct Cand {
      int parent = 0;
      int code = 0;
      int trie_node = 0;
      double score = 0.0;
    };
    std::vector<Cand> cands;
    for (std::size_t bi = 0; bi < beams.size(); ++bi) {
      const Beam& beam = beams[bi];
      const std::vector<double> logp =
          level_logprobs(policy, beam.state.next_logits, lev, /*temperature=*/1.0);
      if (trie) {
        for (const auto& [code, child] : trie->nodes[beam.trie_node].children) {
          cands.push_back(
              {static_cast<int>(bi), static_cast<int>(code), child, beam.score + logp[code]});
        }
      } else {
        for (int code = 0; code < policy.vocab.codebook_size; ++code) {
          cands.push_back({static_cast<int>(bi), code, 0, beam.score + logp[code]});
        }
      }
    }
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      const std::vector<int>& pa = beams[a.parent].codes;
      const std::vector<int>& pb = beams[b.parent].codes;
      if (pa != pb) return pa < pb;
      return a.code < b.code;
    });
    const std::size_t keep = std::min<std::size_t>(beam_width, cands.size());
    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      const Cand& c = cands[i];
      Beam nb;
      nb.codes = beams[c.parent].codes;
      nb.codes.push_back(c.code);
      nb.score = c.score;
      nb.trie_node = c.trie_node;
      if (lev + 1 < levels) {
        nb.state = beams[c.parent].state;
        decode_step(policy, nb.state, policy.vocab.level_token(lev, c.code));
      }
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
    if (beams.empty()) break;
  }

  std::vector<BeamResult> out;
  out.reserve(beams.size());
  for (const Beam& beam : beams) {
    std::vector<std::uint16_t> codes(beam.codes.begin(), beam.codes.end());
    out.push_back({SemanticId(std::move(codes)), beam.score});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Item-level alignment
// ---------------------------------------------------------------------------

std::vector<AlignmentSample> build_alignment_set(const Corpus& corpus, const SidAssignment& sids,
                                                 const AlignmentConfig& config) {
  if (config.min_neg_count < 0) {
    throw std::invalid_argument("build_alignment_set: min_neg_count must be >= 0");
  }
  if (config.num_distractors < 1 || config.num_distractors >= TokenVocab::kNumOptions) {
    throw std::invalid_argument("build_alignment_set: num_distractors must be in [1, 3]");
  }
  std::map<UserId, std::map<ItemId, int>> neg_counts;
  std::map<UserId, std::set<ItemId>> purchased;
  for (const InteractionEvent& e : corpus.events) {
    if (e.polarity == Polarity::NegativeFeedback) {
      ++neg_counts[e.user][e.item];
    } else if (e.polarity == Polarity::Purchase) {
      purchased[e.user].insert(e.item);
    }
  }

  Rng rng(config.seed);
  std::vector<AlignmentSample> samples;
  for (const auto& [user, counts] : neg_counts) {
    std::vector<ItemId> qualifying;
    for (const auto& [item, count] : counts) {
      if (count > config.min_neg_count) qualifying.push_back(item);
    }
    if (qualifying.empty()) continue;
    std::vector<ItemId> pool;
    auto pit = purchased.find(user);
    if (pit != purchased.end()) {
      for (ItemId item : pit->second) {
        // Keep disliked-enough items out of the pool so every sample's options
        // hold exactly one qualifying item.
        if (!std::binary_search(qualifying.begin(), qualifying.end(), item)) {
          pool.push_back(item);
        }
      }
    }
    if (static_cast<int>(pool.size()) < config.num_distractors) continue;
    for (ItemId item : qualifying) {
      const auto picks = rng.sample_without_replacement(pool.size(), config.num_distractors);
      AlignmentSample s;
      s.user = user;
      s.item = item;
      std::vector<ItemId> option_items = {item};
      for (std::size_t idx : picks) {
        s.positives.push_back(sids.sid_of(pool[idx]));
        option_items.push_back(pool[idx]);
      }
      std::vector<std::size_t> perm(option_items.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
      rng.shuffle(perm);
      for (std::size_t j = 0; j < perm.size(); ++j) {
        s.options.push_back(sids.sid_of(option_items[perm[j]]));
        if (perm[j] == 0) s.answer = static_cast<int>(j);
      }
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

std::vector<int> alignment_prompt(const AlignmentSample& sample, const TokenVocab& vocab) {
  if (sample.options.empty() ||
      static_cast<int>(sample.options.size()) > TokenVocab::kNumOptions) {
    throw std::invalid_argument("alignment_prompt: options must number 1..4");
  }
  if (sample.answer < 0 || sample.answer >= static_cast<int>(sample.options.size())) {
    throw std::invalid_argument("alignment_prompt: answer index out of range");
  }
  std::vector<int> out;
  out.push_back(TokenVocab::kBos);
  out.push_back(TokenVocab::kSepPos);
  for (const SemanticId& sid : sample.positives) vocab.append_sid(sid, out);
  for (std::size_t j = 0; j < sample.options.size(); ++j) {
    out.push_back(vocab.option_token(static_cast<int>(j)));
    vocab.append_sid(sample.options[j], out);
  }
  out.push_back(TokenVocab::kSepNeg);
  return out;
}

int argmax_option(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("argmax_option: empty score list");
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

std::vector<double> alignment_scores(const Policy& policy, const AlignmentSample& sample) {
  const std::vector<int> prompt = alignment_prompt(sample, policy.vocab);
  std::vector<double> scores;
  scores.reserve(sample.options.size());
  for (const SemanticId& option : sample.options) {
    scores.push_back(sequence_logprob(policy, prompt, option));
  }
  return scores;
}

int alignment_forward(const Policy& policy, const AlignmentSample& sample) {
  return argmax_option(alignment_scores(policy, sample));
}

double alignment_accuracy(const Policy& policy, std::span<const AlignmentSample> samples) {
  if (samples.empty()) throw std::invalid_argument("alignment_accuracy: no samples");
  std::size_t hits = 0;
  for (const AlignmentSample& s : samples) {
    if (alignment_forward(policy, s) == s.answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Supervised training
// ---------------------------------------------------------------------------

namespace {

// One optimizer step of batch-mean cross-entropy over each sequence's tokens
// from `target_start` onward (full-vocabulary softmax). Returns the pre-step
// loss.
double cross_entropy_step(Policy& policy, const std::vector<std::vector<int>>& seqs,
                          const std::vector<std::size_t>& target_start, Adam& adam) {
  policy.zero_grad();
  const double coeff = -1.0 / static_cast<double>(seqs.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const std::vector<int>& seq = seqs[i];
    std::vector<ScoredPosition> positions;
    positions.reserve(seq.size() - target_start[i]);
    for (std::size_t t = target_start[i]; t < seq.size(); ++t) {
      positions.push_back({static_cast<int>(t - 1), seq[t], coeff, -1});
    }
    loss += scored_logprob_backward(policy, seq, positions);
  }
  adam.step(param_walk(policy));
  return loss;
}

template <typename StepFn>
std::vector<TrainStepLog> run_sft_loop(std::size_t n, const SftConfig& config, StepFn step_fn) {
  if (n == 0) throw std::invalid_argument("sft: no training examples");
  if (config.epochs < 1 || config.batch_size < 1) {
    throw std::invalid_argument("sft: epochs and batch_size must be >= 1");
  }
  if (!(config.lr > 0.0) || !(config.divergence_factor > 0.0)) {
    throw std::invalid_argument("sft: lr and divergence_factor must be positive");
  }
  Rng rng(config.seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<TrainStepLog> log;
  double initial = 0.0;
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
      const std::size_t end = std::min(n, begin + config.batch_size);
      ++step;  // 1-based in logs and error messages
      const double loss = step_fn(std::span<const std::size_t>(order.data() + begin, end - begin));
      if (step == 1) initial = loss;
      if (!std::isfinite(loss) ||
          loss > config.divergence_factor * std::max(initial, 1.0)) {
        throw std::runtime_error("sft: training diverged at step " + std::to_string(step) +
                                 " (loss " + std::to_string(loss) + ")");
      }
      log.push_back({step, loss});
    }
  }
  return log;
}

}  // namespace

double alignment_sft_step(Policy& policy, std::span<const AlignmentSample> batch, Adam& adam) {
  if (batch.empty()) throw std::invalid_argument("alignment_sft_step: empty batch");
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> starts;
  seqs.reserve(batch.size());
  starts.reserve(batch.size());
  for (const AlignmentSample& s : batch) {
    std::vector<int> seq = alignment_prompt(s, policy.vocab);
    starts.push_back(seq.size());
    policy.vocab.append_sid(s.options[s.answer], seq);
    seqs.push_back(std::move(seq));
  }
  return cross_entropy_step(policy, seqs, starts, adam);
}

std::vector<TrainStepLog> train_alignment(Policy& policy, std::span<const AlignmentSample> samples,
                                          const SftConfig& config) {
  Adam adam(config.lr);
  return run_sft_loop(samples.size(), config, [&](std::span<const std::size_t> batch_idx) {
    std::vector<AlignmentSample> batch;
    batch.reserve(batch_idx.size());
    for (std::size_t i : batch_idx) batch.push_back(samples[i]);
    return alignment_sft_step(policy, batch, adam);
  });
}

std::vector<SftExample> make_warmup_examples(std::span<const TrainingSample> samples, Stage stage,
                                             const TokenVocab& vocab, const SidAssignment& sids,
                                             std::uint64_t seed, int max_events) {
  Rng rng(seed);
  std::vector<SftExample> out;
  for (const TrainingSample& s : samples) {
    if (s.gts.empty()) continue;
    SftExample ex;
    ex.context = serialize_context(s.contexts[static_cast<std::size_t>(stage)], stage, vocab,
                                   sids, max_events);
    const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(s.gts.size()));
    ex.target = sids.sid_of(s.gts[pick]);
    out.push_back(std::move(ex));
  }
  return out;
}

double warmup_sft_step(Policy& policy, std::span<const SftExample> batch, Adam& adam) {
  if (batch.empty()) throw std::invalid_argument("warmup_sft_step: empty batch");
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> starts;
  seqs.reserve(batch.size());
  starts.reserve(batch.size());
  for (const SftExample& ex : batch) {
    std::vector<int> seq = ex.context;
    starts.push_back(seq.size());
    policy.vocab.append_sid(ex.target, seq);
    seqs.push_back(std::move(seq));
  }
  return cross_entropy_step(policy, seqs, starts, adam);
}

std::vector<TrainStepLog> warmup_sft(Policy& policy, std::span<const SftExample> examples,
                                     const SftConfig& config) {
  Adam adam(config.lr);
  return run_sft_loop(examples.size(), config, [&](std::span<const std::size_t> batch_idx) {
    std::vector<SftExample> batch;
    batch.reserve(batch_idx.size());
    for (std::size_t i : batch_idx) batch.push_back(examples[i]);
    return warmup_sft_step(policy, batch, adam);
  });
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_policy(const Policy& policy, const std::string& path) {
  if (policy.lora_attached()) {
    throw std::logic_error("save_policy: merge or drop adapters before saving");
  }
  TensorFile file;
  file.set_meta("kind", 2);  // 2 = autoregressive token policy
  file.set_meta("levels", policy.vocab.levels);
  file.set_meta("codebook_size", policy.vocab.codebook_size);
  file.set_meta("d_model", policy.cfg.d_model);
  file.set_meta("n_heads", policy.cfg.n_heads);
  file.set_meta("n_blocks", policy.cfg.n_blocks);
  file.set_meta("d_ff", policy.cfg.d_ff);
  file.set_meta("max_seq", policy.cfg.max_seq);
  const auto v = static_cast<std::uint64_t>(policy.vocab.size());
  const auto d = static_cast<std::uint64_t>(policy.cfg.d_model);
  const auto dff = static_cast<std::uint64_t>(policy.cfg.d_ff);
  file.add("tok_emb", {v, d}, policy.tok_emb);
  file.add("pos_emb", {static_cast<std::uint64_t>(policy.cfg.max_seq), d}, policy.pos_emb);
  for (std::size_t b = 0; b < policy.blocks.size(); ++b) {
    const Block& blk = policy.blocks[b];
    const std::string p = "blk" + std::to_string(b) + ".";
    file.add(p + "ln1.gamma", {d}, blk.ln1.gamma);
    file.add(p + "ln1.beta", {d}, blk.ln1.beta);
    file.add(p + "attn.wq.w", {d, d}, blk.attn.wq.w);
    file.add(p + "attn.wq.b", {d}, blk.attn.wq.b);
    file.add(p + "attn.wk.w", {d, d}, blk.attn.wk.w);
    file.add(p + "attn.wk.b", {d}, blk.attn.wk.b);
    file.add(p + "attn.wv.w", {d, d}, blk.attn.wv.w);
    file.add(p + "attn.wv.b", {d}, blk.attn.wv.b);
    file.add(p + "attn.wo.w", {d, d}, blk.attn.wo.w);
    file.add(p + "attn.wo.b", {d}, blk.attn.wo.b);
    file.add(p + "ln2.gamma", {d}, blk.ln2.gamma);
    file.add(p + "ln2.beta", {d}, blk.ln2.beta);
    file.add(p + "ffn.w1.w", {dff, d}, blk.ffn.w1.w);
    file.add(p + "ffn.w1.b", {dff}, blk.ffn.w1.b);
    file.add(p + "ffn.w2.w", {d, dff}, blk.ffn.w2.w);
    file.add(p + "ffn.w2.b", {d}, blk.ffn.w2.b);
  }
  file.add("final_ln.gamma", {d}, policy.final_ln.gamma);
  file.add("final_ln.beta", {d}, policy.final_ln.beta);
  file.add("head.w", {v, d}, policy.head.w);
  file.add("head.b", {v}, policy.head.b);
  file.save(path);
}

Policy load_policy(const std::string& path) {
  const TensorFile file = TensorFile::load(path);
  if (file.meta("kind") != 2) {
    throw std::runtime_error("load_policy: " + path + " is not a policy checkpoint");
  }
  const TokenVocab vocab = TokenVocab::make(static_cast<int>(file.meta("levels")),
                                            static_cast<int>(file.meta("codebook_size")));
  PolicyConfig cfg;
  cfg.d_model = static_cast<int>(file.meta("d_model"));
  cfg.n_heads = static_cast<int>(file.meta("n_heads"));
  cfg.n_blocks = static_cast<int>(file.meta("n_blocks"));
  cfg.d_ff = static_cast<int>(file.meta("d_ff"));
  cfg.max_seq = static_cast<int>(file.meta("max_seq"));
  Policy policy = Policy::make(vocab, cfg);
  policy.tok_emb = file.values("tok_emb");
  policy.pos_emb = file.values("pos_emb");
  for (std::size_t b = 0; b < policy.blocks.size(); ++b) {
    Block& blk = policy.blocks[b];
    const std::string p = "blk" + std::to_string(b) + ".";
    blk.ln1.gamma = file.values(p + "ln1.gamma");
    blk.ln1.beta = file.values(p + "ln1.beta");
    blk.attn.wq.w = file.values(p + "attn.wq.w");
    blk.attn.wq.b = file.values(p + "attn.wq.b");
    blk.attn.wk.w = file.values(p + "attn.wk.w");
    blk.attn.wk.b = file.values(p + "attn.wk.b");
    blk.attn.wv.w = file.values(p + "attn.wv.w");
    blk.attn.wv.b = file.values(p + "attn.wv.b");
    blk.attn.wo.w = file.values(p + "attn.wo.w");
    blk.attn.wo.b = file.values(p + "attn.wo.b");
    blk.ln2.gamma = file.values(p + "ln2.gamma");
    blk.ln2.beta = file.values(p + "ln2.beta");
    blk.ffn.w1.w = file.values(p + "ffn.w1.w");
    blk.ffn.w1.b = file.values(p + "ffn.w1.b");
    blk.ffn.w2.w = file.values(p + "ffn.w2.w");
    blk.ffn.w2.b = file.values(p + "ffn.w2.b");
  }
  policy.final_ln.gamma = file.values("final_ln.gamma");
  policy.final_ln.beta = file.values("final_ln.beta");
  policy.head.w = file.values("head.w");
  policy.head.b = file.values("head.b");
  return policy;
}

}  // namespace negrec
