// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Autoregressive sequence model over semantic-id tokens: a small causal
// transformer (manual gradients, double precision) plus everything built on
// top of it — context serialization, likelihood scoring, group sampling,
// constrained beam search, low-rank adapters, the 4-way item-alignment task,
// and supervised warm-up training.
//
// Two scoring semantics coexist and are both load-bearing:
//   * sequence_logprob and the SFT losses normalize over the FULL vocabulary
//     (ordinary next-token cross-entropy space).
//   * Generation — sample_group, beam_search, generation_logprobs — masks
//     each step to that level's token slice and renormalizes, so only valid
//     id sequences are ever produced. Recorded sample logprobs are those of
//     this masked sampling distribution, and ratio-based RL losses must use
//     generation_logprobs so that a freshly snapshotted sampler yields
//     ratios of exactly 1.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "negrec/codec.hpp"
#include "negrec/corpus.hpp"
#include "negrec/optimizer.hpp"
#include "negrec/rng.hpp"
#include "negrec/targets.hpp"
#include "negrec/types.hpp"

namespace negrec {

// ---------------------------------------------------------------------------
// Token vocabulary: 8 control tokens followed by levels * codebook_size level
// tokens, densely packed. Level d's slice is [level_begin(d), level_begin(d+1)).
// ---------------------------------------------------------------------------

struct TokenVocab {
  int levels = 3;
  int codebook_size = 64;

  static constexpr int kBos = 0;
  static constexpr int kEos = 1;  // reserved; fixed-length decoding never emits it
  static constexpr int kSepNeg = 2;
  static constexpr int kSepPos = 3;
  static constexpr int kOption0 = 4;  // kOption0 + j for option slot j
  static constexpr int kNumOptions = 4;
  static constexpr int kNumControl = 8;

  static TokenVocab make(int levels, int codebook_size);  // validates ranges

  int size() const { return kNumControl + levels * codebook_size; }
  int option_token(int slot) const;          // slot in [0, 4)
  int level_begin(int level) const;          // first token id of a level's slice
  int level_token(int level, int index) const;
  bool is_level_token(int id, int level) const;
  int level_of(int id) const;                // -1 for control tokens
  int code_of(int id) const;                 // codeword index, -1 for control

  void append_sid(const SemanticId& sid, std::vector<int>& out) const;
  std::vector<int> sid_tokens(const SemanticId& sid) const;  // exactly `levels` tokens
  SemanticId sid_from_tokens(std::span<const int> tokens) const;

  bool operator==(const TokenVocab&) const = default;
};

// ---------------------------------------------------------------------------
// Layers. Weights are row-major [out x in]; gradients live beside the values
// so one optimizer walk covers everything.
// ---------------------------------------------------------------------------

struct LayerNorm {
  std::vector<double> gamma, beta;
  std::vector<double> ggamma, gbeta;

  static LayerNorm make(int dim);
  int dim() const { return static_cast<int>(gamma.size()); }
};

// Low-rank adapter for one weight matrix: effective weight W' = W + B*A with
// A [rank x in] and B [out x rank]; B starts at zero so attaching is identity.
struct LoraAdapter {
  int rank = 0;
  std::vector<double> a, b;
  std::vector<double> ga, gb;
};

struct Linear {
  int in = 0, out = 0;
  std::vector<double> w, b;    // w[o * in + i]
  std::vector<double> gw, gb;
  std::optional<LoraAdapter> lora;

  static Linear make(int in, int out);
  void forward(const double* x, double* y) const;  // y = W'x + b
};

struct AttentionLayer {
  Linear wq, wk, wv, wo;
};

struct FfnLayer {
  Linear w1, w2;  // d_model -> d_ff -> d_model, exact GELU between
};

struct Block {
  LayerNorm ln1;
  AttentionLayer attn;
  LayerNorm ln2;
  FfnLayer ffn;
};

struct PolicyConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_blocks = 2;
  int d_ff = 256;
  int max_seq = 256;

  void validate() const;  // throws std::invalid_argument
  bool operator==(const PolicyConfig&) const = default;
};

// Pre-norm causal transformer with learned positional embeddings and an
// untied output projection. The head is zero-initialized, so a fresh policy
// scores every token uniformly.
struct Policy {
  TokenVocab vocab;
  PolicyConfig cfg;

  std::vector<double> tok_emb, gtok_emb;  // [V x d_model]
  std::vector<double> pos_emb, gpos_emb;  // [max_seq x d_model]
  std::vector<Block> blocks;
  LayerNorm final_ln;
  Linear head;  // d_model -> V

  static Policy make(TokenVocab vocab, PolicyConfig cfg = {});
  void init_random(Rng& rng, double scale = 0.02, bool zero_head = true);

  void zero_grad();
  // Walks the trainable parameters in a stable order. With any adapter
  // attached, only adapter matrices are trainable; the base model is frozen.
  void visit_params(const ParamVisitor& visit);
  std::size_t num_params() const;      // all base parameters
  std::size_t num_trainable_params();  // respects adapter freezing
  bool lora_attached() const;
};

ParamWalk param_walk(Policy& policy);

// ---------------------------------------------------------------------------
// Low-rank adaptation.
// ---------------------------------------------------------------------------

enum LoraTargets : unsigned {
  kLoraAttnQ = 1u << 0,
  kLoraAttnK = 1u << 1,
  kLoraAttnV = 1u << 2,
  kLoraAttnO = 1u << 3,
  kLoraFfnIn = 1u << 4,
  kLoraFfnOut = 1u << 5,
  kLoraHead = 1u << 6,
  kLoraAttnAll = kLoraAttnQ | kLoraAttnK | kLoraAttnV | kLoraAttnO,
  kLoraAll = kLoraAttnAll | kLoraFfnIn | kLoraFfnOut | kLoraHead,
};

// Returns a copy with fresh adapters (A random, B zero) on the selected
// matrices of every block (and the head if selected). Identity at attach time.
Policy apply_lora(const Policy& base, int rank, unsigned targets, Rng& rng);

// Folds every adapter's B*A into its base weight and removes the adapters.
Policy merge_lora(const Policy& adapted);

// ---------------------------------------------------------------------------
// Forward passes and scoring.
// ---------------------------------------------------------------------------

// Raw causal logits; row t scores the token that would follow position t.
std::vector<std::vector<double>> next_token_logits(const Policy& policy,
                                                   std::span<const int> tokens);

std::vector<double> softmax(std::span<const double> logits);

// One scored target token: the log-probability of `token` under the softmax
// of logits row `row`, optionally renormalized over a single level's slice,
// contributes `coeff * logprob` to the objective.
struct ScoredPosition {
  int row = 0;
  int token = 0;
  double coeff = 1.0;
  int masked_level = -1;  // -1 = full vocabulary
};

std::vector<double> scored_logprobs(const Policy& policy, std::span<const int> tokens,
                                    std::span<const ScoredPosition> positions);
double scored_logprob_sum(const Policy& policy, std::span<const int> tokens,
                          std::span<const ScoredPosition> positions);
// Also accumulates d(weighted sum)/d(trainable params) into gradient buffers.
double scored_logprob_backward(Policy& policy, std::span<const int> tokens,
                               std::span<const ScoredPosition> positions);

// Sum over the id's tokens of log p(token | context, previous tokens) with
// full-vocabulary normalization. Context must be non-empty (starts at BOS).
double sequence_logprob(const Policy& policy, std::span<const int> context,
                        const SemanticId& sid);

// Per-token log-probabilities in generation space (level-masked softmax);
// matches what sample_group records and beam_search scores.
std::vector<double> generation_logprobs(const Policy& policy, std::span<const int> context,
                                        std::span<const int> sid_tokens);

// ---------------------------------------------------------------------------
// Context serialization: BOS, SEP_NEG + negative history (oldest -> newest),
// and for NegPlusPos SEP_POS + positive history. Events beyond `max_events`
// are dropped oldest-first before layout.
// ---------------------------------------------------------------------------

inline constexpr int kDefaultMaxContextEvents = 64;

std::vector<int> serialize_context(std::span<const InteractionEvent> context, Stage stage,
                                   const TokenVocab& vocab, const SidAssignment& sids,
                                   int max_events = kDefaultMaxContextEvents);

// ---------------------------------------------------------------------------
// Incremental decoding with per-block key/value caches. States copy cheaply
// enough for beam branching at this scale.
// ---------------------------------------------------------------------------

struct DecodeState {
  int len = 0;                             // tokens consumed so far
  std::vector<std::vector<double>> k, v;   // per block, len * d_model
  std::vector<double> next_logits;         // logits for position len
};

DecodeState encode_context(const Policy& policy, std::span<const int> tokens);
void decode_step(const Policy& policy, DecodeState& state, int token);

// ---------------------------------------------------------------------------
// Sampling and beam search over the `levels` id tokens.
// ---------------------------------------------------------------------------

struct SampledSequence {
  SemanticId sid;
  std::vector<int> tokens;
  std::vector<double> logprobs;  // of the sampling distribution, per token
  double total_logprob = 0.0;

  bool operator==(const SampledSequence&) const = default;
};

// G >= 2 i.i.d. ancestral samples. temperature == 0 decodes greedily (ties to
// the lowest token id); otherwise logits are divided by the temperature and
// the recorded logprobs are those of the tempered masked distribution.
std::vector<SampledSequence> sample_group(const Policy& policy, std::span<const int> context,
                                          int group_size, double temperature,
                                          std::uint64_t seed);

// Prefix tree over assigned ids; constrains beam expansion to catalog items.
struct SidTrie {
  struct Node {
    std::vector<std::pair<std::uint16_t, int>> children;  // sorted by code
  };
  int levels = 0;
  std::vector<Node> nodes;  // nodes[0] is the root

  static SidTrie build(std::span<const SemanticId> sids);
  const Node* walk(std::span<const int> codes) const;  // nullptr if off-trie
  std::size_t num_sequences() const;
};

SidTrie assigned_sid_trie(const SidAssignment& sids);

struct BeamResult {
  SemanticId sid;
  double logprob = 0.0;

  bool operator==(const BeamResult&) const = default;
};

// Standard length-`levels` beam. Results are sorted by score descending with
// token-id-lexicographic tie order; fewer than `beam_width` results are
// returned when the trie admits fewer sequences.
std::vector<BeamResult> beam_search(const Policy& policy, std::span<const int> context,
                                    int beam_width, const SidTrie* trie = nullptr);

// ---------------------------------------------------------------------------
// Item-level alignment: pick the disliked item among purchased distractors.
// ---------------------------------------------------------------------------

struct AlignmentSample {
  UserId user = 0;
  ItemId item = 0;                    // the disliked item (the correct answer)
  std::vector<SemanticId> positives;  // purchase-history distractors, prompt context
  std::vector<SemanticId> options;    // 4 entries; exactly one is `item`'s id
  int answer = 0;                     // index of the disliked item in options

  bool operator==(const AlignmentSample&) const = default;
};

struct AlignmentConfig {
  int min_neg_count = 3;   // qualify items with strictly more negative events
  int num_distractors = 3;
  std::uint64_t seed = 0;
};

// One sample per (user, qualifying item). Distractors are drawn without
// replacement from the user's purchased items (excluding qualifying ones, so
// options always hold exactly one disliked item); users with too few distinct
// purchases contribute nothing. Option order is shuffled deterministically.
std::vector<AlignmentSample> build_alignment_set(const Corpus& corpus, const SidAssignment& sids,
                                                 const AlignmentConfig& config = {});

// BOS, SEP_POS + positives, OPT_j + option j's tokens for each slot, SEP_NEG.
// The answer's tokens follow SEP_NEG when scoring or teacher-forcing.
std::vector<int> alignment_prompt(const AlignmentSample& sample, const TokenVocab& vocab);

int argmax_option(std::span<const double> scores);  // ties -> lowest index
std::vector<double> alignment_scores(const Policy& policy, const AlignmentSample& sample);
int alignment_forward(const Policy& policy, const AlignmentSample& sample);
double alignment_accuracy(const Policy& policy, std::span<const AlignmentSample> samples);

// ---------------------------------------------------------------------------
// Supervised training: shared config, one optimizer step per batch, loss is
// the batch-mean token cross-entropy summed over each sample's target tokens.
// ---------------------------------------------------------------------------

struct SftConfig {
  int epochs = 10;
  int batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double divergence_factor = 50.0;  // abort when loss exceeds this x initial
};

struct TrainStepLog {
  int step = 0;
  double loss = 0.0;
};

// One gradient step on a batch; returns the pre-step loss.
double alignment_sft_step(Policy& policy, std::span<const AlignmentSample> batch, Adam& adam);
std::vector<TrainStepLog> train_alignment(Policy& policy, std::span<const AlignmentSample> samples,
                                          const SftConfig& config);

struct SftExample {
  std::vector<int> context;  // serialized stage context
  SemanticId target;

  bool operator==(const SftExample&) const = default;
};

// One example per sample with a non-empty ground-truth set: the stage context
// paired with one uniformly drawn ground-truth item id.
std::vector<SftExample> make_warmup_examples(std::span<const TrainingSample> samples, Stage stage,
                                             const TokenVocab& vocab, const SidAssignment& sids,
                                             std::uint64_t seed,
                                             int max_events = kDefaultMaxContextEvents);

double warmup_sft_step(Policy& policy, std::span<const SftExample> batch, Adam& adam);
std::vector<TrainStepLog> warmup_sft(Policy& policy, std::span<const SftExample> examples,
                                     const SftConfig& config);

// ---------------------------------------------------------------------------
// Persistence (same tensor container as the codec). Adapters must be merged
// or dropped before saving.
// ---------------------------------------------------------------------------

void save_policy(const Policy& policy, const std::string& path);
Policy load_policy(const std::string& path);

}  // namespace negrec
