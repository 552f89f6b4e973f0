// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "negrec/codec.hpp"
#include "negrec/corpus.hpp"
#include "negrec/policy.hpp"
#include "negrec/targets.hpp"

namespace negrec {

// ---------------------------------------------------------------------------
// Rewards. Similarity-based schemes compare the generated id against the
// expanded ground-truth set (and penalize closeness to future positives) via
// cosine over codebook reconstructions; the hierarchical scheme pays a
// prefix-depth ladder instead.
// ---------------------------------------------------------------------------

enum class RewardScheme {
  SimGts = 0,        // best ground-truth similarity
  SimTruncated = 1,  // same, zeroed below `trunc`
  SimMinusFps = 2,   // ground-truth similarity minus gamma * positive similarity
  BothTruncated = 3, // both similarities truncated before combining
  HierHit = 4,       // 1 / 0.1 / 0.01 / 0 by matched prefix depth
};

std::string to_string(RewardScheme scheme);
RewardScheme reward_scheme_from_string(const std::string& name);

struct RewardSpec {
  RewardScheme scheme = RewardScheme::SimMinusFps;
  double gamma = 0.5;  // weight of the future-positive penalty
  double trunc = 0.6;  // truncation threshold for the truncated schemes

  void validate() const;  // gamma >= 0, trunc in [0, 1]
};

// Best-match scores are clamped at zero (an all-negative best cosine carries
// no more signal than an empty set), so SimGts/SimTruncated stay in [0, 1]
// and the penalized schemes in [-gamma, 1]. HierHit ignores gamma and trunc.
double compute_reward(const SemanticId& output, std::span<const SemanticId> gts_expanded,
                      std::span<const SemanticId> fps, const Codec& codec,
                      const RewardSpec& spec);

// Group-level standardization: (r - mean) / population std. Groups need at
// least two members; a group with std below 1e-8 yields all zeros.
std::vector<double> compute_advantages(std::span<const double> rewards);

// Per-token estimator rho - log(rho) - 1 with rho = pi_ref / pi_theta, both
// in generation space (level-masked softmax). Nonnegative, zero iff equal.
std::vector<double> kl_per_token(const Policy& policy, const Policy& ref,
                                 std::span<const int> context,
                                 std::span<const int> sid_tokens);

// ---------------------------------------------------------------------------
// Group batches: one context with G sampled ids, their logprobs recorded
// under the sampling-time policy snapshot, rewards, and advantages.
// ---------------------------------------------------------------------------

struct GroupSample {
  std::vector<int> tokens;           // the id tokens, one per level
  std::vector<double> old_logprobs;  // generation-space logprobs at sampling time
  double reward = 0.0;
  double advantage = 0.0;

  bool operator==(const GroupSample&) const = default;
};

struct GroupBatch {
  std::vector<int> context;  // serialized stage context
  std::vector<GroupSample> outputs;

  bool operator==(const GroupBatch&) const = default;
};

struct GrpoConfig {
  double clip_eps = 0.2;     // ratio clip half-width, in (0, 1)
  double beta = 0.02;        // KL weight toward the reference policy
  int group_size = 8;        // samples per context, >= 2
  int groups_per_step = 4;   // contexts per optimizer step
  int steps = 40;            // optimizer steps per stage
  int refresh_period = 1;    // steps between sampling-snapshot refreshes
  double temperature = 1.0;  // sampling temperature, > 0
  double lr = 0.5;           // plain SGD step size
  int max_context_events = kDefaultMaxContextEvents;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

struct GrpoLossStats {
  double loss = 0.0;
  double mean_kl = 0.0;        // mean per-token KL estimate
  double clip_fraction = 0.0;  // fraction of tokens on the clipped branch
};

// Clipped-ratio objective with a KL penalty: per token,
//   min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) - beta * kl,
// averaged over each sequence's tokens, then over the group, then over
// batches, and negated. Ratios use the recorded sampling-time logprobs, so no
// snapshot policy is consulted here; only `ref` is queried (for the KL term).
GrpoLossStats grpo_loss(const Policy& policy, const Policy& ref,
                        std::span<const GroupBatch> batches, const GrpoConfig& config);

// Same value; additionally accumulates d(loss)/d(trainable params) into the
// policy's gradient buffers (call zero_grad first for a fresh gradient).
GrpoLossStats grpo_loss_backward(Policy& policy, const Policy& ref,
                                 std::span<const GroupBatch> batches,
                                 const GrpoConfig& config);

// ---------------------------------------------------------------------------
// Stage driver: sample groups from the refresh snapshot, score them against
// each sample's target sets, take one SGD step per iteration.
// ---------------------------------------------------------------------------

struct StageStepLog {
  int step = 0;  // 1-based
  double mean_reward = 0.0;
  double loss = 0.0;
  double mean_kl = 0.0;
};

// The reference policy for the KL term is the entry snapshot. Contexts are
// the samples' stage contexts; targets are the expanded ground-truth and
// future-positive sets mapped through the assignment. Aborts on a non-finite
// loss. Deterministic in (samples, config).
std::vector<StageStepLog> run_stage(Policy& policy, std::span<const TrainingSample> samples,
                                    Stage stage, const Codec& codec, const SidAssignment& sids,
                                    const RewardSpec& reward, const GrpoConfig& config);

// ---------------------------------------------------------------------------
// Three-stage curriculum: short negative context, full negative context,
// mixed context. Between stages, samples whose current predictions look too
// close to future positives are duplicated for the next stage.
// ---------------------------------------------------------------------------

struct CurriculumConfig {
  GrpoConfig grpo;  // per-stage seeds are derived from grpo.seed + stage name
  std::array<double, kNumStages> beta = {0.02, 0.02, 0.1};
  RewardSpec reward;
  int lora_rank = 4;         // 0 trains the full parameter set
  unsigned lora_targets = kLoraAll;
  double augment_threshold = 0.8;  // flagging similarity threshold
  int augment_beam_width = 8;      // predictions per sample when flagging
  int eval_k = 20;                 // held-out predict-set size
  bool skip_early_stages = false;  // ablation: run only the final stage

  void validate() const;
};

struct StageReport {
  Stage stage = Stage::Neg3Day;
  std::uint64_t ref_hash = 0;          // entry-snapshot parameter hash
  std::size_t train_size = 0;          // samples trained on (after duplication)
  std::vector<StageStepLog> log;
  std::optional<double> held_out_fhr;  // future hit ratio at eval_k
};

struct CurriculumResult {
  std::vector<StageReport> stages;
};

// Stages run in order on `train`; adapters (if configured) are attached at
// stage entry and merged at stage exit, so the policy always leaves plain.
// Held-out metrics use each stage's own context serialization.
CurriculumResult run_curriculum(Policy& policy, const Corpus& corpus,
                                std::span<const TrainingSample> train,
                                std::span<const TrainingSample> held_out, const Codec& codec,
                                const SidAssignment& sids, const CurriculumConfig& config);

// FNV-1a over the trainable parameter values in walk order (all base
// parameters when no adapter is attached).
std::uint64_t policy_param_hash(Policy& policy);

}  // namespace negrec
