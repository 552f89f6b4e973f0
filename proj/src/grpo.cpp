// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "negrec/eval.hpp"
#include "negrec/optimizer.hpp"
#include "negrec/rng.hpp"
#include "negrec/serialize.hpp"

namespace negrec {

std::string to_string(RewardScheme scheme) {
  switch (scheme) {
    case RewardScheme::SimGts: return "sim-gts";
    case RewardScheme::SimTruncated: return "sim-truncated";
    case RewardScheme::SimMinusFps: return "sim-minus-fps";
    case RewardScheme::BothTruncated: return "both-truncated";
    case RewardScheme::HierHit: return "hier-hit";
  }
  throw std::invalid_argument("to_string: unknown reward scheme");
}

RewardScheme reward_scheme_from_string(const std::string& name) {
  for (RewardScheme s : {RewardScheme::SimGts, RewardScheme::SimTruncated,
                         RewardScheme::SimMinusFps, RewardScheme::BothTruncated,
                         RewardScheme::HierHit}) {
    if (name == to_string(s)) return s;
  }
  throw std::invalid_argument("reward_scheme_from_string: unknown scheme '" + name + "'");
}

void RewardSpec::validate() const {
  if (!std::isfinite(gamma) || gamma < 0.0) {
    throw std::invalid_argument("RewardSpec: gamma must be finite and >= 0");
  }
  if (!(trunc >= 0.0 && trunc <= 1.0)) {
    throw std::invalid_argument("RewardSpec: trunc must lie in [0, 1]");
  }
}

namespace {

// Longest-common-prefix reward ladder: full depth pays 1, each missing level
// divides by 10, no match pays 0.
double prefix_reward(const SemanticId& output, std::span<const SemanticId> gts_expanded) {
  const int levels = static_cast<int>(output.levels());
  double best = 0.0;
  for (const SemanticId& g : gts_expanded) {
    int depth = 0;
    const int lim = static_cast<int>(std::min(output.levels(), g.levels()));
    while (depth < lim && output.codes[static_cast<std::size_t>(depth)] ==
                              g.codes[static_cast<std::size_t>(depth)]) {
      ++depth;
    }
    if (depth > 0) best = std::max(best, std::pow(10.0, depth - levels));
  }
  return best;
}

}  // namespace

double compute_reward(const SemanticId& output, std::span<const SemanticId> gts_expanded,
                      std::span<const SemanticId> fps, const Codec& codec,
                      const RewardSpec& spec) {
  spec.validate();
  if (spec.scheme == RewardScheme::HierHit) return prefix_reward(output, gts_expanded);

  const std::vector<double> rec = reconstruct_from_sid(codec, output);
  const auto best_sim = [&](std::span<const SemanticId> set) {
    double best = 0.0;  // empty sets and all-negative cosines both score 0
    for (const SemanticId& sid : set) {
      best = std::max(best, cosine_similarity(rec, reconstruct_from_sid(codec, sid)));
    }
    return std::min(best, 1.0);  // guard cosine roundoff so bounds hold exactly
  };
  const auto truncate = [&](double s) { return s >= spec.trunc ? s : 0.0; };

  const double s_plus = best_sim(gts_expanded);
  switch (spec.scheme) {
    case RewardScheme::SimGts:
      return s_plus;
    case RewardScheme::SimTruncated:
      return truncate(s_plus);
    case RewardScheme::SimMinusFps:
      return s_plus - spec.gamma * best_sim(fps);
    case RewardScheme::BothTruncated:
      return truncate(s_plus) - spec.gamma * truncate(best_sim(fps));
    case RewardScheme::HierHit:
      break;  // handled above
  }
  throw std::invalid_argument("compute_reward: unknown reward scheme");
}

std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) {
    throw std::invalid_argument("compute_advantages: need a group of >= 2 rewards");
  }
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);

  std::vector<double> out(rewards.size(), 0.0);
  if (sd < 1e-8) return out;  // degenerate group: no learning signal
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

std::vector<double> kl_per_token(const Policy& policy, const Policy& ref,
                                 std::span<const int> context,
                                 std::span<const int> sid_tokens) {
  const std::vector<double> lp = generation_logprobs(policy, context, sid_tokens);
  const std::vector<double> lp_ref = generation_logprobs(ref, context, sid_tokens);
  std::vector<double> out(lp.size());
  for (std::size_t t = 0; t < lp.size(); ++t) {
    const double d = lp_ref[t] - lp[t];  // log rho
    out[t] = std::max(0.0, std::exp(d) - d - 1.0);
  }
  return out;
}

void GrpoConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) {
    throw std::invalid_argument("GrpoConfig: clip_eps must lie in (0, 1)");
  }
  if (!std::isfinite(beta) || beta < 0.0) {
    throw std::invalid_argument("GrpoConfig: beta must be finite and >= 0");
  }
  if (group_size < 2) throw std::invalid_argument("GrpoConfig: group_size must be >= 2");
  if (groups_per_step < 1) throw std::invalid_argument("GrpoConfig: groups_per_step must be >= 1");
  if (steps < 1) throw std::invalid_argument("GrpoConfig: steps must be >= 1");
  if (refresh_period < 1) throw std::invalid_argument("GrpoConfig: refresh_period must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("GrpoConfig: temperature must be > 0");
  if (!(lr > 0.0)) throw std::invalid_argument("GrpoConfig: lr must be > 0");
  if (max_context_events < 0) {
    throw std::invalid_argument("GrpoConfig: max_context_events must be >= 0");
  }
}

namespace {

// Shared evaluation for grpo_loss and grpo_loss_backward. When `grad_policy`
// is non-null, per-token outer derivatives are pushed through the scored
// logprob backward pass (which accumulates into the gradient buffers).
GrpoLossStats grpo_loss_impl(const Policy& policy, Policy* grad_policy, const Policy& ref,
                             std::span<const GroupBatch> batches, const GrpoConfig& config) {
  config.validate();
  if (batches.empty()) throw std::invalid_argument("grpo_loss: no group batches");

  double batch_sum = 0.0;
  double kl_sum = 0.0;
  std::size_t token_count = 0;
  std::size_t clipped_count = 0;

  for (const GroupBatch& batch : batches) {
    if (batch.context.empty()) throw std::invalid_argument("grpo_loss: empty context");
    if (batch.outputs.size() < 2) {
      throw std::invalid_argument("grpo_loss: each group needs >= 2 outputs");
    }
    const double scale_groups =
        static_cast<double>(batches.size()) * static_cast<double>(batch.outputs.size());

    double inner_sum = 0.0;
    for (const GroupSample& sample : batch.outputs) {
      if (sample.tokens.empty() || sample.tokens.size() != sample.old_logprobs.size()) {
        throw std::invalid_argument("grpo_loss: tokens and recorded logprobs disagree");
      }
      const std::vector<double> lp = generation_logprobs(policy, batch.context, sample.tokens);
      const std::vector<double> lp_ref = generation_logprobs(ref, batch.context, sample.tokens);
      const double T = static_cast<double>(sample.tokens.size());
      const int ctx_len = static_cast<int>(batch.context.size());

      double seq_sum = 0.0;
      std::vector<ScoredPosition> positions;
      if (grad_policy != nullptr) positions.reserve(sample.tokens.size());

      for (std::size_t t = 0; t < sample.tokens.size(); ++t) {
        const double rho = std::exp(lp[t] - sample.old_logprobs[t]);
        const double rho_clip = std::clamp(rho, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
        const double a = sample.advantage;
        const bool unclipped = rho * a <= rho_clip * a;
        if (!unclipped) ++clipped_count;

        const double d = lp_ref[t] - lp[t];  // log of the reference ratio
        const double kl = std::max(0.0, std::exp(d) - d - 1.0);
        kl_sum += kl;
        ++token_count;

        seq_sum += (unclipped ? rho * a : rho_clip * a) - config.beta * kl;

        if (grad_policy != nullptr) {
          // d(objective)/d(logprob): the surviving surrogate branch plus the
          // KL term's 1 - rho_ref; negated and averaged into the loss.
          const double d_obj = (unclipped ? rho * a : 0.0) -
                               config.beta * (1.0 - std::exp(d));
          positions.push_back(ScoredPosition{ctx_len - 1 + static_cast<int>(t),
                                             sample.tokens[t], -d_obj / (scale_groups * T),
                                             static_cast<int>(t)});
        }
      }
      inner_sum += seq_sum / T;

      if (grad_policy != nullptr) {
        std::vector<int> seq(batch.context.begin(), batch.context.end());
        seq.insert(seq.end(), sample.tokens.begin(), sample.tokens.end());
        scored_logprob_backward(*grad_policy, seq, positions);
      }
    }
    batch_sum += inner_sum / static_cast<double>(batch.outputs.size());
  }

  GrpoLossStats stats;
  stats.loss = -batch_sum / static_cast<double>(batches.size());
  stats.mean_kl = kl_sum / static_cast<double>(token_count);
  stats.clip_fraction = static_cast<double>(clipped_count) / static_cast<double>(token_count);
  return stats;
}

}  // namespace

GrpoLossStats grpo_loss(const Policy& policy, const Policy& ref,
                        std::span<const GroupBatch> batches, const GrpoConfig& config) {
  return grpo_loss_impl(policy, nullptr, ref, batches, config);
}

GrpoLossStats grpo_loss_backward(Policy& policy, const Policy& ref,
                                 std::span<const GroupBatch> batches,
                                 const GrpoConfig& config) {
  return grpo_loss_impl(policy, &policy, ref, batches, config);
}

std::vector<StageStepLog> run_stage(Policy& policy, std::span<const TrainingSample> samples,
                                    Stage stage, const Codec& codec, const SidAssignment& sids,
                                    const RewardSpec& reward, const GrpoConfig& config) {
  config.validate();
  reward.validate();
  if (samples.empty()) throw std::invalid_argument("run_stage: no training samples");

  struct Prep {
    std::vector<int> context;
    std::vector<SemanticId> gts, fps;
  };
  std::vector<Prep> prep;
  prep.reserve(samples.size());
  for (const TrainingSample& s : samples) {
    Prep p;
    p.context = serialize_context(s.contexts[static_cast<std::size_t>(stage)], stage,
                                  policy.vocab, sids, config.max_context_events);
    for (ItemId item : s.gts_expanded) p.gts.push_back(sids.sid_of(item));
    for (ItemId item : s.fps) p.fps.push_back(sids.sid_of(item));
    prep.push_back(std::move(p));
  }

  const Policy ref = policy;  // entry snapshot anchors the KL term
  Policy snapshot = policy;   // sampling-time policy, refreshed on schedule
  Sgd opt(config.lr);
  Rng rng(config.seed);
  std::vector<std::size_t> order(prep.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;

  std::vector<StageStepLog> log;
  log.reserve(static_cast<std::size_t>(config.steps));
  for (int step = 1; step <= config.steps; ++step) {
    if ((step - 1) % config.refresh_period == 0) snapshot = policy;

    std::vector<GroupBatch> batches;
    batches.reserve(static_cast<std::size_t>(config.groups_per_step));
    double reward_sum = 0.0;
    for (int g = 0; g < config.groups_per_step; ++g) {
      const Prep& p = prep[order[cursor]];
      cursor = (cursor + 1) % order.size();

      GroupBatch batch;
      batch.context = p.context;
      std::vector<double> rewards;
      for (const SampledSequence& draw :
           sample_group(snapshot, p.context, config.group_size, config.temperature,
                        rng.next_u64())) {
        GroupSample out;
        out.tokens = draw.tokens;
        // Untempered generation-space logprobs whatever the sampling
        // temperature, so fresh-snapshot ratios are exactly 1.
        out.old_logprobs = generation_logprobs(snapshot, p.context, draw.tokens);
        out.reward = compute_reward(draw.sid, p.gts, p.fps, codec, reward);
        rewards.push_back(out.reward);
        reward_sum += out.reward;
        batch.outputs.push_back(std::move(out));
      }
      const std::vector<double> adv = compute_advantages(rewards);
      for (std::size_t i = 0; i < adv.size(); ++i) batch.outputs[i].advantage = adv[i];
      batches.push_back(std::move(batch));
    }

    policy.zero_grad();
    const GrpoLossStats stats = grpo_loss_backward(policy, ref, batches, config);
    if (!std::isfinite(stats.loss)) {
      throw std::runtime_error("run_stage: non-finite loss at step " + std::to_string(step));
    }
    opt.step(param_walk(policy));

    const double denom = static_cast<double>(config.groups_per_step) *
                         static_cast<double>(config.group_size);
    log.push_back({step, reward_sum / denom, stats.loss, stats.mean_kl});
  }
  return log;
}

void CurriculumConfig::validate() const {
  grpo.validate();
  for (double b : beta) {
    if (!std::isfinite(b) || b < 0.0) {
      throw std::invalid_argument("CurriculumConfig: stage betas must be finite and >= 0");
    }
  }
  reward.validate();
  if (lora_rank < 0) throw std::invalid_argument("CurriculumConfig: lora_rank must be >= 0");
  if (!std::isfinite(augment_threshold)) {
    throw std::invalid_argument("CurriculumConfig: augment_threshold must be finite");
  }
  if (augment_beam_width < 1) {
    throw std::invalid_argument("CurriculumConfig: augment_beam_width must be >= 1");
  }
  if (eval_k < 1) throw std::invalid_argument("CurriculumConfig: eval_k must be >= 1");
}

CurriculumResult run_curriculum(Policy& policy, const Corpus& corpus,
                                std::span<const TrainingSample> train,
                                std::span<const TrainingSample> held_out, const Codec& codec,
                                const SidAssignment& sids, const CurriculumConfig& config) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("run_curriculum: no training samples");

  CurriculumResult result;
  std::vector<TrainingSample> working(train.begin(), train.end());
  for (int stage_idx = 0; stage_idx < kNumStages; ++stage_idx) {
    const Stage stage = kAllStages[static_cast<std::size_t>(stage_idx)];
    const bool last = stage_idx == kNumStages - 1;
    if (config.skip_early_stages && !last) continue;

    GrpoConfig stage_cfg = config.grpo;
    stage_cfg.beta = config.beta[static_cast<std::size_t>(stage_idx)];
    stage_cfg.seed = derive_seed(config.grpo.seed, to_string(stage));

    StageReport report;
    report.stage = stage;
    report.ref_hash = policy_param_hash(policy);
    report.train_size = working.size();

    if (config.lora_rank > 0) {
      Rng lora_rng(derive_seed(stage_cfg.seed, "lora"));
      policy = apply_lora(policy, config.lora_rank, config.lora_targets, lora_rng);
    }
    report.log = run_stage(policy, working, stage, codec, sids, config.reward, stage_cfg);
    if (config.lora_rank > 0) policy = merge_lora(policy);

    // Every stage is scored under the deployment condition (mixed contexts)
    // so the numbers are comparable across stage boundaries.
    const auto evals =
        build_eval_samples(policy, corpus, held_out, Stage::NegPlusPos, sids, config.eval_k,
                           nullptr, config.grpo.max_context_events);
    report.held_out_fhr = fhr_at_k(evals, sids);
    result.stages.push_back(std::move(report));

    if (!last) {
      // The stage's model flags samples whose predictions crowd the user's
      // future positives; flagged samples are duplicated for the next stage.
      std::vector<std::vector<SemanticId>> predictions;
      predictions.reserve(working.size());
      for (const TrainingSample& s : working) {
        const auto ctx = serialize_context(s.contexts[static_cast<std::size_t>(stage)], stage,
                                           policy.vocab, sids, config.grpo.max_context_events);
        std::vector<SemanticId> preds;
        for (const BeamResult& r : beam_search(policy, ctx, config.augment_beam_width)) {
          preds.push_back(r.sid);
        }
        predictions.push_back(std::move(preds));
      }
      const auto flagged = flag_augmentation_candidates(working, predictions, codec, sids,
                                                        config.augment_threshold);
      std::vector<TrainingSample> duplicates;
      duplicates.reserve(flagged.size());
      for (std::size_t idx : flagged) duplicates.push_back(working[idx]);
      working.insert(working.end(), duplicates.begin(), duplicates.end());
    }
  }
  return result;
}

std::uint64_t policy_param_hash(Policy& policy) {
  std::vector<double> values;
  policy.visit_params(
      [&](double* w, double*, std::size_t n) { values.insert(values.end(), w, w + n); });
  return hash_bytes(values.data(), values.size() * sizeof(double));
}

}  // namespace negrec
