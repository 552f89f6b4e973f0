// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Offline metrics for the generator: hit ratios against the next negative
// (HR@K) and the 7-day future negative set (FHR@K), their long-tail strata
// (LUF/LIF), the 20-way candidate-ranking accuracy, and the forgetting rate.
// Hits are id-level: any item sharing an id with a prediction counts.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "negrec/codec.hpp"
#include "negrec/corpus.hpp"
#include "negrec/policy.hpp"
#include "negrec/targets.hpp"
#include "negrec/types.hpp"

namespace negrec {

// Long-tail thresholds: users with fewer than 3 historical negatives (LUF)
// and ground-truth items with fewer than 5 historical negatives (LIF), both
// counted strictly before the sample's as-of day.
inline constexpr int kColdUserNegThreshold = 3;
inline constexpr int kLongTailItemNegThreshold = 5;

struct EvalSample {
  UserId user = 0;
  int as_of_day = 0;
  std::vector<SemanticId> predict_set;   // beam output, at most K ids
  std::optional<ItemId> next_negative;   // earliest upcoming negative
  std::vector<ItemId> future_negatives;  // distinct negatives in the horizon
  int user_neg_count = 0;                // user's negatives strictly before as_of_day
  std::map<ItemId, int> item_neg_counts; // all-user counts for future_negatives

  bool operator==(const EvalSample&) const = default;
};

// Runs a width-K beam per sample on its stage context and fills in the
// historical counts from the corpus. Pass a trie to restrict predictions to
// assigned ids; free decoding is the default.
std::vector<EvalSample> build_eval_samples(const Policy& policy, const Corpus& corpus,
                                           std::span<const TrainingSample> samples, Stage stage,
                                           const SidAssignment& sids, int k,
                                           const SidTrie* trie = nullptr,
                                           int max_events = kDefaultMaxContextEvents);

// Each metric averages over its eligible samples and reports nullopt when no
// sample is eligible. Eligibility: a defined next negative for HR; a nonempty
// future negative set for FHR/LUF/LIF (LUF further restricts to cold users).
std::optional<double> hr_at_k(std::span<const EvalSample> samples, const SidAssignment& sids);
std::optional<double> fhr_at_k(std::span<const EvalSample> samples, const SidAssignment& sids);
std::optional<double> luf_at_k(std::span<const EvalSample> samples, const SidAssignment& sids);
std::optional<double> lif_at_k(std::span<const EvalSample> samples, const SidAssignment& sids);

// One 20-way ranking task: the day's first negative among 19 same-day
// exposure distractors, scored against the user's strictly-prior mixed
// context. Days without 19 distinct other exposed items are skipped.
struct CandidateTask {
  UserId user = 0;
  int day = 0;
  std::vector<int> context;            // serialized NegPlusPos tokens
  std::vector<SemanticId> candidates;  // exactly kNumCandidates
  int answer = 0;                      // index of the true negative

  bool operator==(const CandidateTask&) const = default;
};

inline constexpr int kNumCandidates = 20;

std::vector<CandidateTask> build_candidate_tasks(const Corpus& corpus, const SidAssignment& sids,
                                                 const TokenVocab& vocab, int max_tasks,
                                                 std::uint64_t seed,
                                                 int max_events = kDefaultMaxContextEvents);

// Fraction of tasks whose highest-scoring candidate is the true negative,
// ties broken toward the lowest candidate index.
using CandidateScorer = std::function<std::vector<double>(const CandidateTask&)>;
double candidate_accuracy(const CandidateScorer& scorer, std::span<const CandidateTask> tasks);
double candidate_accuracy(const Policy& policy, std::span<const CandidateTask> tasks);

// (before - after) / before, clamped below at zero; before must be positive.
double forgetting_rate(double acc_before, double acc_after);

}  // namespace negrec
