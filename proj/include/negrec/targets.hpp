// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "negrec/codec.hpp"
#include "negrec/corpus.hpp"
#include "negrec/swing.hpp"
#include "negrec/types.hpp"

namespace negrec {

// Curriculum stages: context grows from the last few days of negative
// feedback to the full negative history to negatives plus positives.
enum class Stage { Neg3Day = 0, NegFull = 1, NegPlusPos = 2 };
inline constexpr int kNumStages = 3;
inline constexpr std::array<Stage, kNumStages> kAllStages = {
    Stage::Neg3Day, Stage::NegFull, Stage::NegPlusPos};

std::string to_string(Stage stage);
Stage stage_from_string(const std::string& name);

// The user's history as seen by a given stage: events strictly before
// as_of_day, restricted to the stage's polarity/window rules, in time order.
std::vector<InteractionEvent> stage_context(const Corpus& corpus, UserId user,
                                            int as_of_day, Stage stage,
                                            int recent_window_days = 3);

// One training/eval sample anchored at (user, as_of_day). All item sets are
// sorted ascending; future sets cover [as_of_day, as_of_day + horizon).
struct TrainingSample {
  UserId user = 0;
  int as_of_day = 0;
  std::optional<ItemId> next_negative;  // earliest negative at day >= as_of_day
  std::vector<ItemId> gts;              // distinct negatives in the horizon
  std::vector<ItemId> gts_expanded;     // gts plus collaborative neighbors
  std::vector<ItemId> fps;              // distinct positives in the horizon
  std::array<std::vector<InteractionEvent>, kNumStages> contexts;

  bool operator==(const TrainingSample&) const = default;
};

// Earliest negative-feedback item at day >= as_of_day in corpus event order;
// same-day ties resolve to the earlier event.
std::optional<ItemId> next_negative(const Corpus& corpus, UserId user, int as_of_day);

// Distinct items the user gave negative feedback in [as_of_day,
// as_of_day + horizon), sorted ascending.
std::vector<ItemId> future_negative_set(const Corpus& corpus, UserId user, int as_of_day,
                                        int horizon = 7);

// Same window, polarity in {Click, Favorite, Purchase}.
std::vector<ItemId> future_positive_set(const Corpus& corpus, UserId user, int as_of_day,
                                        int horizon = 7);

// gts plus the top-per_item_m collaborative neighbors of each gts member.
// Neighbors that appear in `fps` are never added (gts members always stay,
// whatever their fps status). Result sorted ascending.
std::vector<ItemId> expand_with_swing(std::span<const ItemId> gts, const SwingIndex& index,
                                      int per_item_m, std::span<const ItemId> fps = {});

struct TargetConfig {
  int horizon = 7;        // future window in days
  int per_item_m = 3;     // collaborative neighbors added per gts member
  int recent_window = 3;  // days of history for the first curriculum stage
  int min_day = 1;        // earliest as_of_day to consider

  void validate() const;
};

// One sample per (user, as_of_day) with a nonempty full-negative-history
// context and a nonempty future negative set, in (day, user) order.
std::vector<TrainingSample> build_training_samples(const Corpus& corpus,
                                                   const SwingIndex& index,
                                                   const TargetConfig& cfg);

// JSON-lines persistence; load(save(x)) == x.
void save_samples_jsonl(std::span<const TrainingSample> samples, const std::string& path);
std::vector<TrainingSample> load_samples_jsonl(const std::string& path);

// Cosine similarity with zero vectors mapping to 0.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Indices (ascending) of samples where any predicted id's codebook embedding
// has cosine similarity >= sim_threshold to any of the sample's future
// positive items (embedded through their assigned ids). Samples with no
// predictions or an empty fps are never flagged.
std::vector<std::size_t> flag_augmentation_candidates(
    std::span<const TrainingSample> samples,
    std::span<const std::vector<SemanticId>> predictions, const Codec& codec,
    const SidAssignment& sids, double sim_threshold);

}  // namespace negrec
