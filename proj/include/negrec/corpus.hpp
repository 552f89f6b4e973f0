// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "negrec/types.hpp"

namespace negrec {

// Token names used by the TSV/JSON artifacts ("neg", "click", ...).
const char* to_string(Polarity p);
const char* to_string(Reason r);
std::string to_string(const SemanticId& sid);  // codes joined with '-'
Polarity polarity_from_string(const std::string& s);   // throws on unknown token
Reason reason_from_string(const std::string& s);       // throws on unknown token

struct ItemDescriptor {
  ItemId item = 0;
  int category = 0;
  std::vector<double> features;  // dimension d_feat, finite
};

// Time-ordered interaction log plus the catalogs it references. Events are
// sorted by (day, stable input order); immutable after construction.
struct Corpus {
  std::vector<InteractionEvent> events;
  std::vector<ItemDescriptor> items;  // sorted by item id
  std::vector<UserId> users;
  int num_days = 0;

  const ItemDescriptor* find_item(ItemId id) const;
  const ItemDescriptor& item_at(ItemId id) const;  // throws on unknown id
  std::size_t d_feat() const { return items.empty() ? 0 : items.front().features.size(); }

  void validate() const;  // day ordering, reference integrity, reason rules
};

struct SynthConfig {
  int num_users = 50;
  int num_items = 200;
  int num_categories = 8;
  int num_days = 60;
  int d_feat = 32;
  double neg_rate = 0.8;   // expected NegativeFeedback events per user-day
  double pos_rate = 4.0;   // expected positive events per user-day
  int exposures_per_day = 25;
  double interest_sharpness = 6.0;  // concentration of planted category affinity
  double feature_noise = 0.25;      // item feature spread around its category centroid
  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument with a diagnostic
};

// Planted per-user interest structure, exposed so tests and the end-to-end
// suppression check can measure recovery of what the generator buried.
struct PlantedInterests {
  std::vector<std::vector<int>> disliked_categories;  // per user, 1..4 entries
  std::vector<std::vector<int>> liked_categories;     // per user, 1..4 entries
};

struct SynthCorpus {
  Corpus corpus;
  PlantedInterests planted;
};

// Deterministic function of the config. Item features are category centroid
// plus Gaussian noise so feature geometry encodes the category hierarchy;
// negative/positive event categories are drawn with sharpness-weighted
// affinity toward the user's planted interests; exposures are emitted
// uniformly so same-day distractor sampling is well defined.
SynthCorpus generate_synthetic_corpus(const SynthConfig& cfg);

// Appendix-style reason cleaning: keeps every non-negative event and only
// the negative events whose reason reflects user interest.
std::vector<InteractionEvent> filter_by_reason(const std::vector<InteractionEvent>& events);

Corpus filtered_by_reason(const Corpus& corpus);

enum class PolarityFilter { All, Negative, Positive, Exposure, Feedback };
// Feedback = negative or positive feedback, i.e. everything except exposures.

constexpr int kUnboundedWindow = -1;

// Events of `user` strictly before `as_of_day`, within the trailing window
// of `window_days` days (kUnboundedWindow for the full history), matching
// the polarity filter, in time order. Unknown users yield an empty list.
std::vector<InteractionEvent> user_history(const Corpus& corpus, UserId user, int as_of_day,
                                           int window_days, PolarityFilter filter);

// Contiguous day-bounded view over a corpus's event array.
struct CorpusSlice {
  const Corpus* corpus = nullptr;
  std::size_t begin = 0;
  std::size_t end = 0;
  int day_begin = 0;
  int day_end = 0;  // exclusive, clamped to corpus range

  std::span<const InteractionEvent> events() const {
    return std::span<const InteractionEvent>(corpus->events).subspan(begin, end - begin);
  }
};

struct TemporalSplit {
  CorpusSlice train;  // day < train_end_day
  CorpusSlice eval;   // day in [train_end_day, train_end_day + horizon), clamped
};

TemporalSplit temporal_split(const Corpus& corpus, int train_end_day, int horizon_days = 7);

// External interfaces: plain-text tab-separated catalogs.
//   events.tsv: user<TAB>item<TAB>polarity<TAB>reason<TAB>day
//   items.tsv:  item<TAB>category<TAB>f0<TAB>...<TAB>f{d_feat-1}
void save_events_tsv(const Corpus& corpus, const std::filesystem::path& path);
void save_items_tsv(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus_tsv(const std::filesystem::path& events_path,
                       const std::filesystem::path& items_path);

}  // namespace negrec
