// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/targets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace negrec {

using nlohmann::json;

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Neg3Day: return "neg_3day";
    case Stage::NegFull: return "neg_full";
    case Stage::NegPlusPos: return "neg_plus_pos";
  }
  return "?";
}

Stage stage_from_string(const std::string& name) {
  for (const Stage stage : kAllStages) {
    if (name == to_string(stage)) return stage;
  }
  throw std::invalid_argument("unknown stage token: '" + name + "'");
}

std::vector<InteractionEvent> stage_context(const Corpus& corpus, UserId user,
                                            int as_of_day, Stage stage,
                                            int recent_window_days) {
  switch (stage) {
    case Stage::Neg3Day:
      return user_history(corpus, user, as_of_day, recent_window_days,
                          PolarityFilter::Negative);
    case Stage::NegFull:
      return user_history(corpus, user, as_of_day, kUnboundedWindow,
                          PolarityFilter::Negative);
    case Stage::NegPlusPos:
      return user_history(corpus, user, as_of_day, kUnboundedWindow,
                          PolarityFilter::Feedback);
  }
  throw std::invalid_argument("stage_context: bad stage");
}

std::optional<ItemId> next_negative(const Corpus& corpus, UserId user, int as_of_day) {
  // Events are day-sorted with stable within-day order, so the first match
  // in a forward scan is the earliest.
  for (const InteractionEvent& e : corpus.events) {
    if (e.user == user && e.day >= as_of_day &&
        e.polarity == Polarity::NegativeFeedback) {
      return e.item;
    }
  }
  return std::nullopt;
}

namespace {

std::vector<ItemId> future_items(const Corpus& corpus, UserId user, int as_of_day,
                                 int horizon, bool negative) {
  if (horizon < 1) throw std::invalid_argument("future window: horizon must be >= 1");
  std::set<ItemId> out;
  for (const InteractionEvent& e : corpus.events) {
    if (e.day >= as_of_day + horizon) break;  // day-sorted
    if (e.user != user || e.day < as_of_day) continue;
    const bool wanted =
        negative ? e.polarity == Polarity::NegativeFeedback : is_positive(e.polarity);
    if (wanted) out.insert(e.item);
  }
  return std::vector<ItemId>(out.begin(), out.end());
}

}  // namespace

std::vector<ItemId> future_negative_set(const Corpus& corpus, UserId user, int as_of_day,
                                        int horizon) {
  return future_items(corpus, user, as_of_day, horizon, /*negative=*/true);
}

std::vector<ItemId> future_positive_set(const Corpus& corpus, UserId user, int as_of_day,
                                        int horizon) {
  return future_items(corpus, user, as_of_day, horizon, /*negative=*/false);
}

std::vector<ItemId> expand_with_swing(std::span<const ItemId> gts, const SwingIndex& index,
                                      int per_item_m, std::span<const ItemId> fps) {
  if (per_item_m < 0) {
    throw std::invalid_argument("expand_with_swing: per_item_m must be >= 0");
  }
  std::set<ItemId> out(gts.begin(), gts.end());
  const std::set<ItemId> excluded(fps.begin(), fps.end());
  for (const ItemId g : gts) {
    for (const SwingNeighbor& n : top_collaborative(index, g, per_item_m)) {
      if (!excluded.count(n.item)) out.insert(n.item);
    }
  }
  return std::vector<ItemId>(out.begin(), out.end());
}

void TargetConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("TargetConfig: horizon must be >= 1");
  if (per_item_m < 0) throw std::invalid_argument("TargetConfig: per_item_m must be >= 0");
  if (recent_window < 1) {
    throw std::invalid_argument("TargetConfig: recent_window must be >= 1");
  }
  if (min_day < 0) throw std::invalid_argument("TargetConfig: min_day must be >= 0");
}

std::vector<TrainingSample> build_training_samples(const Corpus& corpus,
                                                   const SwingIndex& index,
                                                   const TargetConfig& cfg) {
  cfg.validate();
  std::vector<TrainingSample> samples;
  for (int day = cfg.min_day; day < corpus.num_days; ++day) {
    for (const UserId user : corpus.users) {
      TrainingSample s;
      s.user = user;
      s.as_of_day = day;
      for (const Stage stage : kAllStages) {
        s.contexts[static_cast<int>(stage)] =
            stage_context(corpus, user, day, stage, cfg.recent_window);
      }
      // Eligibility: the policy needs some negative history to condition on
      // and at least one future negative to aim at.
      if (s.contexts[static_cast<int>(Stage::NegFull)].empty()) continue;
      s.gts = future_negative_set(corpus, user, day, cfg.horizon);
      if (s.gts.empty()) continue;
      s.fps = future_positive_set(corpus, user, day, cfg.horizon);
      s.gts_expanded = expand_with_swing(s.gts, index, cfg.per_item_m, s.fps);
      s.next_negative = next_negative(corpus, user, day);
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

namespace {

json context_to_json(const std::vector<InteractionEvent>& events) {
  json arr = json::array();
  for (const InteractionEvent& e : events) {
    arr.push_back({e.item, to_string(e.polarity), to_string(e.reason), e.day});
  }
  return arr;
}

std::vector<InteractionEvent> context_from_json(const json& arr, UserId user) {
  std::vector<InteractionEvent> events;
  for (const json& row : arr) {
    InteractionEvent e;
    e.user = user;
    e.item = row.at(0).get<ItemId>();
    e.polarity = polarity_from_string(row.at(1).get<std::string>());
    e.reason = reason_from_string(row.at(2).get<std::string>());
    e.day = row.at(3).get<int>();
    events.push_back(e);
  }
  return events;
}

}  // namespace

void save_samples_jsonl(std::span<const TrainingSample> samples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_samples_jsonl: cannot open " + path);
  for (const TrainingSample& s : samples) {
    json row;
    row["user"] = s.user;
    row["as_of_day"] = s.as_of_day;
    if (s.next_negative) {
      row["next_negative"] = *s.next_negative;
    } else {
      row["next_negative"] = nullptr;
    }
    row["gts"] = s.gts;
    row["gts_expanded"] = s.gts_expanded;
    row["fps"] = s.fps;
    json contexts;
    for (const Stage stage : kAllStages) {
      contexts[to_string(stage)] = context_to_json(s.contexts[static_cast<int>(stage)]);
    }
    row["contexts"] = contexts;
    out << row.dump() << '\n';
  }
  if (!out) throw std::runtime_error("save_samples_jsonl: write failed for " + path);
}

std::vector<TrainingSample> load_samples_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_samples_jsonl: cannot open " + path);
  std::vector<TrainingSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error& err) {
      throw std::runtime_error("load_samples_jsonl: bad JSON at line " +
                               std::to_string(line_no) + ": " + err.what());
    }
    TrainingSample s;
    s.user = row.at("user").get<UserId>();
    s.as_of_day = row.at("as_of_day").get<int>();
    if (!row.at("next_negative").is_null()) {
      s.next_negative = row.at("next_negative").get<ItemId>();
    }
    s.gts = row.at("gts").get<std::vector<ItemId>>();
    s.gts_expanded = row.at("gts_expanded").get<std::vector<ItemId>>();
    s.fps = row.at("fps").get<std::vector<ItemId>>();
    for (const Stage stage : kAllStages) {
      s.contexts[static_cast<int>(stage)] =
          context_from_json(row.at("contexts").at(to_string(stage)), s.user);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Augmentation flagging
// ---------------------------------------------------------------------------

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: dimension mismatch");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<std::size_t> flag_augmentation_candidates(
    std::span<const TrainingSample> samples,
    std::span<const std::vector<SemanticId>> predictions, const Codec& codec,
    const SidAssignment& sids, double sim_threshold) {
  if (samples.size() != predictions.size()) {
    throw std::invalid_argument(
        "flag_augmentation_candidates: one prediction list per sample required");
  }
  std::vector<std::size_t> flagged;
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const TrainingSample& sample = samples[n];
    if (sample.fps.empty() || predictions[n].empty()) continue;
    std::vector<std::vector<double>> fps_embeddings;
    for (const ItemId item : sample.fps) {
      fps_embeddings.push_back(reconstruct_from_sid(codec, sids.sid_of(item)));
    }
    bool hit = false;
    for (const SemanticId& sid : predictions[n]) {
      const std::vector<double> predicted = reconstruct_from_sid(codec, sid);
      for (const std::vector<double>& fps_embedding : fps_embeddings) {
        if (cosine_similarity(predicted, fps_embedding) >= sim_threshold) {
          hit = true;
          break;
        }
      }
      if (hit) break;
    }
    if (hit) flagged.push_back(n);
  }
  return flagged;
}

}  // namespace negrec
