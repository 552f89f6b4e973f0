// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/eval.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>
#include <string>

#include "negrec/rng.hpp"

namespace negrec {

namespace {

// Id-level hit test: does any prediction share the item's assigned id?
bool predicted(const std::vector<SemanticId>& predict_set, const SemanticId& sid) {
  return std::find(predict_set.begin(), predict_set.end(), sid) != predict_set.end();
}

std::optional<double> ratio(int hits, int eligible) {
  if (eligible == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

}  // namespace

std::vector<EvalSample> build_eval_samples(const Policy& policy, const Corpus& corpus,
                                           std::span<const TrainingSample> samples, Stage stage,
                                           const SidAssignment& sids, int k, const SidTrie* trie,
                                           int max_events) {
  if (k < 1) throw std::invalid_argument("build_eval_samples: k must be >= 1");
  std::vector<EvalSample> out;
  out.reserve(samples.size());
  for (const TrainingSample& s : samples) {
    EvalSample e;
    e.user = s.user;
    e.as_of_day = s.as_of_day;
    e.next_negative = s.next_negative;
    e.future_negatives = s.gts;

    const std::vector<int> context =
        serialize_context(s.contexts[static_cast<std::size_t>(stage)], stage, policy.vocab, sids,
                          max_events);
    for (const BeamResult& r : beam_search(policy, context, k, trie)) {
      e.predict_set.push_back(r.sid);
    }

    for (const InteractionEvent& ev : corpus.events) {
      if (ev.day >= s.as_of_day) break;  // events are day-ordered
      if (ev.polarity != Polarity::NegativeFeedback) continue;
      if (ev.user == s.user) ++e.user_neg_count;
      if (std::find(s.gts.begin(), s.gts.end(), ev.item) != s.gts.end()) {
        ++e.item_neg_counts[ev.item];
      }
    }
    for (ItemId item : s.gts) e.item_neg_counts.emplace(item, 0);
    out.push_back(std::move(e));
  }
  return out;
}

std::optional<double> hr_at_k(std::span<const EvalSample> samples, const SidAssignment& sids) {
  int eligible = 0, hits = 0;
  for (const EvalSample& s : samples) {
    if (!s.next_negative) continue;
    ++eligible;
    if (predicted(s.predict_set, sids.sid_of(*s.next_negative))) ++hits;
  }
  return ratio(hits, eligible);
}

std::optional<double> fhr_at_k(std::span<const EvalSample> samples, const SidAssignment& sids) {
  int eligible = 0, hits = 0;
  for (const EvalSample& s : samples) {
    if (s.future_negatives.empty()) continue;
    ++eligible;
    for (ItemId item : s.future_negatives) {
      if (predicted(s.predict_set, sids.sid_of(item))) {
        ++hits;
        break;
      }
    }
  }
  return ratio(hits, eligible);
}

std::optional<double> luf_at_k(std::span<const EvalSample> samples, const SidAssignment& sids) {
  int eligible = 0, hits = 0;
  for (const EvalSample& s : samples) {
    if (s.future_negatives.empty() || s.user_neg_count >= kColdUserNegThreshold) continue;
    ++eligible;
    for (ItemId item : s.future_negatives) {
      if (predicted(s.predict_set, sids.sid_of(item))) {
        ++hits;
        break;
      }
    }
  }
  return ratio(hits, eligible);
}

std::optional<double> lif_at_k(std::span<const EvalSample> samples, const SidAssignment& sids) {
  int eligible = 0, hits = 0;
  for (const EvalSample& s : samples) {
    if (s.future_negatives.empty()) continue;
    ++eligible;
    // Only long-tail ground-truth items can produce the hit.
    for (ItemId item : s.future_negatives) {
      const auto it = s.item_neg_counts.find(item);
      const int count = it == s.item_neg_counts.end() ? 0 : it->second;
      if (count >= kLongTailItemNegThreshold) continue;
      if (predicted(s.predict_set, sids.sid_of(item))) {
        ++hits;
        break;
      }
    }
  }
  return ratio(hits, eligible);
}

std::vector<CandidateTask> build_candidate_tasks(const Corpus& corpus, const SidAssignment& sids,
                                                 const TokenVocab& vocab, int max_tasks,
                                                 std::uint64_t seed, int max_events) {
  if (max_tasks < 1) throw std::invalid_argument("build_candidate_tasks: max_tasks must be >= 1");
  // Group the day's events per user as they stream by; events are day-ordered.
  struct DayKey {
    int day;
    UserId user;
    bool operator<(const DayKey& o) const {
      return day != o.day ? day < o.day : user < o.user;
    }
  };
  std::map<DayKey, std::vector<std::size_t>> by_user_day;
  for (std::size_t i = 0; i < corpus.events.size(); ++i) {
    const InteractionEvent& e = corpus.events[i];
    by_user_day[{e.day, e.user}].push_back(i);
  }

  Rng rng(seed);
  std::vector<CandidateTask> tasks;
  for (const auto& [key, indices] : by_user_day) {
    if (static_cast<int>(tasks.size()) >= max_tasks) break;
    std::optional<ItemId> truth;
    std::set<ItemId> exposed;
    for (std::size_t i : indices) {
      const InteractionEvent& e = corpus.events[i];
      if (e.polarity == Polarity::NegativeFeedback && !truth) truth = e.item;
      if (e.polarity == Polarity::Exposure) exposed.insert(e.item);
    }
    if (!truth) continue;
    exposed.erase(*truth);
    if (static_cast<int>(exposed.size()) < kNumCandidates - 1) continue;

    const std::vector<ItemId> pool(exposed.begin(), exposed.end());
    const auto picks = rng.sample_without_replacement(pool.size(), kNumCandidates - 1);
    std::vector<ItemId> items = {*truth};
    for (std::size_t p : picks) items.push_back(pool[p]);
    std::vector<std::size_t> perm(items.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);

    CandidateTask task;
    task.user = key.user;
    task.day = key.day;
    const std::vector<InteractionEvent> history =
        user_history(corpus, key.user, key.day, kUnboundedWindow, PolarityFilter::Feedback);
    task.context = serialize_context(history, Stage::NegPlusPos, vocab, sids, max_events);
    for (std::size_t j = 0; j < perm.size(); ++j) {
      task.candidates.push_back(sids.sid_of(items[perm[j]]));
      if (perm[j] == 0) task.answer = static_cast<int>(j);
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

double candidate_accuracy(const CandidateScorer& scorer, std::span<const CandidateTask> tasks) {
  if (tasks.empty()) throw std::invalid_argument("candidate_accuracy: no tasks");
  int hits = 0;
  for (const CandidateTask& task : tasks) {
    const std::vector<double> scores = scorer(task);
    if (scores.size() != task.candidates.size()) {
      throw std::invalid_argument("candidate_accuracy: scorer returned wrong arity");
    }
    int best = 0;
    for (std::size_t j = 1; j < scores.size(); ++j) {
      if (scores[j] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    }
    if (best == task.answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(tasks.size());
}

namespace {

double full_logprob_at(const DecodeState& state, int token) {
  const std::vector<double>& z = state.next_logits;
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  return z[static_cast<std::size_t>(token)] - mx - std::log(sum);
}

}  // namespace

double candidate_accuracy(const Policy& policy, std::span<const CandidateTask> tasks) {
  // Encode each context once and branch the key/value cache per candidate;
  // scores equal sequence_logprob (full-vocabulary normalization) exactly.
  return candidate_accuracy(
      [&](const CandidateTask& task) {
        const DecodeState enc = encode_context(policy, task.context);
        std::vector<double> scores;
        scores.reserve(task.candidates.size());
        for (const SemanticId& sid : task.candidates) {
          const std::vector<int> toks = policy.vocab.sid_tokens(sid);
          DecodeState state = enc;
          double lp = 0.0;
          for (std::size_t t = 0; t < toks.size(); ++t) {
            lp += full_logprob_at(state, toks[t]);
            if (t + 1 < toks.size()) decode_step(policy, state, toks[t]);
          }
          scores.push_back(lp);
        }
        return scores;
      },
      tasks);
}

double forgetting_rate(double acc_before, double acc_after) {
  if (!(acc_before > 0.0)) {
    throw std::invalid_argument("forgetting_rate: accuracy before must be positive");
  }
  return std::max(0.0, (acc_before - acc_after) / acc_before);
}

}  // namespace negrec
