// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace negrec {

using UserId = std::int64_t;
using ItemId = std::int64_t;

enum class Polarity : std::uint8_t {
  NegativeFeedback = 0,
  Click = 1,
  Favorite = 2,
  Purchase = 3,
  Exposure = 4,
};

// Feedback reasons attached to NegativeFeedback events. The first four are
// interest-related; the rest stem from fatigue or quality issues and are
// dropped before training.
enum class Reason : std::uint8_t {
  NotThisProduct = 0,
  NotThisCategory = 1,
  NotThisStore = 2,
  UncomfortableImage = 3,
  SeenOrPurchased = 4,
  SuspectedAI = 5,
  ClickbaitPrice = 6,
  SuspectedCounterfeit = 7,
  None = 8,
};

inline bool is_positive(Polarity p) {
  return p == Polarity::Click || p == Polarity::Favorite || p == Polarity::Purchase;
}

inline bool is_interest_reason(Reason r) {
  return r == Reason::NotThisProduct || r == Reason::NotThisCategory ||
         r == Reason::NotThisStore || r == Reason::UncomfortableImage;
}

const char* to_string(Polarity p);
const char* to_string(Reason r);
Polarity polarity_from_string(const std::string& s);
Reason reason_from_string(const std::string& s);

// One (user, item, polarity, reason, day) record; the atom of every corpus.
struct InteractionEvent {
  UserId user = 0;
  ItemId item = 0;
  Polarity polarity = Polarity::Exposure;
  Reason reason = Reason::None;
  int day = 0;

  bool operator==(const InteractionEvent&) const = default;
};

// Ordered tuple of per-level codeword indices identifying an item in
// generation space.
struct SemanticId {
  std::vector<std::uint16_t> codes;

  SemanticId() = default;
  explicit SemanticId(std::vector<std::uint16_t> c) : codes(std::move(c)) {}

  std::size_t levels() const { return codes.size(); }

  // Packs up to 4 levels of 16-bit codes into one key. Levels beyond 4 are
  // rejected; all corpora here use 3.
  std::uint64_t packed() const {
    if (codes.size() > 4) throw std::length_error("SemanticId: packed() supports <= 4 levels");
    std::uint64_t key = 0;
    for (std::size_t d = 0; d < codes.size(); ++d) {
      key |= static_cast<std::uint64_t>(codes[d]) << (16 * d);
    }
    return key;
  }

  bool operator==(const SemanticId&) const = default;
  auto operator<=>(const SemanticId&) const = default;
};

std::string to_string(const SemanticId& sid);

struct SemanticIdHash {
  std::size_t operator()(const SemanticId& sid) const {
    std::uint64_t h = 1469598103934665603ull;
    for (auto c : sid.codes) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace negrec
