#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "storyhead/common.hpp"

namespace storyhead {

// Subword vocabulary with WordPiece conventions: word-internal pieces carry
// a "##" continuation marker, ids are dense, reserved tokens come first.
class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;
  static constexpr int kBosId = 2;
  static constexpr int kEosId = 3;
  static constexpr int kNumReserved = 4;
  static constexpr const char* kContinuation = "##";

  static const std::vector<std::string>& reserved_pieces() {
    static const std::vector<std::string> r = {"[PAD]", "[UNK]", "[BOS]", "[EOS]"};
    return r;
  }

  static Vocabulary from_pieces(std::vector<std::string> pieces) {
    Vocabulary v;
    if (pieces.size() < kNumReserved) throw DataError("vocab: missing reserved tokens");
    for (int i = 0; i < kNumReserved; ++i) {
      if (pieces[static_cast<std::size_t>(i)] != reserved_pieces()[static_cast<std::size_t>(i)]) {
        throw DataError("vocab: reserved token mismatch at id " + std::to_string(i) + ": '" +
                        pieces[static_cast<std::size_t>(i)] + "'");
      }
    }
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      if (pieces[i].empty()) throw DataError("vocab: empty piece at id " + std::to_string(i));
      if (v.ids_.count(pieces[i])) throw DataError("vocab: duplicate piece '" + pieces[i] + "'");
      v.ids_.emplace(pieces[i], static_cast<int>(i));
    }
    v.pieces_ = std::move(pieces);
    return v;
  }

  int size() const { return static_cast<int>(pieces_.size()); }

  const std::string& piece(int id) const {
    if (id < 0 || id >= size()) {
      throw DataError("vocab: id " + std::to_string(id) + " out of range (size " + std::to_string(size()) + ")");
    }
    return pieces_[static_cast<std::size_t>(id)];
  }

  int id_of(std::string_view piece) const {
    auto it = ids_.find(std::string(piece));
    return it == ids_.end() ? -1 : it->second;
  }

  bool contains(std::string_view piece) const { return id_of(piece) >= 0; }

  // One piece per line, line number = id; bit-exact across platforms.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("vocab: cannot open '" + path + "' for writing");
    for (const std::string& p : pieces_) out << p << '\n';
    if (!out) throw DataError("vocab: write failed for '" + path + "'");
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("vocab: cannot open '" + path + "'");
    std::vector<std::string> pieces;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      pieces.push_back(line);
    }
    return from_pieces(std::move(pieces));
  }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> ids_;
};

namespace detail {

inline std::vector<std::string> word_to_char_pieces(const std::string& word) {
  std::vector<std::string> pieces;
  for (std::size_t i = 0; i < word.size(); ++i) {
    std::string p = i == 0 ? std::string() : std::string(Vocabulary::kContinuation);
    p.push_back(word[i]);
    pieces.push_back(std::move(p));
  }
  return pieces;
}

}  // namespace detail

// Deterministic vocabulary construction: frequency-ranked adjacent pair
// merges over lowercased whitespace words, emitting WordPiece-convention
// pieces. Every character seen at least min_frequency times contributes
// both its word-initial and continuation form. Pair ties break toward the
// lexicographically smallest pair.
inline Vocabulary build_vocab(const std::string& corpus_text, int target_size, int min_frequency = 2) {
  std::map<std::string, long long> word_counts;
  for (const std::string& w : split_whitespace(to_lower(corpus_text))) word_counts[w] += 1;
  if (word_counts.empty()) throw DataError("build_vocab: empty corpus");
  if (min_frequency < 1) min_frequency = 1;

  std::map<char, long long> char_counts;
  for (const auto& [word, count] : word_counts) {
    for (char c : word) char_counts[c] += count;
  }
  std::vector<std::string> char_pieces;
  for (const auto& [c, count] : char_counts) {
    if (count < min_frequency) continue;
    char_pieces.emplace_back(1, c);
    char_pieces.push_back(std::string(Vocabulary::kContinuation) + c);
  }
  const int required = Vocabulary::kNumReserved + static_cast<int>(char_pieces.size());
  if (target_size < required) {
    throw DataError("build_vocab: target size " + std::to_string(target_size) + " below " +
                    std::to_string(required) + " (reserved tokens + character pieces)");
  }

  std::vector<std::string> pieces = Vocabulary::reserved_pieces();
  pieces.insert(pieces.end(), char_pieces.begin(), char_pieces.end());
  std::map<std::string, bool> in_vocab;
  for (const std::string& p : pieces) in_vocab[p] = true;

  // Word representations over current pieces; words containing filtered
  // characters are left out of merge training.
  std::vector<std::pair<std::vector<std::string>, long long>> reps;
  for (const auto& [word, count] : word_counts) {
    auto rep = detail::word_to_char_pieces(word);
    bool usable = true;
    for (const std::string& p : rep) usable = usable && in_vocab.count(p) > 0;
    if (usable) reps.emplace_back(std::move(rep), count);
  }

  const long long merge_threshold = std::max<long long>(min_frequency, 2);
  while (static_cast<int>(pieces.size()) < target_size) {
    std::map<std::pair<std::string, std::string>, long long> pair_counts;
    for (const auto& [rep, count] : reps) {
      for (std::size_t i = 0; i + 1 < rep.size(); ++i) {
        pair_counts[{rep[i], rep[i + 1]}] += count;
      }
    }
    const std::pair<std::string, std::string>* best = nullptr;
    long long best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {  // map order makes ties pick the smallest pair
        best = &pair;
        best_count = count;
      }
    }
    if (!best || best_count < merge_threshold) break;

    const std::string left = best->first;
    const std::string right = best->second;
    const std::string merged = left + right.substr(std::string(Vocabulary::kContinuation).size());
    for (auto& [rep, count] : reps) {
      std::vector<std::string> next;
      next.reserve(rep.size());
      for (std::size_t i = 0; i < rep.size(); ++i) {
        if (i + 1 < rep.size() && rep[i] == left && rep[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(rep[i]);
        }
      }
      rep = std::move(next);
    }
    if (!in_vocab.count(merged)) {
      pieces.push_back(merged);
      in_vocab[merged] = true;
    }
  }
  return Vocabulary::from_pieces(std::move(pieces));
}

inline Vocabulary build_vocab(std::istream& corpus, int target_size, int min_frequency = 2) {
  std::ostringstream buf;
  buf << corpus.rdbuf();
  return build_vocab(buf.str(), target_size, min_frequency);
}

// Greedy longest-match encoding of lowercased whitespace words. Unmatched
// residue of a word becomes a single UNK. Output is truncated to
// max_tokens; pass a negative max_tokens for no limit.
inline std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, int max_tokens) {
  std::vector<int> ids;
  const std::string lowered = to_lower(text);
  for (const std::string& word : split_whitespace(lowered)) {
    std::size_t pos = 0;
    while (pos < word.size()) {
      if (max_tokens >= 0 && static_cast<int>(ids.size()) >= max_tokens) return ids;
      int matched = -1;
      std::size_t matched_len = 0;
      for (std::size_t len = word.size() - pos; len >= 1; --len) {
        std::string candidate = pos == 0 ? "" : Vocabulary::kContinuation;
        candidate += word.substr(pos, len);
        const int id = vocab.id_of(candidate);
        if (id >= 0) {
          matched = id;
          matched_len = len;
          break;
        }
      }
      if (matched < 0) {
        ids.push_back(Vocabulary::kUnkId);
        break;  // the rest of this word is the unmatched residue
      }
      ids.push_back(matched);
      pos += matched_len;
    }
    if (max_tokens >= 0 && static_cast<int>(ids.size()) >= max_tokens) return ids;
  }
  return ids;
}

// Inverse of tokenize for representable text: strips continuation markers,
// joins words with single spaces, drops PAD/BOS/EOS, keeps the UNK marker.
inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> words;
  for (int id : ids) {
    const std::string& p = vocab.piece(id);  // validates the id
    if (id == Vocabulary::kPadId || id == Vocabulary::kBosId || id == Vocabulary::kEosId) continue;
    const std::string marker = Vocabulary::kContinuation;
    if (p.rfind(marker, 0) == 0 && !words.empty()) {
      words.back() += p.substr(marker.size());
    } else {
      words.push_back(p);
    }
  }
  return join(words);
}

}  // namespace storyhead
