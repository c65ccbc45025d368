#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kgctx/io.hpp"

namespace kgctx {

using TokenId = std::int32_t;

/// Byte-fallback BPE vocabulary.
///
/// Ids 0..2 are the specials (pad, end-of-sequence, begin-of-decode), ids
/// 3..258 are the 256 single bytes, and every later id is a learned merge.
/// Text gets one leading space before encoding (removed again by decode), so
/// a word encodes the same at the start of a text as after a space. It is
/// then pre-split into chunks of the form ` *[^ ]*` (leading spaces attach to
/// the following word) and merges never cross a chunk boundary.
class SubwordVocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kFirstByte = 3;
  static constexpr std::size_t kBaseSize = 259;

  SubwordVocab() {
    pieces_.resize(kBaseSize);
    scores_.assign(kBaseSize, 0.0);
    for (int b = 0; b < 256; ++b) pieces_[kFirstByte + b] = std::string(1, static_cast<char>(b));
  }

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(TokenId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  double score(TokenId id) const { return scores_.at(static_cast<std::size_t>(id)); }
  static bool is_special(TokenId id) { return id >= 0 && id < kFirstByte; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    if (text.empty()) return out;
    encode_chunks(" " + std::string(text), out);
    return out;
  }

  std::size_t count(std::string_view text) const { return encode(text).size(); }

  /// Tokens that `text` adds when appended to a non-empty text. Exact when
  /// `text` starts with a space: then count(a + text) == count(a) +
  /// count_continuation(text).
  std::size_t count_continuation(std::string_view text) const {
    std::vector<TokenId> out;
    encode_chunks(text, out);
    return out.size();
  }

  /// Concatenates piece bytes and drops the leading space added by encode.
  /// Stops at end-of-sequence; pad and begin-of-decode are skipped.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
        throw Error("token id " + std::to_string(id) + " out of range");
      }
      if (id == kEos) break;
      if (is_special(id)) continue;
      out += pieces_[static_cast<std::size_t>(id)];
    }
    if (!out.empty() && out[0] == ' ') out.erase(0, 1);
    return out;
  }

  /// Versioned text form: header, then one line per piece (`hex<TAB>score`);
  /// specials are written by name.
  std::string serialize() const {
    std::string out = "KGCTX-VOCAB v1\n";
    out += "<pad>\t0\n<eos>\t0\n<bos>\t0\n";
    static constexpr char digits[] = "0123456789abcdef";
    for (std::size_t id = kFirstByte; id < pieces_.size(); ++id) {
      for (unsigned char c : pieces_[id]) {
        out += digits[c >> 4];
        out += digits[c & 0xf];
      }
      out += '\t';
      out += std::to_string(static_cast<long long>(scores_[id]));
      out += '\n';
    }
    return out;
  }

  static SubwordVocab deserialize(std::string_view text) {
    auto lines = split(text, '\n');
    if (lines.empty() || trim(lines[0]) != "KGCTX-VOCAB v1") {
      throw Error("not a KGCTX-VOCAB v1 file");
    }
    SubwordVocab v;
    v.pieces_.clear();
    v.scores_.clear();
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      auto fields = split(lines[i], '\t');
      if (fields.size() != 2) throw ParseError("<vocab>", i + 1, "expected hex<TAB>score");
      const auto id = v.pieces_.size();
      std::string bytes;
      if (id < kFirstByte) {
        static constexpr std::string_view names[] = {"<pad>", "<eos>", "<bos>"};
        if (fields[0] != names[id]) throw ParseError("<vocab>", i + 1, "expected special piece");
      } else {
        if (fields[0].size() % 2 != 0 || fields[0].empty()) {
          throw ParseError("<vocab>", i + 1, "bad hex piece");
        }
        for (std::size_t k = 0; k < fields[0].size(); k += 2) {
          bytes += static_cast<char>(std::stoi(std::string(fields[0].substr(k, 2)), nullptr, 16));
        }
      }
      v.pieces_.push_back(std::move(bytes));
      v.scores_.push_back(std::stod(std::string(fields[1])));
    }
    if (v.pieces_.size() < kBaseSize) throw Error("vocab truncated: fewer than 259 pieces");
    for (int b = 0; b < 256; ++b) {
      if (v.pieces_[kFirstByte + b] != std::string(1, static_cast<char>(b))) {
        throw Error("vocab byte pieces out of order");
      }
    }
    v.rebuild_index();
    return v;
  }

  /// Learns merges greedily by pair frequency until the vocabulary reaches
  /// vocab_size or no pair occurs at least twice. Deterministic.
  template <typename Corpus>
  static SubwordVocab train(const Corpus& corpus, std::size_t vocab_size) {
    if (vocab_size < kBaseSize) throw Error("vocab_size must be at least 259");
    std::unordered_map<std::string, std::size_t> chunk_counts;
    bool any = false;
    for (const auto& line : corpus) {
      std::string_view text(line);
      if (text.empty()) continue;
      any = true;
      const std::string prefixed = " " + std::string(text);
      for_each_chunk(prefixed, [&](std::string_view c) { ++chunk_counts[std::string(c)]; });
    }
    if (!any) throw Error("cannot train a tokenizer on an empty corpus");

    std::vector<std::pair<std::string, std::size_t>> sorted(chunk_counts.begin(), chunk_counts.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::vector<TokenId>> words;
    std::vector<std::size_t> freqs;
    for (const auto& [chunk, count] : sorted) {
      std::vector<TokenId> w;
      for (unsigned char c : chunk) w.push_back(kFirstByte + c);
      words.push_back(std::move(w));
      freqs.push_back(count);
    }

    SubwordVocab v;
    std::size_t rank = 0;
    while (v.pieces_.size() < vocab_size) {
      std::map<std::pair<TokenId, TokenId>, std::size_t> pairs;
      for (std::size_t i = 0; i < words.size(); ++i) {
        const auto& w = words[i];
        for (std::size_t j = 0; j + 1 < w.size(); ++j) pairs[{w[j], w[j + 1]}] += freqs[i];
      }
      std::pair<TokenId, TokenId> best{};
      std::size_t best_count = 0;
      for (const auto& [p, c] : pairs) {
        if (c > best_count) {
          best = p;
          best_count = c;
        }
      }
      if (best_count < 2) break;
      std::string bytes = v.pieces_[best.first] + v.pieces_[best.second];
      TokenId merged;
      if (auto it = v.index_.find(bytes); it != v.index_.end()) {
        merged = it->second;
      } else {
        merged = static_cast<TokenId>(v.pieces_.size());
        v.pieces_.push_back(bytes);
        v.scores_.push_back(-static_cast<double>(++rank));
        v.index_.emplace(std::move(bytes), merged);
      }
      for (auto& w : words) {
        std::size_t out = 0;
        for (std::size_t j = 0; j < w.size(); ++j) {
          if (j + 1 < w.size() && w[j] == best.first && w[j + 1] == best.second) {
            w[out++] = merged;
            ++j;
          } else {
            w[out++] = w[j];
          }
        }
        w.resize(out);
      }
    }
    return v;
  }

  template <typename Fn>
  static void for_each_chunk(std::string_view text, Fn&& fn) {
    std::size_t start = 0;
    for (std::size_t i = 1; i < text.size(); ++i) {
      if (text[i] == ' ' && text[i - 1] != ' ') {
        fn(text.substr(start, i - start));
        start = i;
      }
    }
    if (start < text.size()) fn(text.substr(start));
  }

 private:
  void encode_chunks(std::string_view text, std::vector<TokenId>& out) const {
    for_each_chunk(text, [&](std::string_view chunk) { encode_chunk(chunk, out); });
  }

  void rebuild_index() {
    index_.clear();
    for (std::size_t id = kBaseSize; id < pieces_.size(); ++id) {
      index_.emplace(pieces_[id], static_cast<TokenId>(id));
    }
  }

  // Repeatedly applies the best-scoring merge available among adjacent
  // symbols. Scores decrease with learning order, so this replays training.
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
    std::vector<TokenId> sym;
    sym.reserve(chunk.size());
    for (unsigned char c : chunk) sym.push_back(kFirstByte + c);
    std::string buf;
    while (sym.size() > 1) {
      TokenId best_id = -1;
      std::size_t best_pos = 0;
      for (std::size_t j = 0; j + 1 < sym.size(); ++j) {
        buf = pieces_[sym[j]];
        buf += pieces_[sym[j + 1]];
        auto it = index_.find(buf);
        if (it == index_.end()) continue;
        if (best_id < 0 || scores_[it->second] > scores_[best_id]) {
          best_id = it->second;
          best_pos = j;
        }
      }
      if (best_id < 0) break;
      sym[best_pos] = best_id;
      sym.erase(sym.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
    out.insert(out.end(), sym.begin(), sym.end());
  }

  std::vector<std::string> pieces_;
  std::vector<double> scores_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace kgctx
