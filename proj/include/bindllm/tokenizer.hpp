#pragma once

// Byte-level BPE. Ids 0..255 are raw bytes, 256 is end-of-sequence, and
// learned merges take ids 257 upward in the order they were learned. Text is
// pre-split into chunks at spaces (the space stays attached to the word that
// follows it) and at ASCII punctuation/newlines, so merges never cross words.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bindllm/error.hpp"

namespace bindllm {

class Tokenizer {
 public:
  static constexpr int kEos = 256;
  static constexpr int kFirstMerge = 257;

  Tokenizer() = default;
  Tokenizer(std::size_t vocab_size, std::vector<std::pair<int, int>> merges)
      : vocab_size_(vocab_size), merges_(std::move(merges)) {
    if (vocab_size_ < kFirstMerge) throw ConfigError("vocabulary must hold bytes and <eos>");
    if (merges_.size() > vocab_size_ - kFirstMerge) throw ConfigError("more merges than vocabulary slots");
    rebuild();
  }

  // Learns up to vocab_size - 257 merges from `corpus`. Ties on pair count
  // break toward the numerically smallest pair, so training is deterministic.
  static Tokenizer train(std::span<const std::string> corpus, std::size_t vocab_size,
                         std::size_t min_count = 2) {
    std::map<std::string, std::size_t> chunk_counts;
    for (const auto& text : corpus)
      for (auto& c : split_chunks(text)) ++chunk_counts[c];

    std::vector<std::pair<std::vector<int>, std::size_t>> words;
    for (const auto& [chunk, n] : chunk_counts) {
      std::vector<int> ids;
      for (unsigned char ch : chunk) ids.push_back(ch);
      words.emplace_back(std::move(ids), n);
    }

    std::vector<std::pair<int, int>> merges;
    while (kFirstMerge + merges.size() < vocab_size) {
      std::map<std::pair<int, int>, std::size_t> counts;
      for (const auto& [ids, n] : words)
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) counts[{ids[i], ids[i + 1]}] += n;
      std::pair<int, int> best{-1, -1};
      std::size_t best_n = 0;
      for (const auto& [pair, n] : counts) {
        if (n > best_n) {
          best = pair;
          best_n = n;
        }
      }
      if (best_n < min_count) break;
      const int id = kFirstMerge + static_cast<int>(merges.size());
      merges.push_back(best);
      for (auto& [ids, n] : words) apply_merge(ids, best, id);
    }
    return Tokenizer(vocab_size, std::move(merges));
  }

  std::size_t vocab_size() const noexcept { return vocab_size_; }
  const std::vector<std::pair<int, int>>& merges() const noexcept { return merges_; }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    for (const auto& chunk : split_chunks(text)) {
      std::vector<int> ids;
      for (unsigned char ch : chunk) ids.push_back(ch);
      while (ids.size() > 1) {
        std::size_t best_rank = merges_.size();
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
          auto it = rank_.find(key(ids[i], ids[i + 1]));
          if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == merges_.size()) break;
        apply_merge(ids, merges_[best_rank], kFirstMerge + static_cast<int>(best_rank));
      }
      out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) out += token_bytes(id);
    return out;
  }

  std::string token_bytes(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    }
    if (id < 256) return std::string(1, static_cast<char>(id));
    if (id == kEos) return {};
    const std::size_t m = static_cast<std::size_t>(id - kFirstMerge);
    if (m >= merges_.size()) return {};
    return token_bytes(merges_[m].first) + token_bytes(merges_[m].second);
  }

  nlohmann::json to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({a, b});
    return {{"vocab_size", vocab_size_}, {"merges", merges}};
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    std::vector<std::pair<int, int>> merges;
    for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<int>(), m.at(1).get<int>());
    return Tokenizer(j.at("vocab_size").get<std::size_t>(), std::move(merges));
  }

  // Vocabulary file: one merge per line, "left right", ids in decimal, after
  // a header line "bindllm-bpe <vocab_size>".
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write vocabulary file " + path);
    out << "bindllm-bpe " << vocab_size_ << '\n';
    for (const auto& [a, b] : merges_) out << a << ' ' << b << '\n';
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read vocabulary file " + path);
    std::string magic;
    std::size_t vocab = 0;
    in >> magic >> vocab;
    if (magic != "bindllm-bpe") throw FormatError(path + ": not a bindllm-bpe vocabulary file");
    std::vector<std::pair<int, int>> merges;
    int a, b;
    while (in >> a >> b) merges.emplace_back(a, b);
    return Tokenizer(vocab, std::move(merges));
  }

  static std::vector<std::string> split_chunks(std::string_view text) {
    std::vector<std::string> chunks;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) chunks.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto uc = static_cast<unsigned char>(ch);
      if (ch == ' ') {
        flush();
        cur.push_back(ch);
      } else if (uc < 128 && (std::ispunct(uc) || ch == '\n')) {
        if (cur != " ") flush();
        cur.push_back(ch);
        flush();
      } else {
        cur.push_back(ch);
      }
    }
    flush();
    return chunks;
  }

 private:
  static std::uint64_t key(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  static void apply_merge(std::vector<int>& ids, std::pair<int, int> pair, int id) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < ids.size();) {
      if (r + 1 < ids.size() && ids[r] == pair.first && ids[r + 1] == pair.second) {
        ids[w++] = id;
        r += 2;
      } else {
        ids[w++] = ids[r++];
      }
    }
    ids.resize(w);
  }

  void rebuild() {
    rank_.clear();
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      const auto [a, b] = merges_[i];
      const int limit = kFirstMerge + static_cast<int>(i);
      if (a < 0 || b < 0 || a >= limit || b >= limit || a == kEos || b == kEos) {
        throw FormatError("merge " + std::to_string(i) + " references an undefined token");
      }
      rank_.emplace(key(a, b), i);
    }
  }

  std::size_t vocab_size_ = 512;
  std::vector<std::pair<int, int>> merges_;
  std::unordered_map<std::uint64_t, std::size_t> rank_;
};

}  // namespace bindllm
