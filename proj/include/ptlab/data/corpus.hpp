#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ptlab/core/rng.hpp"
#include "ptlab/data/vocab.hpp"

namespace ptlab {

/// Splits text into documents at blank lines. Leading and trailing newlines
/// of each document are dropped; empty documents are skipped.
std::vector<std::string> split_documents(std::string_view text);
std::vector<std::string> load_documents(const std::filesystem::path& path);

/// Token streams for training and validation. Documents are joined with eos;
/// the held-out tail is never used for training batches.
struct Corpus {
  std::vector<int> train;
  std::vector<int> heldout;
};

Corpus build_corpus(const std::vector<std::string>& documents, const Vocab& vocab, double heldout_fraction = 0.02);

/// Toy grammar over the eight symbols 'a'..'h'.
///
/// A word starts at a uniform symbol and walks forward through the alphabet
/// (cyclically), stepping by one with probability step_one and by two
/// otherwise. Words are separated by single spaces.
struct PatternGrammar {
  static constexpr int kSymbols = 8;
  double step_one = 0.8;
  int min_word = 3;
  int max_word = 6;
  int min_words = 8;
  int max_words = 20;

  static char symbol(int index) { return static_cast<char>('a' + index); }
  static int index_of(char c) { return c - 'a'; }

  std::string word(Rng& rng) const;
  std::string document(Rng& rng) const;
};

std::vector<std::string> generate_documents(const PatternGrammar& grammar, std::uint64_t seed, std::size_t n_documents);

}  // namespace ptlab
