#include "ptlab/data/corpus.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ptlab/core/error.hpp"

namespace ptlab {

std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string current;
  std::size_t pos = 0;
  auto flush = [&] {
    while (!current.empty() && current.back() == '\n') current.pop_back();
    if (!current.empty()) docs.push_back(current);
    current.clear();
  };
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      flush();
    } else {
      current.append(line);
      current.push_back('\n');
    }
    pos = end + 1;
  }
  flush();
  return docs;
}

std::vector<std::string> load_documents(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return split_documents(buf.str());
}

Corpus build_corpus(const std::vector<std::string>& documents, const Vocab& vocab, double heldout_fraction) {
  if (documents.empty()) throw Error("corpus has no documents");
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw Error("held-out fraction must lie in (0, 1)");
  std::vector<int> stream;
  for (const auto& doc : documents) {
    auto ids = tokenize(doc, vocab);
    stream.insert(stream.end(), ids.begin(), ids.end());
    stream.push_back(vocab.eos());
  }
  const auto held = static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(stream.size())));
  Corpus c;
  c.train.assign(stream.begin(), stream.end() - static_cast<std::ptrdiff_t>(held));
  c.heldout.assign(stream.end() - static_cast<std::ptrdiff_t>(held), stream.end());
  return c;
}

std::string PatternGrammar::word(Rng& rng) const {
  const auto len = static_cast<int>(rng.between(min_word, max_word));
  int s = static_cast<int>(rng.below(kSymbols));
  std::string w(1, symbol(s));
  for (int i = 1; i < len; ++i) {
    s = (s + (rng.uniform() < step_one ? 1 : 2)) % kSymbols;
    w.push_back(symbol(s));
  }
  return w;
}

std::string PatternGrammar::document(Rng& rng) const {
  const auto n = static_cast<int>(rng.between(min_words, max_words));
  std::string doc;
  for (int i = 0; i < n; ++i) {
    if (i > 0) doc.push_back(' ');
    doc += word(rng);
  }
  return doc;
}

std::vector<std::string> generate_documents(const PatternGrammar& grammar, std::uint64_t seed, std::size_t n_documents) {
  Rng rng(seed);
  std::vector<std::string> docs;
  docs.reserve(n_documents);
  for (std::size_t i = 0; i < n_documents; ++i) docs.push_back(grammar.document(rng));
  return docs;
}

}  // namespace ptlab
