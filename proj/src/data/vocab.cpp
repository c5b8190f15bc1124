#include "ptlab/data/vocab.hpp"

#include "ptlab/core/error.hpp"

namespace ptlab {

Vocab::Vocab(int size, int n_sentinels) : size_(size), n_sentinels_(n_sentinels) {
  if (n_sentinels < 1) throw ValidationError("vocab needs at least one sentinel");
  if (size < kByteOffset + kByteCount + n_sentinels) {
    throw ValidationError("vocab size " + std::to_string(size) + " too small for 256 bytes, pad, eos and " +
                          std::to_string(n_sentinels) + " sentinels");
  }
}

int Vocab::sentinel(int k) const {
  if (k < 0 || k >= n_sentinels_) throw Error("sentinel index " + std::to_string(k) + " out of range");
  return first_sentinel() + k;
}

std::vector<int> tokenize(std::string_view text, const Vocab&) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(Vocab::kByteOffset + c);
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (!vocab.is_byte(id)) throw Error("detokenize: id " + std::to_string(id) + " is not a byte token");
    out.push_back(static_cast<char>(id - Vocab::kByteOffset));
  }
  return out;
}

}  // namespace ptlab
