#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ptlab {

/// Byte-level vocabulary: pad, eos, the 256 byte values, then reserved
/// sentinel ids at the very top of the id range.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kByteOffset = 2;
  static constexpr int kByteCount = 256;

  explicit Vocab(int size = 512, int n_sentinels = 100);

  int size() const { return size_; }
  int n_sentinels() const { return n_sentinels_; }
  int pad() const { return kPad; }
  int eos() const { return kEos; }

  /// Id of sentinel k; ids grow with k.
  int sentinel(int k) const;
  int first_sentinel() const { return size_ - n_sentinels_; }
  bool is_sentinel(int id) const { return id >= first_sentinel() && id < size_; }
  bool is_byte(int id) const { return id >= kByteOffset && id < kByteOffset + kByteCount; }

 private:
  int size_;
  int n_sentinels_;
};

std::vector<int> tokenize(std::string_view text, const Vocab& vocab);

/// Inverse of tokenize. Throws on ids that are not byte tokens.
std::string detokenize(std::span<const int> ids, const Vocab& vocab);

}  // namespace ptlab
