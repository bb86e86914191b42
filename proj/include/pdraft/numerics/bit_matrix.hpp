#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "pdraft/errors.hpp"

namespace pdraft {

// Dense bit matrix, one bit per entry, rows padded to whole 64-bit words.
class BitMatrix {
 public:
  BitMatrix() = default;
  BitMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), stride_((cols + 63) / 64), words_(rows * stride_, 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t words_per_row() const { return stride_; }

  bool test(std::size_t r, std::size_t c) const {
    return (words_[r * stride_ + c / 64] >> (c % 64)) & 1u;
  }
  void set(std::size_t r, std::size_t c, bool v = true) {
    std::uint64_t& w = words_[r * stride_ + c / 64];
    const std::uint64_t bit = std::uint64_t{1} << (c % 64);
    w = v ? (w | bit) : (w & ~bit);
  }

  std::uint64_t* row_words(std::size_t r) { return words_.data() + r * stride_; }
  const std::uint64_t* row_words(std::size_t r) const { return words_.data() + r * stride_; }

  std::size_t row_count(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t w = 0; w < stride_; ++w) n += std::popcount(words_[r * stride_ + w]);
    return n;
  }

  friend bool operator==(const BitMatrix&, const BitMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t stride_ = 0;
  std::vector<std::uint64_t> words_;
};

}  // namespace pdraft
