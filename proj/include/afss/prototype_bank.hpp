#pragma once

// Class prototype memory: masked-mean extraction, momentum refresh keyed by
// class id during fine-tuning, and cosine selection at test time.
//
// Bank checkpoint layout (little-endian):
//   char[8]  magic "AFSSBANK"
//   u32      format version (1)
//   u32      n  (class slots)
//   u32      d  (channels)
//   u8[n]    per-slot initialised flag (0/1)
//   f32[n*d] prototypes, row-major

#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "afss/binary_io.hpp"
#include "afss/ops.hpp"
#include "afss/tensor.hpp"

namespace afss {

// The pooled foreground vanished (typically after mask downsampling).
class EmptyMaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BankError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TempPrototype {
  Tensor<T> vector;                       // (d)
  std::optional<std::size_t> source_class;  // set during training only
};

// Channel mean of F_s (k,d,h,w) over every (shot, y, x) where M_s (k,h,w) is 1.
// The divisor is the number of foreground positions, not k*h*w.
template <typename T>
TempPrototype<T> masked_mean_prototype(const Tensor<T>& features, const Tensor<T>& mask) {
  require_rank(features, 4, "masked_mean_prototype features");
  const std::size_t k = features.dim(0), d = features.dim(1), h = features.dim(2), w = features.dim(3);
  require_shape(mask, {k, h, w}, "masked_mean_prototype mask");
  const std::size_t hw = h * w;
  Tensor<T> proto({d});
  std::size_t count = 0;
  for (std::size_t b = 0; b < k; ++b) {
    for (std::size_t i = 0; i < hw; ++i) {
      const T m = mask[b * hw + i];
      if (m != T(0) && m != T(1)) throw std::invalid_argument("masked_mean_prototype: mask must be binary");
      if (m == T(0)) continue;
      ++count;
      for (std::size_t c = 0; c < d; ++c) proto[c] += features[(b * d + c) * hw + i];
    }
  }
  if (count == 0) throw EmptyMaskError("masked_mean_prototype: support mask has no foreground positions");
  for (std::size_t c = 0; c < d; ++c) proto[c] /= static_cast<T>(count);
  require_finite(proto, "masked_mean_prototype");
  return {std::move(proto), std::nullopt};
}

template <typename T>
class PrototypeBank {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  PrototypeBank() = default;
  PrototypeBank(std::size_t n, std::size_t d) : n_(n), d_(d), rows_({n, d}), initialized_(n, false) {
    if (n == 0 || d == 0) throw BankError("prototype bank needs n >= 1 and d >= 1");
  }

  std::size_t n() const { return n_; }
  std::size_t d() const { return d_; }
  const Tensor<T>& prototypes() const { return rows_; }
  bool initialized(std::size_t class_id) const { return initialized_.at(check_id(class_id) - 1); }
  std::size_t initialized_count() const {
    return static_cast<std::size_t>(std::count(initialized_.begin(), initialized_.end(), true));
  }

  // class_id is 1-based.
  Tensor<T> row(std::size_t class_id) const {
    const std::size_t i = check_id(class_id) - 1;
    Tensor<T> out({d_});
    std::copy_n(rows_.data() + i * d_, d_, out.data());
    return out;
  }

  // Momentum refresh: slot <- renorm((1 - alpha) l2(P_t) + alpha l2(slot)).
  // An uninitialised slot takes l2(P_t) directly.
  Tensor<T> update(std::size_t class_id, const TempPrototype<T>& temp, T alpha) {
    const std::size_t i = check_id(class_id) - 1;
    if (!(alpha >= T(0) && alpha <= T(1))) throw BankError("momentum ratio must lie in [0, 1]");
    require_shape(temp.vector, {d_}, "update_prototype");
    const Tensor<T> pt = l2_normalize(temp.vector, 0);
    T* slot = rows_.data() + i * d_;
    if (!initialized_[i]) {
      std::copy_n(pt.data(), d_, slot);
      initialized_[i] = true;
    } else {
      Tensor<T> cur({d_});
      std::copy_n(slot, d_, cur.data());
      cur = l2_normalize(cur, 0);
      Tensor<T> blend({d_});
      for (std::size_t c = 0; c < d_; ++c) blend[c] = (T(1) - alpha) * pt[c] + alpha * cur[c];
      blend = l2_normalize(blend, 0);
      std::copy_n(blend.data(), d_, slot);
    }
    return row(class_id);
  }

  // argmax over initialised slots of cos(slot, P_t); ties go to the lowest id.
  std::pair<std::size_t, Tensor<T>> select(const TempPrototype<T>& temp) const {
    require_shape(temp.vector, {d_}, "select_prototype");
    if (initialized_count() == 0) throw BankError("select_prototype: bank has no initialised slots");
    const Tensor<T> pt = l2_normalize(temp.vector, 0);
    const Tensor<T> normed = l2_normalize(rows_, 1);
    std::size_t best = 0;
    T best_score = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n_; ++i) {
      if (!initialized_[i]) continue;
      T s = 0;
      for (std::size_t c = 0; c < d_; ++c) s += normed[i * d_ + c] * pt[c];
      if (s > best_score) {
        best_score = s;
        best = i;
      }
    }
    return {best + 1, row(best + 1)};
  }

  void write(std::ostream& os) const {
    io::write_magic(os, kMagic);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(n_));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d_));
    for (bool f : initialized_) io::write_pod<std::uint8_t>(os, f ? 1 : 0);
    io::write_f32_array(os, rows_.data(), rows_.size());
  }

  // Reads one bank block; expected_n / expected_d of 0 skip the shape check.
  static PrototypeBank read(std::istream& is, std::size_t expected_n = 0, std::size_t expected_d = 0) {
    io::expect_magic(is, kMagic, "prototype bank");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion) {
      throw CheckpointError("prototype bank format version " + std::to_string(version) + " unsupported");
    }
    const auto n = io::read_pod<std::uint32_t>(is);
    const auto d = io::read_pod<std::uint32_t>(is);
    if ((expected_n && n != expected_n) || (expected_d && d != expected_d)) {
      throw ShapeError("prototype bank shape (" + std::to_string(n) + ", " + std::to_string(d) +
                       ") does not match configuration (" + std::to_string(expected_n) + ", " +
                       std::to_string(expected_d) + ")");
    }
    PrototypeBank bank(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const auto f = io::read_pod<std::uint8_t>(is);
      if (f > 1) throw CheckpointError("corrupt initialisation flag in prototype bank");
      bank.initialized_[i] = f == 1;
    }
    io::read_f32_array(is, bank.rows_.data(), bank.rows_.size());
    return bank;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    write(os);
  }

  static PrototypeBank load(const std::string& path, std::size_t expected_n = 0, std::size_t expected_d = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    return read(is, expected_n, expected_d);
  }

  friend bool operator==(const PrototypeBank& a, const PrototypeBank& b) {
    return a.n_ == b.n_ && a.d_ == b.d_ && a.initialized_ == b.initialized_ && a.rows_ == b.rows_;
  }

 private:
  static constexpr io::Magic kMagic{'A', 'F', 'S', 'S', 'B', 'A', 'N', 'K'};

  std::size_t check_id(std::size_t class_id) const {
    if (class_id < 1 || class_id > n_) {
      throw BankError("class id " + std::to_string(class_id) + " outside [1, " + std::to_string(n_) + "]");
    }
    return class_id;
  }

  std::size_t n_ = 0;
  std::size_t d_ = 0;
  Tensor<T> rows_;
  std::vector<bool> initialized_;
};

}  // namespace afss
