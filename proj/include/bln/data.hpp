#pragma once

// Datasets: seeded synthetic generators, the CIFAR-10 binary reader and
// class-stratified subsetting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bln/error.hpp"
#include "bln/tensor.hpp"

namespace bln {

struct Dataset {
  Tensor inputs;                    // [N, ...]
  std::vector<std::size_t> labels;  // length N, each in [0, classes)
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (labels.empty()) throw DataError("dataset is empty");
    if (inputs.rows() != labels.size()) throw DataError("inputs and labels disagree on N");
    for (auto l : labels)
      if (l >= classes) throw DataError("label out of range");
  }

  bool operator==(const Dataset&) const = default;
};

inline Dataset take(const Dataset& d, std::span<const std::size_t> idx) {
  Dataset out{take_rows(d.inputs, idx), {}, d.classes};
  out.labels.reserve(idx.size());
  for (auto i : idx) out.labels.push_back(d.labels.at(i));
  return out;
}

/// Gaussian clusters: class centers are separation * N(0, I), samples are
/// center + N(0, I). Rows come out in a seeded random order.
inline Dataset gen_blobs(std::size_t n_per_class, std::size_t classes, std::size_t d,
                         double separation, std::uint64_t seed) {
  if (n_per_class == 0 || classes == 0 || d == 0)
    throw UsageError("gen_blobs sizes must be positive");
  if (separation < 0.0) throw UsageError("separation must be non-negative");
  Rng center_rng = Rng(seed).fork(1);
  Rng sample_rng = Rng(seed).fork(2);
  Rng order_rng = Rng(seed).fork(3);

  const Tensor centers = scale(randn({classes, d}, center_rng), separation);
  const std::size_t n = n_per_class * classes;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  order_rng.shuffle(order);

  Dataset out{Tensor({n, d}), std::vector<std::size_t>(n), classes};
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t c = s / n_per_class;
    const std::size_t row = order[s];
    out.labels[row] = c;
    for (std::size_t k = 0; k < d; ++k)
      out.inputs.at(row, k) = centers.at(c, k) + sample_rng.normal();
  }
  return out;
}

/// One-hot token sequences [n, length, vocab]; label 1 iff token 0
/// occurs an odd number of times.
inline Dataset gen_parity_sequences(std::size_t n, std::size_t length, std::size_t vocab,
                                    std::uint64_t seed) {
  if (n == 0) throw UsageError("gen_parity_sequences needs n >= 1");
  if (length == 0) throw UsageError("sequence length must be at least 1");
  if (vocab < 2) throw UsageError("vocabulary must have at least 2 tokens");
  Rng rng(seed);
  Dataset out{Tensor({n, length, vocab}), std::vector<std::size_t>(n), 2};
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t zeros_seen = 0;
    for (std::size_t t = 0; t < length; ++t) {
      const auto tok = static_cast<std::size_t>(rng.below(vocab));
      zeros_seen += tok == 0;
      out.inputs[(i * length + t) * vocab + tok] = 1.0;
    }
    out.labels[i] = zeros_seen % 2;
  }
  return out;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarPixels = 3072;

/// Decode CIFAR-10 "binary version" records: one label byte followed by
/// 3072 bytes of R, G, B planes (32x32 each). Pixels are scaled to [0, 1].
inline Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0)
    throw DataError("malformed CIFAR-10 binary: " + std::to_string(bytes.size()) +
                    " bytes is not a multiple of 3073");
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset out{Tensor({n, 3, 32, 32}), std::vector<std::size_t>(n), 10};
  for (std::size_t r = 0; r < n; ++r) {
    const auto* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9)
      throw DataError("CIFAR-10 record " + std::to_string(r) + " has label " +
                      std::to_string(rec[0]));
    out.labels[r] = rec[0];
    for (std::size_t p = 0; p < kCifarPixels; ++p)
      out.inputs[r * kCifarPixels + p] = static_cast<double>(rec[1 + p]) / 255.0;
  }
  return out;
}

inline Dataset load_cifar10_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_cifar10_binary(bytes);
}

namespace detail {

inline std::size_t ceil_count(double fraction, std::size_t n) {
  const double want = std::ceil(fraction * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, n);
}

/// Per-class quotas summing to total, each within 1 of
/// total * n_c / N (largest remainder, ties to the lower class).
inline std::vector<std::size_t> class_quotas(const std::vector<std::size_t>& per_class,
                                             std::size_t n, std::size_t total) {
  const double f = static_cast<double>(total) / static_cast<double>(n);
  std::vector<std::size_t> quota(per_class.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const double exact = f * static_cast<double>(per_class[c]);
    quota[c] = std::min(per_class[c], static_cast<std::size_t>(std::floor(exact)));
    assigned += quota[c];
    rem.emplace_back(exact - static_cast<double>(quota[c]), c);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % rem.size()) {
    const std::size_t c = rem[i].second;
    if (quota[c] < per_class[c]) {
      ++quota[c];
      ++assigned;
    }
  }
  return quota;
}

}  // namespace detail

/// Indices of a class-stratified draw of ceil(fraction * N) items, in the
/// order of a seeded shuffle. The second vector holds the rest, same order.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw UsageError("fraction must lie in (0, 1]");
  d.validate();
  const std::size_t n = d.size();
  std::vector<std::size_t> per_class(d.classes, 0);
  for (auto l : d.labels) ++per_class[l];
  auto quota = detail::class_quotas(per_class, n, detail::ceil_count(fraction, n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<std::size_t> taken, rest;
  for (auto i : order) {
    auto& q = quota[d.labels[i]];
    if (q > 0) {
      --q;
      taken.push_back(i);
    } else {
      rest.push_back(i);
    }
  }
  return {std::move(taken), std::move(rest)};
}

inline Dataset subset(const Dataset& d, double fraction, std::uint64_t seed) {
  return take(d, stratified_split(d, fraction, seed).first);
}

}  // namespace bln
