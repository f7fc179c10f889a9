#pragma once

// Exact similarity search over l2-normalized visual vectors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "text2vis/error.hpp"
#include "text2vis/matrix.hpp"
#include "text2vis/types.hpp"

namespace text2vis {

template <typename T>
std::vector<T> l2_normalize(std::span<const T> v) {
  double sq = 0.0;
  for (T x : v) sq += static_cast<double>(x) * static_cast<double>(x);
  if (!(sq > 0.0)) throw Error("cannot l2-normalize a zero vector");
  if (!std::isfinite(sq)) throw Error("cannot l2-normalize a non-finite vector");
  const double norm = std::sqrt(sq);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(static_cast<double>(v[i]) / norm);
  return out;
}

// Euclidean distance accumulated in double.
template <typename A, typename B>
double euclidean_distance(std::span<const A> a, std::span<const B> b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return std::sqrt(sum);
}

struct RankedEntry {
  ImageId image_id = 0;
  double distance = 0.0;

  friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

// Closest first; ties by ascending image id.
inline bool ranks_before(const RankedEntry& a, const RankedEntry& b) {
  return a.distance < b.distance || (a.distance == b.distance && a.image_id < b.image_id);
}

struct RankedList {
  std::vector<RankedEntry> entries;
  std::optional<ImageId> query_id;

  std::vector<ImageId> ids() const {
    std::vector<ImageId> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.image_id);
    return out;
  }
};

class VisualIndex {
 public:
  // Rows are l2-normalized on the way in; id order is preserved.
  VisualIndex(std::vector<ImageId> ids, const Matrix<float>& raw) : ids_(std::move(ids)) {
    if (ids_.empty()) throw Error("cannot build an index over an empty collection");
    if (raw.rows() != ids_.size()) {
      throw Error("index: " + std::to_string(ids_.size()) + " ids but " + std::to_string(raw.rows()) + " vectors");
    }
    if (raw.cols() == 0) throw Error("index: zero-dimensional vectors");
    std::unordered_set<ImageId> seen;
    for (auto id : ids_) {
      if (!seen.insert(id).second) throw Error("index: duplicate image id " + std::to_string(id));
    }
    vectors_ = Matrix<float>(raw.rows(), raw.cols());
    for (std::size_t r = 0; r < raw.rows(); ++r) {
      std::vector<float> unit;
      try {
        unit = l2_normalize<float>(raw.row(r));
      } catch (const Error&) {
        throw Error("index: vector for image " + std::to_string(ids_[r]) + " is zero or non-finite");
      }
      std::copy(unit.begin(), unit.end(), vectors_.row(r).begin());
    }
  }

  VisualIndex(std::vector<ImageId> ids, std::span<const std::vector<float>> rows)
      : VisualIndex(std::move(ids), to_matrix(rows)) {}

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return vectors_.cols(); }
  const std::vector<ImageId>& ids() const noexcept { return ids_; }
  std::span<const float> vector(std::size_t row) const { return vectors_.row(row); }

  // Top-k by Euclidean distance between the normalized query and every row.
  template <typename T>
  RankedList query(std::span<const T> q, std::size_t k, std::optional<ImageId> exclude_id = std::nullopt) const {
    if (q.size() != dim()) {
      throw Error("query dimension " + std::to_string(q.size()) + " does not match index dimension " +
                  std::to_string(dim()));
    }
    if (k == 0) throw Error("query: k must be >= 1");
    const std::vector<double> unit = l2_normalize<double>(to_double(q));
    std::vector<RankedEntry> all;
    all.reserve(size());
    for (std::size_t r = 0; r < size(); ++r) {
      if (exclude_id && ids_[r] == *exclude_id) continue;
      all.push_back({ids_[r], euclidean_distance<double, float>(unit, vectors_.row(r))});
    }
    const std::size_t keep = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), ranks_before);
    all.resize(keep);
    return RankedList{std::move(all), exclude_id};
  }

 private:
  static Matrix<float> to_matrix(std::span<const std::vector<float>> rows) {
    if (rows.empty()) throw Error("cannot build an index over an empty collection");
    Matrix<float> m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != m.cols()) throw Error("index: inconsistent vector dimensions");
      std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
  }

  template <typename T>
  static std::vector<double> to_double(std::span<const T> q) {
    return std::vector<double>(q.begin(), q.end());
  }

  std::vector<ImageId> ids_;
  Matrix<float> vectors_;
};

}  // namespace text2vis
