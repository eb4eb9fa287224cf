#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace btp {

// Error taxonomy. The CLI maps each family onto its own exit status.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Precondition or consistency violation in caller-supplied data.
class ValidationError : public Error {
public:
  using Error::Error;
};

/// Filesystem or on-disk format problem.
class FormatError : public Error {
public:
  using Error::Error;
};

/// An oracle check disagreed with the implementation, or refused to run.
class OracleError : public Error {
public:
  using Error::Error;
};

namespace detail {

inline std::string to_piece(const std::string &s) { return s; }
inline std::string to_piece(const char *s) { return s; }
inline std::string to_piece(std::string_view s) { return std::string(s); }
template <typename T>
  requires std::is_arithmetic_v<T>
std::string to_piece(T v) {
  return std::to_string(v);
}

template <typename... Parts>
std::string concat(Parts &&...parts) {
  std::string out;
  (out.append(to_piece(std::forward<Parts>(parts))), ...);
  return out;
}

} // namespace detail

template <typename... Parts>
[[noreturn]] void fail_validation(Parts &&...parts) {
  throw ValidationError(detail::concat(std::forward<Parts>(parts)...));
}

template <typename... Parts>
[[noreturn]] void fail_format(Parts &&...parts) {
  throw FormatError(detail::concat(std::forward<Parts>(parts)...));
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape &shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major float32 array with a name. Immutable once built.
class TensorBlob {
public:
  TensorBlob() = default;

  TensorBlob(std::string name, Shape shape, std::vector<float> data)
      : name_(std::move(name)), shape_(std::move(shape)),
        data_(std::move(data)) {
    if (shape_.empty())
      fail_validation("tensor '", name_, "': shape must have at least one axis");
    for (auto extent : shape_) {
      if (extent == 0)
        fail_validation("tensor '", name_, "': zero extent in shape ",
                        shape_string(shape_));
    }
    if (shape_volume(shape_) != data_.size())
      fail_validation("tensor '", name_, "': shape ", shape_string(shape_),
                      " needs ", shape_volume(shape_), " values, got ",
                      data_.size());
  }

  static TensorBlob matrix(std::string name, std::size_t rows, std::size_t cols,
                           std::vector<float> data) {
    return TensorBlob(std::move(name), Shape{rows, cols}, std::move(data));
  }

  const std::string &name() const { return name_; }
  const Shape &shape() const { return shape_; }
  std::span<const float> data() const { return data_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }

  // Matrix view: leading axes are folded into rows, last axis is columns.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<const float> row(std::size_t r) const {
    if (r >= rows())
      fail_validation("tensor '", name_, "': row ", r, " out of range (",
                      rows(), " rows)");
    return std::span<const float>(data_).subspan(r * cols(), cols());
  }

  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  TensorBlob renamed(std::string name) const {
    TensorBlob copy = *this;
    copy.name_ = std::move(name);
    return copy;
  }

  /// Rows picked in the given order.
  TensorBlob gather_rows(std::span<const std::size_t> picks,
                         std::string name = {}) const {
    std::vector<float> out;
    out.reserve(picks.size() * cols());
    for (auto r : picks) {
      auto src = row(r);
      out.insert(out.end(), src.begin(), src.end());
    }
    if (picks.empty())
      fail_validation("tensor '", name_, "': cannot gather zero rows");
    return matrix(name.empty() ? name_ : std::move(name), picks.size(), cols(),
                  std::move(out));
  }

  bool bit_equal(const TensorBlob &other) const;

private:
  std::string name_;
  Shape shape_;
  std::vector<float> data_;
};

inline bool TensorBlob::bit_equal(const TensorBlob &other) const {
  if (name_ != other.name_ || shape_ != other.shape_ ||
      data_.size() != other.data_.size())
    return false;
  // Compare representations so NaN payloads count as equal to themselves.
  return std::equal(data_.begin(), data_.end(), other.data_.begin(),
                    [](float a, float b) {
                      return std::bit_cast<std::uint32_t>(a) ==
                             std::bit_cast<std::uint32_t>(b);
                    });
}

struct GridPos {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const GridPos &, const GridPos &) = default;
};

/// Sequence partition: [system | image | text], image laid out on a grid.
class TokenLayout {
public:
  TokenLayout() = default;

  TokenLayout(std::size_t n_system, std::size_t n_image, std::size_t n_text,
              std::size_t grid_rows, std::size_t grid_cols)
      : n_system_(n_system), n_image_(n_image), n_text_(n_text),
        grid_rows_(grid_rows), grid_cols_(grid_cols) {
    if (grid_rows_ == 0 || grid_cols_ == 0)
      fail_validation("layout: grid extents must be positive");
    if (grid_rows_ * grid_cols_ != n_image_)
      fail_validation("layout: grid ", grid_rows_, "x", grid_cols_,
                      " does not cover n_image=", n_image_);
  }

  /// Square-grid convenience for the common side x side case.
  static TokenLayout square(std::size_t n_system, std::size_t side,
                            std::size_t n_text) {
    return TokenLayout(n_system, side * side, n_text, side, side);
  }

  std::size_t n_system() const { return n_system_; }
  std::size_t n_image() const { return n_image_; }
  std::size_t n_text() const { return n_text_; }
  std::size_t grid_rows() const { return grid_rows_; }
  std::size_t grid_cols() const { return grid_cols_; }
  std::size_t total() const { return n_system_ + n_image_ + n_text_; }
  std::size_t image_begin() const { return n_system_; }
  std::size_t image_end() const { return n_system_ + n_image_; }
  std::size_t text_begin() const { return image_end(); }
  std::size_t non_image() const { return n_system_ + n_text_; }

  GridPos grid_pos(std::size_t image_index) const {
    return {image_index / grid_cols_, image_index % grid_cols_};
  }

  friend bool operator==(const TokenLayout &, const TokenLayout &) = default;

private:
  std::size_t n_system_ = 0;
  std::size_t n_image_ = 1;
  std::size_t n_text_ = 0;
  std::size_t grid_rows_ = 1;
  std::size_t grid_cols_ = 1;
};

/// Decoder dimensions shared by the trace manifest, cost model and toy model.
struct ModelDims {
  std::size_t num_layers = 1;
  std::size_t hidden = 1;
  std::size_t heads = 1;
  std::size_t mlp = 1;
  std::size_t kv_bytes_per_elem = 2;

  void validate() const {
    if (num_layers == 0 || hidden == 0 || heads == 0 || mlp == 0 ||
        kv_bytes_per_elem == 0)
      fail_validation("model dims: all extents must be positive");
  }

  friend bool operator==(const ModelDims &, const ModelDims &) = default;
};

/// One pruning stage. retention == 0 marks the drop-all stage, which is only
/// legal as the final stage of a schedule.
struct PruningStage {
  std::size_t layer = 0;
  double retention = 1.0;
  double lambda = 1.0;

  bool drop_all() const { return retention == 0.0; }

  friend bool operator==(const PruningStage &, const PruningStage &) = default;
};

/// Number of image tokens a stage keeps out of `previous` survivors:
/// floor(retention * previous), clamped to at least one unless drop-all.
inline std::size_t stage_keep_count(const PruningStage &stage,
                                    std::size_t previous) {
  if (stage.drop_all() || previous == 0)
    return 0;
  // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
  const auto k = static_cast<std::size_t>(
      std::floor(stage.retention * static_cast<double>(previous) + 1e-9));
  return std::clamp<std::size_t>(k, 1, previous);
}

class PruningSchedule {
public:
  PruningSchedule() = default;

  PruningSchedule(std::vector<PruningStage> stages, std::size_t num_layers)
      : stages_(std::move(stages)), num_layers_(num_layers) {
    if (num_layers_ == 0)
      fail_validation("schedule: num_layers must be positive");
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const auto &s = stages_[i];
      if (s.layer >= num_layers_)
        fail_validation("schedule: stage ", i, " layer ", s.layer,
                        " outside [0, ", num_layers_, ")");
      if (!(s.retention >= 0.0 && s.retention <= 1.0))
        fail_validation("schedule: stage ", i, " retention ", s.retention,
                        " outside (0, 1]");
      if (s.drop_all() && i + 1 != stages_.size())
        fail_validation("schedule: drop-all (retention 0) only allowed in the "
                        "final stage, found at stage ",
                        i);
      if (!(s.lambda >= 0.0 && s.lambda <= 1.0))
        fail_validation("schedule: stage ", i, " lambda ", s.lambda,
                        " outside [0, 1]");
      if (i > 0) {
        if (s.layer <= stages_[i - 1].layer)
          fail_validation("schedule: stage layers must be strictly increasing (",
                          stages_[i - 1].layer, " then ", s.layer, ")");
        if (s.lambda < stages_[i - 1].lambda)
          fail_validation("schedule: lambda must be non-decreasing across "
                          "stages (",
                          stages_[i - 1].lambda, " then ", s.lambda, ")");
      }
    }
  }

  const std::vector<PruningStage> &stages() const { return stages_; }
  std::size_t num_layers() const { return num_layers_; }
  bool empty() const { return stages_.empty(); }

  /// Surviving image-token count after each stage, starting from n_image.
  std::vector<std::size_t> survivor_counts(std::size_t n_image) const {
    std::vector<std::size_t> counts;
    std::size_t current = n_image;
    for (const auto &s : stages_) {
      current = stage_keep_count(s, current);
      counts.push_back(current);
    }
    return counts;
  }

  /// Image tokens processed by each layer. A stage at layer l affects l+1 on.
  std::vector<std::size_t> image_tokens_per_layer(std::size_t n_image) const {
    std::vector<std::size_t> per_layer(num_layers_, n_image);
    std::size_t current = n_image;
    std::size_t next_stage = 0;
    for (std::size_t layer = 0; layer < num_layers_; ++layer) {
      per_layer[layer] = current;
      if (next_stage < stages_.size() && stages_[next_stage].layer == layer) {
        current = stage_keep_count(stages_[next_stage], current);
        ++next_stage;
      }
    }
    return per_layer;
  }

  friend bool operator==(const PruningSchedule &,
                         const PruningSchedule &) = default;

private:
  std::vector<PruningStage> stages_;
  std::size_t num_layers_ = 1;
};

using Diagnostics = std::map<std::string, double>;

struct StageSelection {
  std::size_t layer = 0;
  // Image-segment-relative indices, ascending.
  std::vector<std::size_t> kept;
  std::vector<std::size_t> attention_picks;
  std::vector<std::size_t> diversity_picks;
  Diagnostics diagnostics;

  friend bool operator==(const StageSelection &,
                         const StageSelection &) = default;
};

struct SelectionResult {
  std::vector<StageSelection> per_stage;

  friend bool operator==(const SelectionResult &,
                         const SelectionResult &) = default;
};

} // namespace btp
