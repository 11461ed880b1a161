#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmfusion/error.hpp"

namespace mmfusion {

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& dims);
std::size_t shape_numel(const Shape& dims);

/// Dense row-major tensor. Owns its storage; copies are deep.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape dims);
  Tensor(Shape dims, std::vector<T> data);

  static Tensor full(Shape dims, T value);
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }

  Tensor reshaped(Shape dims) const;
  void fill(T value);
  bool all_finite() const;

  template <Real U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape dims_;
  std::vector<T> data_;
};

/// Shape of an FC block: linear(in, hidden) -> ReLU -> linear(hidden, out).
struct FcBlockSpec {
  std::size_t in_dim = 1;
  std::size_t hidden_dim = 1;
  std::size_t out_dim = 1;
  bool bias = true;

  void validate() const;
};

/// Deterministic 64-bit generator (splitmix64). Used wherever results must be
/// reproducible across platforms and standard-library implementations.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : (*this)() % n; }

 private:
  std::uint64_t state_;
};

std::uint64_t hash_name(std::string_view name);

/// Named learnable tensors with matching gradient slots.
template <Real T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> grad;
  };

  explicit ParamStore(std::uint64_t seed = 0, double init_gain = 1.0) : seed_(seed), init_gain_(init_gain) {}

  std::uint64_t seed() const noexcept { return seed_; }
  double init_gain() const noexcept { return init_gain_; }

  /// Uniform in [-g/sqrt(fan_in), g/sqrt(fan_in)], g the init gain, from a generator
  /// seeded by (store seed, name).
  Tensor<T>& add_uniform(const std::string& name, Shape dims, std::size_t fan_in);
  Tensor<T>& add_zeros(const std::string& name, Shape dims);
  Tensor<T>& add(const std::string& name, Tensor<T> value);

  bool contains(const std::string& name) const { return entries_.contains(name); }
  Tensor<T>& value(const std::string& name);
  const Tensor<T>& value(const std::string& name) const;
  Tensor<T>& grad(const std::string& name);
  const Tensor<T>& grad(const std::string& name) const;

  void zero_grad();
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;
  std::vector<std::string> names() const;

  /// Names are kept sorted so iteration (and checkpoint order) is deterministic.
  const std::map<std::string, Entry>& entries() const noexcept { return entries_; }
  std::map<std::string, Entry>& entries() noexcept { return entries_; }

  template <Real U>
  ParamStore<U> cast() const {
    ParamStore<U> out(seed_, init_gain_);
    for (const auto& [name, entry] : entries_) out.add(name, entry.value.template cast<U>());
    return out;
  }

 private:
  Entry& lookup(const std::string& name);
  const Entry& lookup(const std::string& name) const;

  std::uint64_t seed_;
  double init_gain_;
  std::map<std::string, Entry> entries_;
};

/// Registers `{prefix}.w1/b1/w2/b2` for an FC block.
template <Real T>
void add_fc_block_params(ParamStore<T>& params, const std::string& prefix, const FcBlockSpec& spec);

/// Registers `{prefix}.w` (out x in) and `{prefix}.b` (out) for a linear layer.
template <Real T>
void add_linear_params(ParamStore<T>& params, const std::string& prefix, std::size_t in_dim,
                       std::size_t out_dim);

}  // namespace mmfusion
