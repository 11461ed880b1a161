#include "mmfusion/tensor.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace mmfusion {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kData: return "data";
    case ErrorKind::kDomain: return "domain";
    case ErrorKind::kLookup: return "lookup";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kOracle: return "oracle";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

std::string shape_string(const Shape& dims) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out << 'x';
    out << dims[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

template <Real T>
Tensor<T>::Tensor(Shape dims) : dims_(std::move(dims)), data_(shape_numel(dims_), T(0)) {}

template <Real T>
Tensor<T>::Tensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
  if (shape_numel(dims_) != data_.size()) {
    throw ShapeError("tensor dims " + shape_string(dims_) + " do not match " +
                     std::to_string(data_.size()) + " values");
  }
}

template <Real T>
Tensor<T> Tensor<T>::full(Shape dims, T value) {
  Tensor t(std::move(dims));
  t.fill(value);
  return t;
}

template <Real T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= dims_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(dims_));
  }
  return dims_[axis];
}

template <Real T>
Tensor<T> Tensor<T>::reshaped(Shape dims) const {
  if (shape_numel(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(dims_) + " to " + shape_string(dims));
  }
  return Tensor(std::move(dims), data_);
}

template <Real T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <Real T>
bool Tensor<T>::all_finite() const {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void FcBlockSpec::validate() const {
  if (in_dim == 0 || hidden_dim == 0 || out_dim == 0) {
    throw ConfigError("FC block dims must be >= 1");
  }
}

template <Real T>
typename ParamStore<T>::Entry& ParamStore<T>::lookup(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

template <Real T>
const typename ParamStore<T>::Entry& ParamStore<T>::lookup(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw LookupError("no parameter named '" + name + "'");
  return it->second;
}

template <Real T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (entries_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Tensor<T> grad(value.dims());
  auto [it, _] = entries_.emplace(name, Entry{std::move(value), std::move(grad)});
  return it->second.value;
}

template <Real T>
Tensor<T>& ParamStore<T>::add_uniform(const std::string& name, Shape dims, std::size_t fan_in) {
  Tensor<T> value(std::move(dims));
  SplitMix64 rng(seed_ ^ hash_name(name));
  const double bound = init_gain_ / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
  for (auto& v : value.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return add(name, std::move(value));
}

template <Real T>
Tensor<T>& ParamStore<T>::add_zeros(const std::string& name, Shape dims) {
  return add(name, Tensor<T>(std::move(dims)));
}

template <Real T>
Tensor<T>& ParamStore<T>::value(const std::string& name) {
  return lookup(name).value;
}

template <Real T>
const Tensor<T>& ParamStore<T>::value(const std::string& name) const {
  return lookup(name).value;
}

template <Real T>
Tensor<T>& ParamStore<T>::grad(const std::string& name) {
  return lookup(name).grad;
}

template <Real T>
const Tensor<T>& ParamStore<T>::grad(const std::string& name) const {
  return lookup(name).grad;
}

template <Real T>
void ParamStore<T>::zero_grad() {
  for (auto& [_, entry] : entries_) entry.grad.fill(T(0));
}

template <Real T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, entry] : entries_) n += entry.value.numel();
  return n;
}

template <Real T>
std::vector<std::string> ParamStore<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

template <Real T>
void add_fc_block_params(ParamStore<T>& params, const std::string& prefix, const FcBlockSpec& spec) {
  spec.validate();
  params.add_uniform(prefix + ".w1", {spec.hidden_dim, spec.in_dim}, spec.in_dim);
  params.add_uniform(prefix + ".w2", {spec.out_dim, spec.hidden_dim}, spec.hidden_dim);
  if (spec.bias) {
    params.add_zeros(prefix + ".b1", {spec.hidden_dim});
    params.add_zeros(prefix + ".b2", {spec.out_dim});
  }
}

template <Real T>
void add_linear_params(ParamStore<T>& params, const std::string& prefix, std::size_t in_dim,
                       std::size_t out_dim) {
  params.add_uniform(prefix + ".w", {out_dim, in_dim}, in_dim);
  params.add_zeros(prefix + ".b", {out_dim});
}

template class Tensor<float>;
template class Tensor<double>;
template class ParamStore<float>;
template class ParamStore<double>;
template void add_fc_block_params(ParamStore<float>&, const std::string&, const FcBlockSpec&);
template void add_fc_block_params(ParamStore<double>&, const std::string&, const FcBlockSpec&);
template void add_linear_params(ParamStore<float>&, const std::string&, std::size_t, std::size_t);
template void add_linear_params(ParamStore<double>&, const std::string&, std::size_t, std::size_t);

}  // namespace mmfusion
