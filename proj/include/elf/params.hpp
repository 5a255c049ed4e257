#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "elf/tensor.hpp"

namespace elf {

enum class Init { kaiming_uniform, zeros, ones, small_positive };

/// Named, ordered collection of trainable tensors. Iteration follows
/// definition order; values are drawn deterministically from (seed, name), so
/// a parameter's initial value does not depend on what else is registered.
template <typename S>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  const Tensor<S>& define(const std::string& name, Shape shape, Init init) {
    require(!map_.contains(name), "params: duplicate name '" + name + "'");
    Entry e;
    e.init = init;
    e.value = materialize(name, shape, init);
    order_.push_back(name);
    map_.emplace(name, std::move(e));
    return map_.at(name).value;
  }

  bool contains(const std::string& name) const { return map_.contains(name); }

  const Tensor<S>& at(const std::string& name) const {
    auto it = map_.find(name);
    require(it != map_.end(), "params: unknown name '" + name + "'");
    return it->second.value;
  }

  Init init_of(const std::string& name) const {
    auto it = map_.find(name);
    require(it != map_.end(), "params: unknown name '" + name + "'");
    return it->second.init;
  }

  /// Replace a value (training update or test rigging); shape must match.
  void set(const std::string& name, Tensor<S> value) {
    auto it = map_.find(name);
    require(it != map_.end(), "params: unknown name '" + name + "'");
    require(value.shape() == it->second.value.shape(),
            "params: shape mismatch for '" + name + "'");
    it->second.value = std::move(value).detached();
  }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t count() const { return order_.size(); }
  std::uint64_t seed() const { return seed_; }

  Index total_scalars() const {
    Index n = 0;
    for (const auto& name : order_) n += map_.at(name).value.size();
    return n;
  }

  /// Same names/values with every tensor registered as a leaf of `tape`.
  ParameterStore tracked(Tape<S>& tape) const {
    ParameterStore out(seed_);
    out.order_ = order_;
    for (const auto& name : order_) {
      Entry e;
      e.init = map_.at(name).init;
      e.value = tape.leaf(map_.at(name).value);
      out.map_.emplace(name, std::move(e));
    }
    return out;
  }

  template <typename T>
  ParameterStore<T> cast() const {
    ParameterStore<T> out(seed_);
    for (const auto& name : order_)
      out.adopt(name, map_.at(name).value.template cast<T>(), map_.at(name).init);
    return out;
  }

  /// Insert an externally produced value (checkpoint load, cast).
  void adopt(const std::string& name, Tensor<S> value, Init init) {
    require(!map_.contains(name), "params: duplicate name '" + name + "'");
    Entry e;
    e.init = init;
    e.value = std::move(value).detached();
    order_.push_back(name);
    map_.emplace(name, std::move(e));
  }

 private:
  struct Entry {
    Tensor<S> value;
    Init init = Init::zeros;
  };

  Tensor<S> materialize(const std::string& name, Shape shape, Init init) const {
    const Index n = numel(shape);
    std::vector<S> data(static_cast<std::size_t>(n));
    switch (init) {
      case Init::zeros:
        break;
      case Init::ones:
        std::fill(data.begin(), data.end(), S(1));
        break;
      case Init::small_positive:  // keeps relu hidden units live at init
        std::fill(data.begin(), data.end(), S(0.1));
        break;
      case Init::kaiming_uniform: {
        require(!shape.empty() && shape[0] > 0, "params: bad shape for '" + name + "'");
        const double fan_in = static_cast<double>(n / shape[0]);
        const double bound = std::sqrt(2.0 / fan_in);  // std = sqrt(2/fan_in)/sqrt(3)
        std::uint64_t state = seed_ ^ fnv1a64(name);
        for (Index i = 0; i < n; ++i)
          data[static_cast<std::size_t>(i)] = static_cast<S>(uniform_in(state, -bound, bound));
        break;
      }
    }
    return Tensor<S>(std::move(shape), std::move(data));
  }

  std::uint64_t seed_ = 0;
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> map_;
};

/// Read-only window into a store under a hierarchical name prefix.
template <typename S>
class ParamView {
 public:
  explicit ParamView(const ParameterStore<S>& store, std::string prefix = "")
      : store_(&store), prefix_(std::move(prefix)) {}

  ParamView sub(const std::string& name) const { return ParamView(*store_, join(name)); }

  const Tensor<S>& operator[](const std::string& leaf) const { return store_->at(join(leaf)); }

  bool has(const std::string& leaf) const { return store_->contains(join(leaf)); }

  const std::string& prefix() const { return prefix_; }
  const ParameterStore<S>& store() const { return *store_; }

 private:
  std::string join(const std::string& name) const {
    return prefix_.empty() ? name : prefix_ + "." + name;
  }
  const ParameterStore<S>* store_;
  std::string prefix_;
};

}  // namespace elf
