#include "flexkd/param_store.hpp"

namespace flexkd {

ParamRef ParamStore::add(std::string name, Tensor value, bool trainable) {
  if (by_name_.count(name) != 0) {
    throw ValueError("parameter name already registered: " + name);
  }
  Entry e;
  e.name = std::move(name);
  e.grad = Tensor::zeros(value.shape());
  e.value = std::move(value);
  e.trainable = trainable;
  entries_.push_back(std::move(e));
  const std::size_t idx = entries_.size() - 1;
  by_name_.emplace(entries_.back().name, idx);
  return ParamRef{idx};
}

ParamRef ParamStore::find(const std::string& name) const {
  const auto it = by_name_.find(name);
  if (it == by_name_.end()) return ParamRef{};
  return ParamRef{it->second};
}

void ParamStore::accumulate_grad(ParamRef ref, const Tensor& g) {
  Entry& e = entry(ref);
  if (!g.same_shape(e.grad)) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match parameter " +
                     e.name + " " + shape_str(e.value.shape()));
  }
  double* gd = e.grad.data();
  const double* src = g.data();
  for (std::int64_t i = 0; i < g.size(); ++i) gd[i] += src[i];
}

void ParamStore::zero_grads() {
  for (Entry& e : entries_) {
    double* gd = e.grad.data();
    for (std::int64_t i = 0; i < e.grad.size(); ++i) gd[i] = 0.0;
  }
}

std::int64_t ParamStore::trainable_scalar_count() const {
  std::int64_t n = 0;
  for (const Entry& e : entries_) {
    if (e.trainable) n += e.value.size();
  }
  return n;
}

std::vector<ParamRef> ParamStore::refs() const {
  std::vector<ParamRef> out;
  out.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) out.push_back(ParamRef{i});
  return out;
}

std::vector<Tensor> ParamStore::snapshot_values() const {
  std::vector<Tensor> out;
  out.reserve(entries_.size());
  for (const Entry& e : entries_) out.push_back(e.value);
  return out;
}

void ParamStore::restore_values(const std::vector<Tensor>& values) {
  if (values.size() != entries_.size()) {
    throw ValueError("snapshot entry count " + std::to_string(values.size()) +
                     " does not match store size " + std::to_string(entries_.size()));
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!values[i].same_shape(entries_[i].value)) {
      throw ShapeError("snapshot shape mismatch for parameter " + entries_[i].name);
    }
    entries_[i].value = values[i];
  }
}

ParamStore::Entry& ParamStore::entry(ParamRef ref) {
  if (!ref.valid() || ref.index >= entries_.size()) {
    throw ValueError("invalid parameter reference");
  }
  return entries_[ref.index];
}

const ParamStore::Entry& ParamStore::entry(ParamRef ref) const {
  if (!ref.valid() || ref.index >= entries_.size()) {
    throw ValueError("invalid parameter reference");
  }
  return entries_[ref.index];
}

}  // namespace flexkd
