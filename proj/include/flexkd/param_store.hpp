#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "flexkd/tensor.hpp"

namespace flexkd {

struct ParamRef {
  std::size_t index = static_cast<std::size_t>(-1);
  bool valid() const { return index != static_cast<std::size_t>(-1); }
};

/// Named, ordered collection of tensors: trainable parameters plus
/// non-trainable statistics (batch-norm running moments). Every entry owns a
/// gradient slot of identical shape. Gradients accumulate (+=) and are zeroed
/// between optimizer steps by the trainer.
class ParamStore {
 public:
  ParamRef add(std::string name, Tensor value, bool trainable = true);

  std::size_t count() const { return entries_.size(); }

  const std::string& name(ParamRef ref) const { return entry(ref).name; }
  Tensor& value(ParamRef ref) { return entry(ref).value; }
  const Tensor& value(ParamRef ref) const { return entry(ref).value; }
  Tensor& grad(ParamRef ref) { return entry(ref).grad; }
  const Tensor& grad(ParamRef ref) const { return entry(ref).grad; }
  bool trainable(ParamRef ref) const { return entry(ref).trainable; }

  ParamRef find(const std::string& name) const;
  bool contains(const std::string& name) const { return find(name).valid(); }

  /// Shape-checked `grad += g`.
  void accumulate_grad(ParamRef ref, const Tensor& g);
  void zero_grads();

  std::int64_t trainable_scalar_count() const;

  /// All refs in registration order.
  std::vector<ParamRef> refs() const;

  /// Deep copy of every value (including non-trainable stats) and restore.
  std::vector<Tensor> snapshot_values() const;
  void restore_values(const std::vector<Tensor>& values);

 private:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;
  };

  Entry& entry(ParamRef ref);
  const Entry& entry(ParamRef ref) const;

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

}  // namespace flexkd
