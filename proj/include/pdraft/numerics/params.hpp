#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pdraft/numerics/autodiff.hpp"

namespace pdraft {

struct Parameter {
  std::string name;
  Tensor2D value;
  bool trainable = true;
};

// Gradients aligned with a ParamStore's parameter order.
using Gradients = std::vector<Tensor2D>;

// Ordered, named collection of parameters. Order is insertion order and is
// what checkpoints, optimizers and gradient maps index by.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor2D value, bool trainable = true);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  std::vector<Parameter>::const_iterator begin() const { return params_.begin(); }
  std::vector<Parameter>::const_iterator end() const { return params_.end(); }

  std::size_t scalar_count() const;
  Gradients zero_gradients() const;
  // FNV-1a over the raw bytes of every value; used for determinism checks.
  std::uint64_t checksum() const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// Lazily binds store parameters as leaves of one tape.
class Binding {
 public:
  Binding(Tape& tape, const ParamStore& store) : tape_(tape), store_(store), vars_(store.size()) {}

  Var operator()(std::size_t index);
  Tape& tape() { return tape_; }

  // Adds the tape's gradients for every bound parameter into acc.
  void accumulate_into(Gradients& acc) const;
  Gradients gradients() const;

 private:
  Tape& tape_;
  const ParamStore& store_;
  std::vector<std::optional<Var>> vars_;
};

void add_into(Gradients& acc, const Gradients& g);
double max_abs(const Gradients& g);

// Flat binary checkpoint:
//   "PDCK" | u32 version | u64 parameter count | u64 metadata length | metadata bytes
//   per parameter: u32 name length | name | u64 rows | u64 cols | u8 trainable | f64[rows*cols]
// All integers and floats little-endian.
struct Checkpoint {
  ParamStore params;
  std::string metadata;
};

void save_checkpoint(const std::string& path, const ParamStore& params, const std::string& metadata);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pdraft
