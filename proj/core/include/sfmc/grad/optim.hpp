// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "sfmc/grad/tensor.hpp"

namespace sfmc::grad {

/// Ordered collection of named learnable leaves.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };

  /// Registers a zero-initialized parameter; names must be unique.
  Tensor& add(const std::string& name, const Shape& shape);
  /// He-normal init (std sqrt(2 / fan_in)) scaled by `gain`.
  Tensor& add_he(const std::string& name, const Shape& shape, std::size_t fan_in,
                 std::mt19937_64& rng, double gain = 1.0);

  [[nodiscard]] Tensor& get(const std::string& name);
  [[nodiscard]] const Tensor& get(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;
  [[nodiscard]] std::vector<Entry>& entries() { return entries_; }
  [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }

  void zero_grad();
  void fill(double value);
  /// Deep copy with independent storage.
  [[nodiscard]] ParameterStore clone() const;
  /// Appends all entries of `other` with `prefix` prepended to their names.
  void merge(const std::string& prefix, const ParameterStore& other);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct RmsPropOptions {
  double learning_rate = 1e-3;
  double decay = 0.9;
  double epsilon = 1e-8;
};

class RmsProp {
 public:
  explicit RmsProp(RmsPropOptions options = {}) : options_(options) {}

  /// v <- decay*v + (1-decay)*g^2; p <- p - lr*g/(sqrt(v)+eps). Parameters
  /// without a gradient are treated as g = 0. Throws NonFiniteGradient before
  /// touching any parameter.
  void step(ParameterStore& params);

  [[nodiscard]] const RmsPropOptions& options() const { return options_; }
  [[nodiscard]] std::map<std::string, std::vector<double>>& state() { return state_; }
  [[nodiscard]] const std::map<std::string, std::vector<double>>& state() const { return state_; }

 private:
  RmsPropOptions options_;
  std::map<std::string, std::vector<double>> state_;
};

/// One named array in a checkpoint file.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// "SFMC0001", then per entry: u32 name length, UTF-8 name, u32 rank,
/// u32 extents, f64 values; all little-endian.
void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

std::vector<CheckpointEntry> to_entries(const ParameterStore& params, const std::string& prefix = "");
/// Copies values into `params`; the entries with `prefix` must match the
/// store's names and shapes exactly (CheckpointMismatch otherwise).
void load_entries(ParameterStore& params, const std::vector<CheckpointEntry>& entries,
                  const std::string& prefix = "");

}  // namespace sfmc::grad
