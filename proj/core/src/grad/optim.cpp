// SPDX-License-Identifier: Apache-2.0
#include "sfmc/grad/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "sfmc/error.hpp"

namespace sfmc::grad {

Tensor& ParameterStore::add(const std::string& name, const Shape& shape) {
  if (index_.count(name)) throw Error(ErrorCode::kConfigError, "duplicate parameter " + name);
  index_[name] = entries_.size();
  entries_.push_back({name, Tensor::parameter(shape, std::vector<double>(numel_of(shape), 0.0))});
  return entries_.back().tensor;
}

Tensor& ParameterStore::add_he(const std::string& name, const Shape& shape, std::size_t fan_in,
                               std::mt19937_64& rng, double gain) {
  Tensor& t = add(name, shape);
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.mutable_values()) v = dist(rng);
  return t;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::kConfigError, "unknown parameter " + name);
  return entries_[it->second].tensor;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::kConfigError, "unknown parameter " + name);
  return entries_[it->second].tensor;
}

bool ParameterStore::contains(const std::string& name) const { return index_.count(name) != 0; }

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void ParameterStore::fill(double value) {
  for (auto& e : entries_)
    for (auto& v : e.tensor.mutable_values()) v = value;
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& e : entries_) {
    Tensor& t = out.add(e.name, e.tensor.shape());
    std::copy(e.tensor.values().begin(), e.tensor.values().end(), t.mutable_values().begin());
  }
  return out;
}

void ParameterStore::merge(const std::string& prefix, const ParameterStore& other) {
  for (const auto& e : other.entries_) {
    const std::string name = prefix + e.name;
    if (index_.count(name)) throw Error(ErrorCode::kConfigError, "duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, e.tensor});  // shares storage with `other`
  }
}

void RmsProp::step(ParameterStore& params) {
  for (const auto& e : params.entries()) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad()) {
      if (!std::isfinite(g)) throw Error(ErrorCode::kNonFiniteGradient, "parameter " + e.name);
    }
  }
  const double decay = options_.decay;
  for (auto& e : params.entries()) {
    auto& v = state_[e.name];
    auto values = e.tensor.mutable_values();
    if (v.size() != values.size()) v.assign(values.size(), 0.0);
    if (!e.tensor.has_grad()) {
      for (auto& vi : v) vi *= decay;
      continue;
    }
    const std::vector<double> g = e.tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[i] = decay * v[i] + (1.0 - decay) * g[i] * g[i];
      values[i] -= options_.learning_rate * g[i] / (std::sqrt(v[i]) + options_.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[8] = {'S', 'F', 'M', 'C', '0', '0', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw Error(ErrorCode::kIoError, "truncated checkpoint " + path.string());
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  os.write(kMagic, 8);
  for (const auto& e : entries) {
    if (numel_of(e.shape) != e.values.size())
      throw Error(ErrorCode::kShapeMismatch, "checkpoint entry " + e.name);
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(e.values.data()),
             static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  if (!os) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw Error(ErrorCode::kIoError, "bad checkpoint header in " + path.string());
  std::vector<CheckpointEntry> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    CheckpointEntry e;
    const std::uint32_t len = get_u32(is, path);
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw Error(ErrorCode::kIoError, "truncated checkpoint " + path.string());
    const std::uint32_t rank = get_u32(is, path);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get_u32(is, path));
    e.values.resize(numel_of(e.shape));
    if (!is.read(reinterpret_cast<char*>(e.values.data()),
                 static_cast<std::streamsize>(e.values.size() * sizeof(double))))
      throw Error(ErrorCode::kIoError, "truncated checkpoint " + path.string());
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<CheckpointEntry> to_entries(const ParameterStore& params, const std::string& prefix) {
  std::vector<CheckpointEntry> out;
  for (const auto& e : params.entries()) {
    out.push_back({prefix + e.name, e.tensor.shape(),
                   std::vector<double>(e.tensor.values().begin(), e.tensor.values().end())});
  }
  return out;
}

void load_entries(ParameterStore& params, const std::vector<CheckpointEntry>& entries,
                  const std::string& prefix) {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    const std::string name = e.name.substr(prefix.size());
    if (!params.contains(name))
      throw Error(ErrorCode::kCheckpointMismatch, "unexpected parameter " + e.name);
    Tensor& t = params.get(name);
    if (t.shape() != e.shape)
      throw Error(ErrorCode::kCheckpointMismatch, "parameter " + e.name + " has shape " +
                                                      shape_str(e.shape) + ", expected " +
                                                      shape_str(t.shape()));
    std::copy(e.values.begin(), e.values.end(), t.mutable_values().begin());
    seen.insert(name);
  }
  for (const auto& e : params.entries()) {
    if (!seen.count(e.name))
      throw Error(ErrorCode::kCheckpointMismatch, "missing parameter " + prefix + e.name);
  }
}

}  // namespace sfmc::grad
