#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "seqpath/autodiff.hpp"

namespace seqpath {

/// Named parameter arrays in insertion order.
class ParamSet {
 public:
  void add(const std::string& name, ad::Array value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  size_t index_of(const std::string& name) const;
  ad::Array& at(const std::string& name);
  const ad::Array& at(const std::string& name) const;

  size_t size() const { return arrays_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  ad::Array& operator[](size_t i) { return arrays_[i]; }
  const ad::Array& operator[](size_t i) const { return arrays_[i]; }

  ad::Index total_size() const;

  /// Same names, shapes and values bit for bit.
  bool identical(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Array> arrays_;
  std::map<std::string, size_t> index_;
};

inline constexpr int kCheckpointVersion = 1;

/// Layout: 8-byte magic "SEQPCKPT", little-endian uint64 header length, JSON
/// header {version, meta, arrays: [{name, shape, offset, size}]}, then the
/// concatenated arrays as little-endian float64.
void save_checkpoint(const std::string& path, const ParamSet& params, const nlohmann::json& meta);
ParamSet load_checkpoint(const std::string& path, nlohmann::json* meta = nullptr);

}  // namespace seqpath
