#include "seqpath/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace seqpath {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little endian");

namespace {
constexpr char kMagic[8] = {'S', 'E', 'Q', 'P', 'C', 'K', 'P', 'T'};
}

void ParamSet::add(const std::string& name, ad::Array value) {
  if (contains(name)) throw Error(ErrorCode::BadConfig, "duplicate parameter " + name);
  index_[name] = arrays_.size();
  names_.push_back(name);
  arrays_.push_back(std::move(value));
}

size_t ParamSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::BadCheckpoint, "missing parameter " + name);
  return it->second;
}

ad::Array& ParamSet::at(const std::string& name) { return arrays_[index_of(name)]; }

const ad::Array& ParamSet::at(const std::string& name) const { return arrays_[index_of(name)]; }

ad::Index ParamSet::total_size() const {
  ad::Index n = 0;
  for (const auto& a : arrays_) n += a.size();
  return n;
}

bool ParamSet::identical(const ParamSet& other) const {
  if (names_ != other.names_) return false;
  for (size_t i = 0; i < arrays_.size(); ++i) {
    const auto& a = arrays_[i];
    const auto& b = other.arrays_[i];
    if (a.shape != b.shape) return false;
    if (std::memcmp(a.data.data(), b.data.data(), sizeof(double) * a.size()) != 0) return false;
  }
  return true;
}

void save_checkpoint(const std::string& path, const ParamSet& params, const nlohmann::json& meta) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["meta"] = meta;
  header["arrays"] = nlohmann::json::array();
  ad::Index offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    header["arrays"].push_back({{"name", params.name(i)},
                                {"shape", params[i].shape},
                                {"offset", offset},
                                {"size", params[i].size()}});
    offset += params[i].size();
  }
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp);
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (size_t i = 0; i < params.size(); ++i) {
      out.write(reinterpret_cast<const char*>(params[i].data.data()),
                static_cast<std::streamsize>(sizeof(double) * params[i].size()));
    }
    if (!out) throw Error(ErrorCode::Io, "short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error(ErrorCode::Io, "cannot rename " + tmp);
}

ParamSet load_checkpoint(const std::string& path, nlohmann::json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0 || len > (1u << 30)) {
    throw Error(ErrorCode::BadCheckpoint, path + " is not a checkpoint");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadCheckpoint, std::string("header: ") + e.what());
  }
  if (header.value("version", 0) != kCheckpointVersion) {
    throw Error(ErrorCode::BadCheckpoint, "unsupported checkpoint version");
  }
  ParamSet params;
  ad::Index expected = 0;
  for (const auto& entry : header.at("arrays")) {
    const ad::Shape shape = entry.at("shape").get<ad::Shape>();
    const ad::Index size = entry.at("size").get<ad::Index>();
    if (entry.at("offset").get<ad::Index>() != expected || ad::numel(shape) != size) {
      throw Error(ErrorCode::BadCheckpoint, "inconsistent entry " + entry.at("name").dump());
    }
    ad::Array a(shape);
    in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(sizeof(double) * size));
    if (!in) throw Error(ErrorCode::BadCheckpoint, "truncated data in " + path);
    params.add(entry.at("name").get<std::string>(), std::move(a));
    expected += size;
  }
  if (meta) *meta = header.value("meta", nlohmann::json::object());
  return params;
}

}  // namespace seqpath
