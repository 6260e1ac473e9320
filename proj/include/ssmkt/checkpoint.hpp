#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssmkt/errors.hpp"
#include "ssmkt/tensor.hpp"

// Checkpoint format: <base>.manifest is text, one key=value record per
// tensor, with the version string "ssmkt-ckpt-v1" as its first bytes;
// <base>.bin is a flat little-endian blob of scalars at the stated offsets.

namespace ssmkt {

inline constexpr const char* kCheckpointVersion = "ssmkt-ckpt-v1";

template <typename S>
void save_checkpoint(const std::string& base, const std::vector<Param<S>*>& params) {
  const char* dtype = sizeof(S) == 8 ? "f64" : "f32";
  std::ofstream mf(base + ".manifest");
  if (!mf) throw FormatError("cannot write " + base + ".manifest");
  std::ofstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw FormatError("cannot write " + base + ".bin");
  mf << kCheckpointVersion << "\n";
  std::uint64_t offset = 0;
  for (const Param<S>* p : params) {
    mf << "tensor=" << p->name << " shape=";
    for (std::size_t i = 0; i < p->value.shape.size(); ++i)
      mf << (i ? "x" : "") << p->value.shape[i];
    mf << " dtype=" << dtype << " offset=" << offset << "\n";
    bf.write(reinterpret_cast<const char*>(p->value.ptr()),
             static_cast<std::streamsize>(p->value.numel() * static_cast<i64>(sizeof(S))));
    offset += static_cast<std::uint64_t>(p->value.numel()) * sizeof(S);
  }
}

template <typename S>
void load_checkpoint(const std::string& base, const std::vector<Param<S>*>& params) {
  std::ifstream mf(base + ".manifest");
  if (!mf) throw FormatError("cannot read " + base + ".manifest");
  std::string line;
  if (!std::getline(mf, line) || line != kCheckpointVersion)
    throw FormatError(base + ".manifest: bad version line '" + line + "'");

  struct Entry {
    Shape shape;
    std::string dtype;
    std::uint64_t offset = 0;
  };
  std::unordered_map<std::string, Entry> entries;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    Entry e;
    std::string name;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw FormatError(base + ".manifest: bad token '" + tok + "'");
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "tensor") {
        name = val;
      } else if (key == "shape") {
        std::istringstream ss(val);
        std::string dim;
        while (std::getline(ss, dim, 'x')) e.shape.push_back(std::stoll(dim));
      } else if (key == "dtype") {
        e.dtype = val;
      } else if (key == "offset") {
        e.offset = std::stoull(val);
      }
    }
    if (name.empty()) throw FormatError(base + ".manifest: record without tensor name");
    entries[name] = std::move(e);
  }

  std::ifstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw FormatError("cannot read " + base + ".bin");
  for (Param<S>* p : params) {
    auto it = entries.find(p->name);
    if (it == entries.end())
      throw FormatError(base + ".manifest: missing tensor '" + p->name + "'");
    const Entry& e = it->second;
    if (shape_numel(e.shape) != p->value.numel())
      throw FormatError("checkpoint tensor '" + p->name + "' has shape " + shape_str(e.shape) +
                        ", model expects " + shape_str(p->value.shape));
    const std::size_t elem = e.dtype == "f64" ? 8 : (e.dtype == "f32" ? 4 : 0);
    if (elem == 0) throw FormatError("checkpoint tensor '" + p->name + "': unknown dtype " + e.dtype);
    bf.seekg(static_cast<std::streamoff>(e.offset));
    if (elem == sizeof(S)) {
      bf.read(reinterpret_cast<char*>(p->value.ptr()),
              static_cast<std::streamsize>(p->value.numel() * static_cast<i64>(sizeof(S))));
    } else if (elem == 8) {
      std::vector<double> tmp(static_cast<std::size_t>(p->value.numel()));
      bf.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * 8));
      for (i64 i = 0; i < p->value.numel(); ++i) p->value[i] = S(tmp[static_cast<std::size_t>(i)]);
    } else {
      std::vector<float> tmp(static_cast<std::size_t>(p->value.numel()));
      bf.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(tmp.size() * 4));
      for (i64 i = 0; i < p->value.numel(); ++i) p->value[i] = S(tmp[static_cast<std::size_t>(i)]);
    }
    if (!bf) throw FormatError("checkpoint blob truncated while reading '" + p->name + "'");
  }
}

}  // namespace ssmkt
