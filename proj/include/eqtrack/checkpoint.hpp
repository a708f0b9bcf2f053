#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "eqtrack/adam.hpp"
#include "eqtrack/error.hpp"
#include "eqtrack/tensor.hpp"

namespace eqtrack::diff {

// Checkpoint layout (little-endian):
//   magic "EQTK", u32 version = 1
//   u32 record count, then per record:
//     u32 name length, name bytes, u8 dtype (0 = f32),
//     u32 rank, u32 dims[rank], row-major f32 data
//   u32 optimizer record count, same record format ("adam.m.<name>" / "adam.v.<name>")
//   u64 optimizer step count, u64 training iteration

namespace ckpt_detail {

template <class V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V take(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw IoError("truncated checkpoint");
  return v;
}

inline void put_record(std::ostream& os, const std::string& name, const Shape& shape,
                       const std::vector<float>& data) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint8_t>(os, 0);  // f32
  if (shape.kind == Shape::Kind::Mat) {
    put<std::uint32_t>(os, 2);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.d0));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.d1));
  } else {
    put<std::uint32_t>(os, 4);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.d0));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.d1));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.d2));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.d3));
  }
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(float)));
}

struct RawRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

inline RawRecord take_record(std::istream& is) {
  RawRecord r;
  const auto name_len = take<std::uint32_t>(is);
  r.name.resize(name_len);
  is.read(r.name.data(), name_len);
  const auto dtype = take<std::uint8_t>(is);
  if (dtype != 0) throw IoError("unsupported dtype in checkpoint record " + r.name);
  const auto rank = take<std::uint32_t>(is);
  if (rank > 4) throw IoError("unsupported rank in checkpoint record " + r.name);
  std::size_t total = 1;
  for (std::uint32_t k = 0; k < rank; ++k) {
    r.dims.push_back(take<std::uint32_t>(is));
    total *= r.dims.back();
  }
  r.data.resize(total);
  is.read(reinterpret_cast<char*>(r.data.data()),
          static_cast<std::streamsize>(total * sizeof(float)));
  if (!is) throw IoError("truncated checkpoint record " + r.name);
  return r;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params,
                            const AdamState<float>* opt, std::uint64_t iteration) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  os.write("EQTK", 4);
  ckpt_detail::put<std::uint32_t>(os, 1);
  ckpt_detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) ckpt_detail::put_record(os, p.name, p.shape, p.value);
  const std::uint32_t n_opt = opt ? static_cast<std::uint32_t>(2 * params.size()) : 0;
  ckpt_detail::put<std::uint32_t>(os, n_opt);
  if (opt) {
    for (std::size_t k = 0; k < params.size(); ++k) {
      ckpt_detail::put_record(os, "adam.m." + params[k].name, params[k].shape, opt->m[k]);
      ckpt_detail::put_record(os, "adam.v." + params[k].name, params[k].shape, opt->v[k]);
    }
  }
  ckpt_detail::put<std::uint64_t>(os, opt ? static_cast<std::uint64_t>(opt->step_count) : 0);
  ckpt_detail::put<std::uint64_t>(os, iteration);
  if (!os) throw IoError("write failed: " + path.string());
}

// Loads into an existing store (shapes must match). opt may be null to skip
// optimizer state (inference). Returns the saved iteration counter.
inline std::uint64_t load_checkpoint(const std::filesystem::path& path,
                                     ParamStore<float>* params, AdamState<float>* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EQTK", 4) != 0)
    throw BadMagic("not a checkpoint: " + path.string());
  if (ckpt_detail::take<std::uint32_t>(is) != 1) throw IoError("unsupported checkpoint version");
  const auto n_rec = ckpt_detail::take<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < n_rec; ++k) {
    auto rec = ckpt_detail::take_record(is);
    Param<float>* p = params->find(rec.name);
    if (!p) throw IoError("checkpoint record for unknown tensor: " + rec.name);
    if (rec.data.size() != p->value.size())
      throw IoError("checkpoint size mismatch for " + rec.name);
    p->value = std::move(rec.data);
  }
  const auto n_opt = ckpt_detail::take<std::uint32_t>(is);
  if (opt) opt->init(*params);
  for (std::uint32_t k = 0; k < n_opt; ++k) {
    auto rec = ckpt_detail::take_record(is);
    if (!opt) continue;
    const bool is_m = rec.name.rfind("adam.m.", 0) == 0;
    const bool is_v = rec.name.rfind("adam.v.", 0) == 0;
    if (!is_m && !is_v) throw IoError("unexpected optimizer record: " + rec.name);
    const std::string pname = rec.name.substr(7);
    for (std::size_t pi = 0; pi < params->size(); ++pi) {
      if ((*params)[pi].name == pname) {
        auto& dst = is_m ? opt->m[pi] : opt->v[pi];
        if (dst.size() != rec.data.size()) throw IoError("optimizer record size: " + rec.name);
        dst = std::move(rec.data);
        break;
      }
    }
  }
  const auto opt_step = ckpt_detail::take<std::uint64_t>(is);
  if (opt) opt->step_count = static_cast<long>(opt_step);
  return ckpt_detail::take<std::uint64_t>(is);
}

}  // namespace eqtrack::diff
