#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sirenloc/config.hpp"
#include "sirenloc/core.hpp"
#include "sirenloc/dsp.hpp"
#include "sirenloc/model.hpp"
#include "sirenloc/tensor.hpp"

namespace sirenloc::ckpt {

// Layout (little endian):
//   "SLCKPT01" | u32 version | u64 config_len | config json
//   u64 tensor_count | per tensor: u64 name_len | name | u64 ndim | u64 dims... | f64 values...
inline constexpr char kMagic[8] = {'S', 'L', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
  nn::ModelConfig config;
  nn::Params params;
};

namespace detail {
using dsp::detail::get_le;
using dsp::detail::put_le;

inline void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint64_t limit) {
  const auto n = get_le<std::uint64_t>(is);
  if (n > limit) throw InvalidInput("checkpoint: corrupt string length");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw InvalidInput("checkpoint: truncated");
  return s;
}
}  // namespace detail

inline void save(const std::filesystem::path& path, const nn::ModelConfig& cfg, const nn::Params& params) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot write " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    detail::put_le<std::uint32_t>(os, kVersion);
    detail::put_string(os, config::to_json(cfg).dump());
    detail::put_le<std::uint64_t>(os, params.count());
    for (const auto& t : params.tensors()) {
      detail::put_string(os, t.name);
      detail::put_le<std::uint64_t>(os, t.shape.size());
      for (auto d : t.shape) detail::put_le<std::uint64_t>(os, d);
      for (double v : t.values) detail::put_le<double>(os, v);
    }
    if (!os) throw RuntimeFailure("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint and checks the tensors against the layout implied by
/// the stored configuration.
inline Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidInput("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) throw InvalidInput("not a checkpoint: " + path.string());
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kVersion) throw InvalidInput("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.config = config::model_from_json(config::json::parse(detail::get_string(is, 1 << 24)));
  } catch (const config::json::exception& e) {
    throw InvalidInput(std::string("checkpoint config: ") + e.what());
  }
  nn::validate(ck.config);
  const auto count = detail::get_le<std::uint64_t>(is);
  if (count > 100000) throw InvalidInput("checkpoint: corrupt tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = detail::get_string(is, 4096);
    const auto ndim = detail::get_le<std::uint64_t>(is);
    if (ndim > 8) throw InvalidInput("checkpoint: corrupt rank");
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(is);
    const std::size_t idx = ck.params.add(std::move(name), shape);
    for (double& v : ck.params[idx].values) v = detail::get_le<double>(is);
    if (!is) throw InvalidInput("checkpoint: truncated tensor data");
  }
  nn::SirenNet(ck.config).check_params(ck.params);
  return ck;
}

}  // namespace sirenloc::ckpt
