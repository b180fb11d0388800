#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "boxprior/error.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

// On-disk volume: `<stem>.json` header {"dims":[S,H,W],"spacing":[sz,sy,sx],"dtype":"f32"}
// and `<stem>.raw` holding little-endian float32 in (z, y, x) row-major order.

inline std::filesystem::path raw_path_for(const std::filesystem::path& header) {
  auto raw = header;
  raw.replace_extension(".raw");
  return raw;
}

inline void save_volume(const VoxelGrid& grid, const std::filesystem::path& header_path) {
  const Dims3& d = grid.dims();
  nlohmann::json header = {{"dims", {d.s, d.h, d.w}},
                           {"spacing", {grid.spacing()[0], grid.spacing()[1], grid.spacing()[2]}},
                           {"dtype", "f32"}};
  {
    std::ofstream out(header_path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + header_path.string());
    out << header.dump() << '\n';
  }
  std::vector<char> bytes(grid.size() * 4);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(grid[i]));
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  const auto raw = raw_path_for(header_path);
  std::ofstream out(raw, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + raw.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline VoxelGrid load_volume(const std::filesystem::path& header_path, FieldKind kind = FieldKind::Scalar) {
  std::ifstream in(header_path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + header_path.string());
  nlohmann::json header;
  try {
    in >> header;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Io, header_path.string() + ": " + e.what());
  }
  if (header.value("dtype", "") != "f32") throw Error(ErrorCode::Io, header_path.string() + ": dtype must be f32");
  const auto dims_json = header.at("dims");
  const auto spacing_json = header.at("spacing");
  const Dims3 dims{dims_json.at(0).get<int>(), dims_json.at(1).get<int>(), dims_json.at(2).get<int>()};
  const Spacing3 spacing{spacing_json.at(0).get<double>(), spacing_json.at(1).get<double>(),
                         spacing_json.at(2).get<double>()};

  const auto raw = raw_path_for(header_path);
  std::ifstream rin(raw, std::ios::binary);
  if (!rin) throw Error(ErrorCode::Io, "cannot open " + raw.string());
  std::vector<char> bytes(dims.count() * 4);
  rin.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (rin.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw Error(ErrorCode::Io, raw.string() + ": expected " + std::to_string(bytes.size()) + " bytes");
  }
  std::vector<double> data(dims.count());
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    data[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return VoxelGrid(dims, std::move(data), kind, spacing);
}

}  // namespace boxprior
