#pragma once
// Volume file I/O.
//
// Native format: `<name>.vhdr` (JSON header) next to `<name>.vraw`
// (nx*ny*nz little-endian float32, x-fastest). Single-file NIfTI-1 float32
// images can be imported.

#include <nullfwe/volume.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace nullfwe {

namespace detail {

inline std::filesystem::path volume_base(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  if (ext == ".vhdr" || ext == ".vraw") return p.parent_path() / p.stem();
  return p;
}

inline std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return std::filesystem::path(base.string() + suffix);
}

template <class T>
T byteswap_value(T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline std::uint32_t to_le32(float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  if constexpr (std::endian::native == std::endian::big) u = byteswap_value(u);
  return u;
}

inline float from_le32(std::uint32_t u) {
  if constexpr (std::endian::native == std::endian::big) u = byteswap_value(u);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline GridMeta parse_volume_header(const std::string& text) {
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("header", std::string("volume header is not valid JSON: ") + e.what());
  }
  if (!h.is_object()) throw ParseError("header", "volume header must be a JSON object");
  auto triple = [&](const char* key, auto& out) {
    if (!h.contains(key) || !h[key].is_array() || h[key].size() != 3)
      throw ParseError(key, std::string("header field '") + key + "' must be a 3-element array");
    for (std::size_t i = 0; i < 3; ++i) {
      if (!h[key][i].is_number()) throw ParseError(key, std::string("header field '") + key + "' must be numeric");
      out[i] = h[key][i].get<std::remove_reference_t<decltype(out[i])>>();
    }
  };
  std::array<long long, 3> dims{};
  std::array<double, 3> vox{};
  triple("dims", dims);
  triple("voxel_mm", vox);
  if (!h.contains("dtype") || h["dtype"] != "f32le") throw ParseError("dtype", "header field 'dtype' must be \"f32le\"");
  if (!h.contains("order") || h["order"] != "x-fastest")
    throw ParseError("order", "header field 'order' must be \"x-fastest\"");
  for (auto d : dims)
    if (d < 1 || d > (1LL << 20)) throw ParseError("dims", "header field 'dims' must hold positive sizes");
  for (auto v : vox)
    if (!(v > 0.0) || !std::isfinite(v)) throw ParseError("voxel_mm", "header field 'voxel_mm' must be positive");
  return GridMeta{static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
                  vox[0], vox[1], vox[2]};
}

inline std::string volume_header_json(const GridMeta& g) {
  nlohmann::json h;
  h["dims"] = {g.nx, g.ny, g.nz};
  h["voxel_mm"] = {g.dx, g.dy, g.dz};
  h["dtype"] = "f32le";
  h["order"] = "x-fastest";
  return h.dump();
}

/// Writes `<base>.vhdr` and `<base>.vraw`. `path` may carry either extension.
inline void write_volume(const Volume& vol, const std::filesystem::path& path) {
  const auto base = detail::volume_base(path);
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  {
    std::ofstream hdr(detail::with_suffix(base, ".vhdr"), std::ios::binary | std::ios::trunc);
    if (!hdr) throw Error("cannot write " + detail::with_suffix(base, ".vhdr").string());
    hdr << volume_header_json(vol.meta()) << '\n';
  }
  std::vector<std::uint32_t> payload(vol.size());
  for (std::size_t i = 0; i < vol.size(); ++i) payload[i] = detail::to_le32(static_cast<float>(vol[i]));
  std::ofstream raw(detail::with_suffix(base, ".vraw"), std::ios::binary | std::ios::trunc);
  if (!raw) throw Error("cannot write " + detail::with_suffix(base, ".vraw").string());
  raw.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
}

inline Volume read_volume(const std::filesystem::path& path) {
  const auto base = detail::volume_base(path);
  const GridMeta g = parse_volume_header(detail::read_file(detail::with_suffix(base, ".vhdr")));
  const std::string raw = detail::read_file(detail::with_suffix(base, ".vraw"));
  if (raw.size() != g.size() * 4)
    throw CorruptionError("payload holds " + std::to_string(raw.size() / 4) + " values (" +
                          std::to_string(raw.size()) + " bytes) but header declares " + std::to_string(g.size()));
  std::vector<double> data(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, raw.data() + 4 * i, 4);
    data[i] = detail::from_le32(u);
  }
  Volume v(g, std::move(data));
  if (!v.all_finite()) throw CorruptionError("payload contains non-finite values");
  return v;
}

/// Single-file NIfTI-1 (magic "n+1", datatype FLOAT32). Returns every frame
/// of the image; a 3D image yields one volume.
inline std::vector<Volume> read_nifti(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() < 352) throw ParseError("sizeof_hdr", "file too short for a NIfTI-1 header");
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (detail::byteswap_value(sizeof_hdr) != 348) throw ParseError("sizeof_hdr", "sizeof_hdr is not 348");
    swap = true;
  }
  auto get = [&](std::size_t off, auto v) {
    std::memcpy(&v, bytes.data() + off, sizeof(v));
    return swap ? detail::byteswap_value(v) : v;
  };
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
    throw ParseError("magic", "only single-file NIfTI-1 (magic n+1) is supported");
  std::array<std::int16_t, 8> dim{};
  for (std::size_t i = 0; i < 8; ++i) dim[i] = get(40 + 2 * i, std::int16_t{});
  const auto datatype = get(70, std::int16_t{});
  if (datatype != 16) throw ParseError("datatype", "only FLOAT32 (datatype 16) NIfTI images are supported");
  std::array<float, 8> pixdim{};
  for (std::size_t i = 0; i < 8; ++i) pixdim[i] = get(76 + 4 * i, float{});
  const float vox_offset = get(108, float{});
  float slope = get(112, float{});
  const float inter = get(116, float{});
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;
  if (dim[0] < 3 || dim[0] > 7) throw ParseError("dim", "NIfTI dim[0] must be between 3 and 7");
  GridMeta g{dim[1], dim[2], dim[3], std::abs(pixdim[1]), std::abs(pixdim[2]), std::abs(pixdim[3])};
  if (g.nx < 1 || g.ny < 1 || g.nz < 1) throw ParseError("dim", "NIfTI spatial dims must be positive");
  if (!(g.dx > 0) || !(g.dy > 0) || !(g.dz > 0)) throw ParseError("pixdim", "NIfTI voxel sizes must be positive");
  const int frames = dim[0] >= 4 && dim[4] > 1 ? dim[4] : 1;
  const std::size_t offset = static_cast<std::size_t>(vox_offset);
  const std::size_t need = offset + g.size() * static_cast<std::size_t>(frames) * 4;
  if (bytes.size() < need) throw CorruptionError("NIfTI payload shorter than declared dimensions");
  std::vector<Volume> out;
  for (int f = 0; f < frames; ++f) {
    std::vector<double> data(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      float v;
      std::memcpy(&v, bytes.data() + offset + 4 * (static_cast<std::size_t>(f) * g.size() + i), 4);
      if (swap) v = detail::byteswap_value(v);
      data[i] = static_cast<double>(v) * slope + inter;
    }
    out.emplace_back(g, std::move(data));
  }
  return out;
}

/// Dispatches on extension: `.nii` goes through the NIfTI importer (first
/// frame), anything else through the native format.
inline Volume load_volume(const std::filesystem::path& path) {
  if (path.extension() == ".nii") return read_nifti(path).front();
  return read_volume(path);
}

}  // namespace nullfwe
