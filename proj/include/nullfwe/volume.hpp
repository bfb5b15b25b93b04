#pragma once
// Core value types: voxel grid geometry, 3D volumes, masks and 4D datasets.
// Linear voxel order is x-fastest: index = x + nx * (y + ny * z).

#include <nullfwe/error.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace nullfwe {

struct GridMeta {
  int nx = 1, ny = 1, nz = 1;
  double dx = 1.0, dy = 1.0, dz = 1.0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  std::array<int, 3> dims() const noexcept { return {nx, ny, nz}; }
  std::array<double, 3> voxel_mm() const noexcept { return {dx, dy, dz}; }
  double voxel_volume_mm3() const noexcept { return dx * dy * dz; }
  double min_edge_mm() const noexcept { return std::min({dx, dy, dz}); }

  std::size_t index(int x, int y, int z) const noexcept {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }
  std::array<int, 3> coords(std::size_t i) const noexcept {
    const auto sx = static_cast<std::size_t>(nx), sy = static_cast<std::size_t>(ny);
    return {static_cast<int>(i % sx), static_cast<int>((i / sx) % sy), static_cast<int>(i / (sx * sy))};
  }

  void validate() const {
    if (nx < 1 || ny < 1 || nz < 1)
      throw DomainError("grid dimensions must be positive");
    if (!(dx > 0.0) || !(dy > 0.0) || !(dz > 0.0) || !std::isfinite(dx) || !std::isfinite(dy) ||
        !std::isfinite(dz))
      throw DomainError("voxel edge lengths must be positive and finite");
  }

  friend bool operator==(const GridMeta&, const GridMeta&) = default;
};

inline void require_same_grid(const GridMeta& a, const GridMeta& b, const char* what) {
  if (!(a == b)) throw DimensionError(std::string("grid mismatch: ") + what);
}

class Volume {
 public:
  Volume() = default;
  explicit Volume(GridMeta meta, double fill = 0.0) : meta_(meta), data_(meta.size(), fill) {
    meta_.validate();
  }
  Volume(GridMeta meta, std::vector<double> data) : meta_(meta), data_(std::move(data)) {
    meta_.validate();
    if (data_.size() != meta_.size())
      throw DimensionError("volume data length " + std::to_string(data_.size()) +
                           " does not match grid size " + std::to_string(meta_.size()));
  }

  const GridMeta& meta() const noexcept { return meta_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(int x, int y, int z) noexcept { return data_[meta_.index(x, y, z)]; }
  double at(int x, int y, int z) const noexcept { return data_[meta_.index(x, y, z)]; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  GridMeta meta_{};
  std::vector<double> data_;
};

class Mask {
 public:
  Mask() = default;
  explicit Mask(GridMeta meta, bool fill = true) : meta_(meta), inside_(meta.size(), fill ? 1 : 0) {
    meta_.validate();
  }
  Mask(GridMeta meta, std::vector<std::uint8_t> inside) : meta_(meta), inside_(std::move(inside)) {
    meta_.validate();
    if (inside_.size() != meta_.size()) throw DimensionError("mask length does not match grid size");
  }

  const GridMeta& meta() const noexcept { return meta_; }
  std::size_t size() const noexcept { return inside_.size(); }
  bool operator[](std::size_t i) const noexcept { return inside_[i] != 0; }
  void set(std::size_t i, bool v) noexcept { inside_[i] = v ? 1 : 0; }
  std::span<const std::uint8_t> raw() const noexcept { return inside_; }

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(inside_.begin(), inside_.end(), std::uint8_t{1}));
  }
  bool empty() const noexcept { return count() == 0; }

  /// Grid indices of in-mask voxels, ascending.
  std::vector<std::uint32_t> indices() const {
    std::vector<std::uint32_t> out;
    out.reserve(count());
    for (std::size_t i = 0; i < inside_.size(); ++i)
      if (inside_[i]) out.push_back(static_cast<std::uint32_t>(i));
    return out;
  }

  void require_nonempty() const {
    if (empty()) throw PreconditionError("analysis mask has no voxels");
  }

 private:
  GridMeta meta_{};
  std::vector<std::uint8_t> inside_;
};

/// Ellipsoid centred in the grid with semi-axes `fill_scale * n/2` per axis,
/// clipped to the grid.
inline Mask ellipsoid_mask(const GridMeta& g, double fill_scale = 1.0) {
  Mask m(g, false);
  const double cx = 0.5 * (g.nx - 1), cy = 0.5 * (g.ny - 1), cz = 0.5 * (g.nz - 1);
  const double ax = fill_scale * 0.5 * g.nx, ay = fill_scale * 0.5 * g.ny, az = fill_scale * 0.5 * g.nz;
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        const double ex = (x - cx) / ax, ey = (y - cy) / ay, ez = (z - cz) / az;
        if (ex * ex + ey * ey + ez * ez <= 1.0) m.set(g.index(x, y, z), true);
      }
  return m;
}

/// Tube along y at the mid-sagittal plane, `depth_vox` below the top of
/// `brain` (largest z inside the mask), radius `radius_vox`; intersected with
/// `brain`. Stands in for a superior sagittal sinus locus.
inline Mask sinus_tube_mask(const Mask& brain, double radius_vox, double depth_vox) {
  const GridMeta& g = brain.meta();
  Mask m(g, false);
  const int xc = g.nx / 2;
  int ztop = -1;
  for (int z = g.nz - 1; z >= 0 && ztop < 0; --z)
    for (int y = 0; y < g.ny && ztop < 0; ++y)
      if (brain[g.index(xc, y, z)]) ztop = z;
  if (ztop < 0) return m;
  const double zc = ztop - depth_vox;
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        const double ddx = x - xc, ddz = z - zc;
        const std::size_t i = g.index(x, y, z);
        if (brain[i] && ddx * ddx + ddz * ddz <= radius_vox * radius_vox) m.set(i, true);
      }
  return m;
}

/// 4D dataset stored frame-major: frame t occupies [t*N, (t+1)*N).
class Dataset4D {
 public:
  Dataset4D() = default;
  Dataset4D(GridMeta meta, int time_points, double tr_s)
      : meta_(meta), T_(time_points), tr_s_(tr_s), data_(meta.size() * static_cast<std::size_t>(time_points), 0.0) {
    meta_.validate();
    if (time_points < 2) throw DomainError("a 4D dataset needs at least 2 time points");
    if (!(tr_s > 0.0)) throw DomainError("repetition time must be positive");
  }

  const GridMeta& meta() const noexcept { return meta_; }
  int time_points() const noexcept { return T_; }
  double tr_s() const noexcept { return tr_s_; }
  std::size_t voxels() const noexcept { return meta_.size(); }

  std::span<double> frame(int t) noexcept {
    return {data_.data() + static_cast<std::size_t>(t) * voxels(), voxels()};
  }
  std::span<const double> frame(int t) const noexcept {
    return {data_.data() + static_cast<std::size_t>(t) * voxels(), voxels()};
  }
  double& at(int t, std::size_t v) noexcept { return data_[static_cast<std::size_t>(t) * voxels() + v]; }
  double at(int t, std::size_t v) const noexcept { return data_[static_cast<std::size_t>(t) * voxels() + v]; }

  Volume volume(int t) const {
    auto f = frame(t);
    return Volume(meta_, std::vector<double>(f.begin(), f.end()));
  }
  void set_volume(int t, const Volume& v) {
    require_same_grid(meta_, v.meta(), "set_volume");
    std::copy(v.data().begin(), v.data().end(), frame(t).begin());
  }

  std::span<double> raw() noexcept { return data_; }
  std::span<const double> raw() const noexcept { return data_; }

  /// Time series of voxel v.
  std::vector<double> series(std::size_t v) const {
    std::vector<double> s(static_cast<std::size_t>(T_));
    for (int t = 0; t < T_; ++t) s[static_cast<std::size_t>(t)] = at(t, v);
    return s;
  }

 private:
  GridMeta meta_{};
  int T_ = 0;
  double tr_s_ = 1.0;
  std::vector<double> data_;
};

/// Stack volumes that share a grid into a dataset (subjects as "time points"
/// for group-level residual analyses).
inline Dataset4D stack_volumes(std::span<const Volume> vols, double tr_s = 1.0) {
  if (vols.size() < 2) throw PreconditionError("need at least 2 volumes to stack");
  Dataset4D ds(vols.front().meta(), static_cast<int>(vols.size()), tr_s);
  for (std::size_t t = 0; t < vols.size(); ++t) ds.set_volume(static_cast<int>(t), vols[t]);
  return ds;
}

}  // namespace nullfwe
