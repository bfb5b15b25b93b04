#pragma once
// Supra-threshold connected-component clustering.

#include <nullfwe/volume.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace nullfwe {

enum class Connectivity : int { faces = 6, edges = 18, corners = 26 };
enum class Tail { positive, negative, both };

inline Connectivity connectivity_from_int(int c) {
  switch (c) {
    case 6: return Connectivity::faces;
    case 18: return Connectivity::edges;
    case 26: return Connectivity::corners;
    default: throw DomainError("connectivity must be 6, 18 or 26");
  }
}

struct Cluster {
  std::size_t size_voxels = 0;
  double peak_value = 0.0;
  std::size_t peak_index = 0;
  int sign = +1;  // +1 for the positive tail, -1 for the negative tail
  std::optional<double> p_fwe;
  std::vector<std::uint32_t> voxels;
};

struct ClusterTable {
  double cdt_p = 0.0;
  double threshold_u = 0.0;
  Connectivity connectivity = Connectivity::corners;
  std::vector<Cluster> clusters;

  std::size_t max_size() const noexcept {
    std::size_t m = 0;
    for (const auto& c : clusters) m = std::max(m, c.size_voxels);
    return m;
  }
};

inline std::vector<std::array<int, 3>> neighbor_offsets(Connectivity c) {
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int n = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (n == 0) continue;
        if (c == Connectivity::faces && n > 1) continue;
        if (c == Connectivity::edges && n > 2) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

/// Reusable labeller over a fixed grid. Scratch state is reset after every
/// call, so one instance serves many thresholded maps (permutations, Monte
/// Carlo draws) without reallocating. Not thread-safe; use one per worker.
class ClusterScanner {
 public:
  ClusterScanner(const GridMeta& grid, Connectivity conn)
      : grid_(grid), offsets_(neighbor_offsets(conn)), state_(grid.size(), 0) {}

  const GridMeta& grid() const noexcept { return grid_; }

  /// Calls `emit(members)` once per connected component of `supra`
  /// (grid indices, any order, no duplicates).
  template <class Emit>
  void components(std::span<const std::uint32_t> supra, Emit&& emit) {
    for (auto i : supra) state_[i] = 1;
    for (auto seed : supra) {
      if (state_[seed] != 1) continue;
      members_.clear();
      state_[seed] = 2;
      members_.push_back(seed);
      for (std::size_t head = 0; head < members_.size(); ++head) {
        const auto c = grid_.coords(members_[head]);
        for (const auto& o : offsets_) {
          const int x = c[0] + o[0], y = c[1] + o[1], z = c[2] + o[2];
          if (x < 0 || y < 0 || z < 0 || x >= grid_.nx || y >= grid_.ny || z >= grid_.nz) continue;
          const auto j = static_cast<std::uint32_t>(grid_.index(x, y, z));
          if (state_[j] == 1) {
            state_[j] = 2;
            members_.push_back(j);
          }
        }
      }
      emit(std::span<const std::uint32_t>(members_));
    }
    for (auto i : supra) state_[i] = 0;
  }

  std::size_t max_cluster(std::span<const std::uint32_t> supra) {
    std::size_t best = 0;
    components(supra, [&](std::span<const std::uint32_t> m) { best = std::max(best, m.size()); });
    return best;
  }

 private:
  GridMeta grid_;
  std::vector<std::array<int, 3>> offsets_;
  std::vector<std::uint8_t> state_;
  std::vector<std::uint32_t> members_;
};

namespace detail {
inline void collect_clusters(ClusterScanner& scanner, const Volume& stat,
                             std::span<const std::uint32_t> supra, int sign,
                             std::vector<Cluster>& out) {
  scanner.components(supra, [&](std::span<const std::uint32_t> m) {
    Cluster c;
    c.size_voxels = m.size();
    c.sign = sign;
    c.voxels.assign(m.begin(), m.end());
    std::sort(c.voxels.begin(), c.voxels.end());
    c.peak_index = c.voxels.front();
    for (auto v : c.voxels)
      if (sign * stat[v] > sign * stat[c.peak_index]) c.peak_index = v;
    c.peak_value = stat[c.peak_index];
    out.push_back(std::move(c));
  });
}
}  // namespace detail

/// Clusters of in-mask voxels with stat >= u (positive tail) and/or
/// stat <= -u (negative tail). The two tails are never merged. Clusters are
/// returned largest first.
inline ClusterTable connected_components(const Volume& stat, const Mask& mask, double threshold_u,
                                         Connectivity conn = Connectivity::corners,
                                         Tail tail = Tail::positive, double cdt_p = 0.0) {
  require_same_grid(stat.meta(), mask.meta(), "statistic and mask");
  mask.require_nonempty();
  if (!std::isfinite(threshold_u)) throw DomainError("cluster-forming threshold must be finite");

  std::vector<std::uint32_t> pos, neg;
  for (std::size_t i = 0; i < stat.size(); ++i) {
    if (!mask[i]) continue;
    if (tail != Tail::negative && stat[i] >= threshold_u) pos.push_back(static_cast<std::uint32_t>(i));
    if (tail != Tail::positive && stat[i] <= -threshold_u &&
        !(tail == Tail::both && stat[i] >= threshold_u))
      neg.push_back(static_cast<std::uint32_t>(i));
  }

  ClusterTable table;
  table.cdt_p = cdt_p;
  table.threshold_u = threshold_u;
  table.connectivity = conn;
  ClusterScanner scanner(stat.meta(), conn);
  detail::collect_clusters(scanner, stat, pos, +1, table.clusters);
  detail::collect_clusters(scanner, stat, neg, -1, table.clusters);
  std::stable_sort(table.clusters.begin(), table.clusters.end(),
                   [](const Cluster& a, const Cluster& b) { return a.size_voxels > b.size_voxels; });
  return table;
}

}  // namespace nullfwe
