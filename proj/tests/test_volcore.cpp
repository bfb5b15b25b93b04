#include <nullfwe/cluster.hpp>
#include <nullfwe/rng.hpp>
#include <nullfwe/smooth.hpp>
#include <nullfwe/volume.hpp>
#include <nullfwe/volume_io.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

using namespace nullfwe;
namespace fs = std::filesystem;

namespace {

GridMeta cube(int n, double d = 1.0) { return GridMeta{n, n, n, d, d, d}; }

// Plain BFS over all voxels with a visited grid, independent of ClusterScanner.
std::vector<std::size_t> oracle_sizes(const Volume& v, double u, int conn) {
  const GridMeta& g = v.meta();
  std::vector<char> seen(g.size(), 0);
  std::vector<std::size_t> sizes;
  for (int z = 0; z < g.nz; ++z)
    for (int y = 0; y < g.ny; ++y)
      for (int x = 0; x < g.nx; ++x) {
        if (seen[g.index(x, y, z)] || v.at(x, y, z) < u) continue;
        std::deque<std::array<int, 3>> q{{x, y, z}};
        seen[g.index(x, y, z)] = 1;
        std::size_t n = 0;
        while (!q.empty()) {
          auto [a, b, c] = q.front();
          q.pop_front();
          ++n;
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int m = std::abs(dx) + std::abs(dy) + std::abs(dz);
                if (m == 0 || (conn == 6 && m > 1) || (conn == 18 && m > 2)) continue;
                const int xx = a + dx, yy = b + dy, zz = c + dz;
                if (xx < 0 || yy < 0 || zz < 0 || xx >= g.nx || yy >= g.ny || zz >= g.nz) continue;
                const auto j = g.index(xx, yy, zz);
                if (seen[j] || v[j] < u) continue;
                seen[j] = 1;
                q.push_back({xx, yy, zz});
              }
        }
        sizes.push_back(n);
      }
  std::sort(sizes.begin(), sizes.end());
  return sizes;
}

std::vector<std::size_t> sizes_of(const ClusterTable& t) {
  std::vector<std::size_t> s;
  for (const auto& c : t.clusters) s.push_back(c.size_voxels);
  std::sort(s.begin(), s.end());
  return s;
}

Volume random_volume(const GridMeta& g, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd;
  Volume v(g);
  for (auto& x : v.values()) x = nd(rng);
  return v;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("nullfwe-test-" + name + "-" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(GridMeta, RejectsBadGeometry) {
  EXPECT_THROW(Volume(GridMeta{0, 1, 1}), DomainError);
  EXPECT_THROW(Volume(GridMeta{1, 1, 1, -1.0, 1.0, 1.0}), DomainError);
  EXPECT_THROW(Volume(cube(2), std::vector<double>(7)), DimensionError);
}

TEST(GridMeta, IndexIsXFastest) {
  const GridMeta g{3, 4, 5};
  EXPECT_EQ(g.index(1, 0, 0), 1u);
  EXPECT_EQ(g.index(0, 1, 0), 3u);
  EXPECT_EQ(g.index(0, 0, 1), 12u);
  EXPECT_EQ(g.coords(g.index(2, 3, 4)), (std::array<int, 3>{2, 3, 4}));
}

TEST(ConnectedComponents, IsolatedVoxel) {
  Volume v(cube(5));
  v.at(2, 2, 2) = 1.5;
  const auto t = connected_components(v, Mask(cube(5)), 0.5);
  ASSERT_EQ(t.clusters.size(), 1u);
  EXPECT_EQ(t.clusters[0].size_voxels, 1u);
  EXPECT_EQ(t.clusters[0].peak_index, cube(5).index(2, 2, 2));
}

TEST(ConnectedComponents, CornerContactDependsOnConnectivity) {
  Volume v(cube(4));
  v.at(1, 1, 1) = 2.0;
  v.at(2, 2, 2) = 2.0;
  const Mask m(cube(4));
  EXPECT_EQ(connected_components(v, m, 1.0, Connectivity::corners).clusters.size(), 1u);
  EXPECT_EQ(connected_components(v, m, 1.0, Connectivity::edges).clusters.size(), 2u);
  EXPECT_EQ(connected_components(v, m, 1.0, Connectivity::faces).clusters.size(), 2u);
}

TEST(ConnectedComponents, MatchesFloodFillOracle) {
  for (int conn : {6, 18, 26}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const Volume v = random_volume(cube(8), seed);
      const auto t = connected_components(v, Mask(cube(8)), 1.0, connectivity_from_int(conn));
      EXPECT_EQ(sizes_of(t), oracle_sizes(v, 1.0, conn)) << "conn " << conn << " seed " << seed;
    }
  }
}

TEST(ConnectedComponents, SizesSumToSupraCount) {
  const Volume v = random_volume(GridMeta{9, 7, 6}, 11);
  const Mask m = ellipsoid_mask(v.meta(), 1.0);
  const auto t = connected_components(v, m, 0.8, Connectivity::edges, Tail::both);
  std::size_t pos = 0, neg = 0, supra_pos = 0, supra_neg = 0;
  for (const auto& c : t.clusters) (c.sign > 0 ? pos : neg) += c.size_voxels;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!m[i]) continue;
    supra_pos += v[i] >= 0.8;
    supra_neg += v[i] <= -0.8;
  }
  EXPECT_EQ(pos, supra_pos);
  EXPECT_EQ(neg, supra_neg);
}

TEST(ConnectedComponents, TailsNeverMerge) {
  Volume v(cube(4));
  v.at(1, 1, 1) = 3.0;
  v.at(2, 1, 1) = -3.0;
  const auto t = connected_components(v, Mask(cube(4)), 1.0, Connectivity::corners, Tail::both);
  ASSERT_EQ(t.clusters.size(), 2u);
  EXPECT_NE(t.clusters[0].sign, t.clusters[1].sign);
}

TEST(ConnectedComponents, InvariantToVisitOrder) {
  const Volume v = random_volume(cube(8), 3);
  ClusterScanner s(v.meta(), Connectivity::edges);
  std::vector<std::uint32_t> supra;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] >= 0.5) supra.push_back(static_cast<std::uint32_t>(i));
  auto collect = [&](const std::vector<std::uint32_t>& order) {
    std::vector<std::size_t> out;
    s.components(order, [&](std::span<const std::uint32_t> m) { out.push_back(m.size()); });
    std::sort(out.begin(), out.end());
    return out;
  };
  const auto a = collect(supra);
  std::reverse(supra.begin(), supra.end());
  std::shuffle(supra.begin(), supra.end(), make_rng(9));
  EXPECT_EQ(a, collect(supra));
}

TEST(ConnectedComponents, Errors) {
  Volume v(cube(4));
  EXPECT_THROW(connected_components(v, Mask(cube(5)), 1.0), DimensionError);
  EXPECT_THROW(connected_components(v, Mask(cube(4), false), 1.0), PreconditionError);
  EXPECT_THROW(connected_components(v, Mask(cube(4)), std::nan("")), DomainError);
}

TEST(GaussianSmooth, ZeroFwhmIsIdentity) {
  const Volume v = random_volume(cube(6), 5);
  const Volume s = gaussian_smooth(v, 0.0);
  EXPECT_EQ(v.values(), s.values());
  EXPECT_THROW(gaussian_smooth(v, -1.0), DomainError);
}

TEST(GaussianSmooth, ImpulseCentreMatchesClosedForm) {
  const GridMeta g = cube(31, 2.0);
  Volume v(g);
  v.at(15, 15, 15) = 1.0;
  const double fwhm = 2.0 * g.dx;
  const Volume s = gaussian_smooth(v, fwhm);
  const double sigma_vox = fwhm / (2.0 * std::sqrt(2.0 * std::numbers::ln2)) / g.dx;
  // Unit-sum sampled kernel, so the centre weight is 1 / sum_k exp(-k^2 / 2 sigma^2) per axis.
  double z = 0.0;
  for (int k = -15; k <= 15; ++k) z += std::exp(-0.5 * k * k / (sigma_vox * sigma_vox));
  const double k0 = 1.0 / z;
  EXPECT_NEAR(s.at(15, 15, 15), k0 * k0 * k0, 1e-12);
  // and close to the continuous density
  const double c0 = 1.0 / (sigma_vox * std::sqrt(2.0 * std::numbers::pi));
  EXPECT_NEAR(s.at(15, 15, 15), c0 * c0 * c0, 1e-5 * c0 * c0 * c0);
}

TEST(GaussianSmooth, PreservesSumForInteriorSupport) {
  const GridMeta g = cube(40, 3.0);
  Volume v(g);
  Rng rng = make_rng(4);
  std::normal_distribution<double> nd;
  for (int z = 17; z < 23; ++z)
    for (int y = 17; y < 23; ++y)
      for (int x = 17; x < 23; ++x) v.at(x, y, z) = nd(rng);
  const Volume s = gaussian_smooth(v, 8.0);
  double a = 0, b = 0, absa = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    a += v[i];
    b += s[i];
    absa += std::abs(v[i]);
  }
  EXPECT_NEAR(a, b, 1e-6 * absa);
}

TEST(GaussianSmooth, CommutesWithTranslationInInterior) {
  const GridMeta g = cube(40);
  Volume a(g), b(g);
  Rng rng = make_rng(8);
  std::normal_distribution<double> nd;
  for (int z = 15; z < 21; ++z)
    for (int y = 15; y < 21; ++y)
      for (int x = 15; x < 21; ++x) {
        const double r = nd(rng);
        a.at(x, y, z) = r;
        b.at(x + 3, y + 2, z + 1) = r;
      }
  const Volume sa = gaussian_smooth(a, 4.0), sb = gaussian_smooth(b, 4.0);
  double worst = 0;
  for (int z = 8; z < 28; ++z)
    for (int y = 8; y < 28; ++y)
      for (int x = 8; x < 28; ++x) worst = std::max(worst, std::abs(sa.at(x, y, z) - sb.at(x + 3, y + 2, z + 1)));
  EXPECT_LT(worst, 1e-6);
}

TEST(GaussianSmooth, MaskedEdgeIsUnbiased) {
  const GridMeta g = cube(12);
  Volume v(g, 2.5);
  const Mask m = ellipsoid_mask(g, 0.9);
  const Volume s = gaussian_smooth(v, 3.0, m);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (m[i]) EXPECT_NEAR(s[i], 2.5, 1e-12);
    else EXPECT_EQ(s[i], 0.0);
  }
}

TEST(VolumeIo, RoundTripIsExact) {
  const auto dir = temp_dir("io");
  const GridMeta g{4, 4, 4, 3.13, 3.13, 3.6};
  Volume v(g);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(0.37 * static_cast<double>(i) - 5.0);
  write_volume(v, dir / "vol");
  const Volume r = read_volume(dir / "vol.vhdr");
  EXPECT_EQ(r.values(), v.values());
  EXPECT_EQ(r.meta().dx, 3.13);
  EXPECT_EQ(r.meta().dz, 3.6);
  fs::remove_all(dir);
}

TEST(VolumeIo, ShortPayloadIsCorruption) {
  const auto dir = temp_dir("short");
  write_volume(Volume(cube(2)), dir / "v");
  fs::resize_file(dir / "v.vraw", 7 * 4);
  EXPECT_THROW(read_volume(dir / "v"), CorruptionError);
  fs::remove_all(dir);
}

TEST(VolumeIo, MalformedHeaderNamesField) {
  try {
    parse_volume_header(R"({"dims":[2,2],"voxel_mm":[1,1,1],"dtype":"f32le","order":"x-fastest"})");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.field, "dims");
  }
  try {
    parse_volume_header(R"({"dims":[2,2,2],"voxel_mm":[1,1,1],"dtype":"f64","order":"x-fastest"})");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.field, "dtype");
  }
}

TEST(VolumeIo, ReadsSingleFileNifti) {
  const auto dir = temp_dir("nii");
  std::string bytes(352, '\0');
  auto put = [&](std::size_t off, auto v) { std::memcpy(bytes.data() + off, &v, sizeof v); };
  put(0, std::int32_t{348});
  const std::int16_t dim[8] = {3, 3, 2, 2, 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(40 + 2 * static_cast<std::size_t>(i), dim[i]);
  put(70, std::int16_t{16});
  put(72, std::int16_t{32});
  const float pix[8] = {1, 3.13f, 3.13f, 3.6f, 2, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(76 + 4 * static_cast<std::size_t>(i), pix[i]);
  put(108, 352.0f);
  std::memcpy(bytes.data() + 344, "n+1\0", 4);
  for (int i = 0; i < 12; ++i) {
    const float f = static_cast<float>(i) * 0.5f;
    bytes.append(reinterpret_cast<const char*>(&f), 4);
  }
  std::ofstream(dir / "a.nii", std::ios::binary) << bytes;
  const Volume v = load_volume(dir / "a.nii");
  EXPECT_EQ(v.meta().nx, 3);
  EXPECT_FLOAT_EQ(static_cast<float>(v.meta().dx), 3.13f);
  EXPECT_DOUBLE_EQ(v[11], 5.5);
  fs::remove_all(dir);
}

TEST(Masks, EllipsoidFillAndTube) {
  const GridMeta g{48, 56, 48, 3, 3, 3};
  const Mask brain = ellipsoid_mask(g, 1.05);
  const double fill = static_cast<double>(brain.count()) / static_cast<double>(g.size());
  EXPECT_GT(fill, 0.55);
  EXPECT_LT(fill, 0.65);
  const Mask tube = sinus_tube_mask(brain, 5, 6);
  EXPECT_GT(tube.count(), 100u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (tube[i]) {
      EXPECT_TRUE(brain[i]);
    }
  }
}
