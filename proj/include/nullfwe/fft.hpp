#pragma once
// Thin RAII layer over FFTW's real 3D transforms.

#include <nullfwe/volume.hpp>

#include <fftw3.h>

#include <complex>
#include <memory>
#include <mutex>
#include <span>

namespace nullfwe {

namespace detail {
// FFTW planning is not thread-safe; execution on distinct buffers is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
struct FftwFree {
  void operator()(void* p) const noexcept { fftw_free(p); }
};
}  // namespace detail

/// Forward r2c / inverse c2r pair on one grid. Transforms are unnormalised.
/// Each instance owns its buffers; use one instance per thread.
class RealFft3 {
 public:
  explicit RealFft3(const GridMeta& g)
      : grid_(g),
        n_real_(g.size()),
        n_complex_(static_cast<std::size_t>(g.nz) * g.ny * (g.nx / 2 + 1)),
        real_(static_cast<double*>(fftw_malloc(sizeof(double) * n_real_))),
        spec_(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n_complex_))) {
    std::lock_guard lock(detail::fftw_planner_mutex());
    // FFTW is row-major; x-fastest storage means dims are (nz, ny, nx).
    fwd_ = fftw_plan_dft_r2c_3d(g.nz, g.ny, g.nx, real_.get(), spec_.get(), FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_3d(g.nz, g.ny, g.nx, spec_.get(), real_.get(), FFTW_ESTIMATE);
  }
  ~RealFft3() {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }
  RealFft3(const RealFft3&) = delete;
  RealFft3& operator=(const RealFft3&) = delete;

  const GridMeta& grid() const noexcept { return grid_; }
  std::span<double> real() noexcept { return {real_.get(), n_real_}; }
  std::span<std::complex<double>> spectrum() noexcept {
    return {reinterpret_cast<std::complex<double>*>(spec_.get()), n_complex_};
  }
  std::size_t half_nx() const noexcept { return static_cast<std::size_t>(grid_.nx / 2 + 1); }

  void forward() noexcept { fftw_execute(fwd_); }
  /// Destroys the spectrum buffer (FFTW c2r semantics).
  void inverse() noexcept { fftw_execute(inv_); }

 private:
  GridMeta grid_;
  std::size_t n_real_, n_complex_;
  std::unique_ptr<double, detail::FftwFree> real_;
  std::unique_ptr<fftw_complex, detail::FftwFree> spec_;
  fftw_plan fwd_{};
  fftw_plan inv_{};
};

}  // namespace nullfwe
