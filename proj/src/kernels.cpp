#include "amg/kernels.hpp"

namespace amg::kernels {

namespace {
// Parallelizing tiny matrices costs more than it saves.
constexpr long kParallelThreshold = 16 * 1024;
}  // namespace

void matmul_serial(const real* a, const real* b, real* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += static_cast<double>(a[i * k + t]) * b[t * m + j];
      c[i * m + j] = static_cast<real>(acc);
    }
  }
}

void matmul(const real* a, const real* b, real* c, int n, int k, int m) {
  if (static_cast<long>(n) * k * m < kParallelThreshold) {
    matmul_serial(a, b, c, n, k, m);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += static_cast<double>(a[i * k + t]) * b[t * m + j];
      c[i * m + j] = static_cast<real>(acc);
    }
  }
}

void matmul_bt_serial(const real* a, const real* b, real* c, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += static_cast<double>(a[i * k + t]) * b[j * k + t];
      c[i * m + j] = static_cast<real>(acc);
    }
  }
}

void matmul_bt(const real* a, const real* b, real* c, int n, int k, int m) {
  if (static_cast<long>(n) * k * m < kParallelThreshold) {
    matmul_bt_serial(a, b, c, n, k, m);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += static_cast<double>(a[i * k + t]) * b[j * k + t];
      c[i * m + j] = static_cast<real>(acc);
    }
  }
}

void matmul_at_serial(const real* a, const real* b, real* c, int n, int k, int m) {
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = 0; t < n; ++t) acc += static_cast<double>(a[t * k + i]) * b[t * m + j];
      c[i * m + j] = static_cast<real>(acc);
    }
  }
}

void matmul_at(const real* a, const real* b, real* c, int n, int k, int m) {
  if (static_cast<long>(n) * k * m < kParallelThreshold) {
    matmul_at_serial(a, b, c, n, k, m);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int t = 0; t < n; ++t) acc += static_cast<double>(a[t * k + i]) * b[t * m + j];
      c[i * m + j] = static_cast<real>(acc);
    }
  }
}

}  // namespace amg::kernels
