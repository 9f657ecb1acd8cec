#pragma once

#include "amg/common.hpp"

#include <cstddef>

namespace amg::kernels {

// Dense row-major f32 matmul kernels. Every output element is accumulated
// sequentially in double by exactly one thread, so the parallel variants are
// bit-identical to the serial references at any thread count.

// C[n x m] = A[n x k] * B[k x m]
void matmul_serial(const real* a, const real* b, real* c, int n, int k, int m);
void matmul(const real* a, const real* b, real* c, int n, int k, int m);

// C[n x m] = A[n x k] * B[m x k]^T
void matmul_bt_serial(const real* a, const real* b, real* c, int n, int k, int m);
void matmul_bt(const real* a, const real* b, real* c, int n, int k, int m);

// C[k x m] = A[n x k]^T * B[n x m]
void matmul_at_serial(const real* a, const real* b, real* c, int n, int k, int m);
void matmul_at(const real* a, const real* b, real* c, int n, int k, int m);

}  // namespace amg::kernels
