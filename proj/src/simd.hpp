#pragma once

// Eight doubles processed as one unit. Every lane performs an exact fused
// multiply-add, so results are identical across the three implementations.

#include <cmath>

#if defined(__AVX512F__)
#include <immintrin.h>
#elif defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace voxlrp::simd {

#if defined(__AVX512F__)

struct D8 {
  __m512d v;
  static D8 zero() { return {_mm512_setzero_pd()}; }
  static D8 load(const double* p) { return {_mm512_loadu_pd(p)}; }
  static D8 broadcast(double x) { return {_mm512_set1_pd(x)}; }
  void store(double* p) const { _mm512_storeu_pd(p, v); }
};
inline D8 fma(D8 a, D8 b, D8 c) { return {_mm512_fmadd_pd(a.v, b.v, c.v)}; }

#elif defined(__AVX2__) && defined(__FMA__)

struct D8 {
  __m256d lo, hi;
  static D8 zero() { return {_mm256_setzero_pd(), _mm256_setzero_pd()}; }
  static D8 load(const double* p) { return {_mm256_loadu_pd(p), _mm256_loadu_pd(p + 4)}; }
  static D8 broadcast(double x) { return {_mm256_set1_pd(x), _mm256_set1_pd(x)}; }
  void store(double* p) const {
    _mm256_storeu_pd(p, lo);
    _mm256_storeu_pd(p + 4, hi);
  }
};
inline D8 fma(D8 a, D8 b, D8 c) { return {_mm256_fmadd_pd(a.lo, b.lo, c.lo), _mm256_fmadd_pd(a.hi, b.hi, c.hi)}; }

#else

struct D8 {
  double v[8];
  static D8 zero() { return {{0, 0, 0, 0, 0, 0, 0, 0}}; }
  static D8 load(const double* p) {
    D8 r;
    for (int i = 0; i < 8; ++i) r.v[i] = p[i];
    return r;
  }
  static D8 broadcast(double x) { return {{x, x, x, x, x, x, x, x}}; }
  void store(double* p) const {
    for (int i = 0; i < 8; ++i) p[i] = v[i];
  }
};
inline D8 fma(D8 a, D8 b, D8 c) {
  D8 r;
  for (int i = 0; i < 8; ++i) r.v[i] = std::fma(a.v[i], b.v[i], c.v[i]);
  return r;
}

#endif

}  // namespace voxlrp::simd
