#pragma once

#include <cstdint>

#include "quad/tensor.hpp"

namespace quad {

// Affine per-tensor quantization: q = clip(round(t / scale) + zero_point),
// t' = scale * (q - zero_point). Rounding is half away from zero.
struct QuantParams {
  float scale = 1.0f;
  int32_t zero_point = 0;
  int bits = 8;
  bool is_signed = true;

  int32_t qmin() const { return is_signed ? -(1 << (bits - 1)) : 0; }
  int32_t qmax() const { return is_signed ? (1 << (bits - 1)) - 1 : (1 << bits) - 1; }
  // Real interval that maps inside [qmin, qmax] without saturating.
  float range_lo() const;
  float range_hi() const;
  // Smallest integer dtype holding [qmin, qmax].
  DType storage_dtype() const;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

QuantParams ComputeQuantParams(double t_min, double t_max, int bits, bool is_signed);

int32_t QuantizeValue(float t, const QuantParams& p);
float DequantizeValue(int32_t q, const QuantParams& p);
inline float FakeQuantValue(float t, const QuantParams& p) {
  return DequantizeValue(QuantizeValue(t, p), p);
}

Tensor Quantize(const Tensor& t, const QuantParams& p);
Tensor Dequantize(const Tensor& q, const QuantParams& p);
Tensor FakeQuant(const Tensor& t, const QuantParams& p);

namespace kernels {
void Quantize(ConstTensorView x, const QuantParams& p, TensorView out);
void Dequantize(ConstTensorView q, const QuantParams& p, TensorView out);
}  // namespace kernels

}  // namespace quad
