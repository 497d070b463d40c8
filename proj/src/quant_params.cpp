#include "quad/quant_params.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "quad/error.hpp"

namespace quad {

namespace {

void CheckParams(const QuantParams& p) {
  if (p.bits < 2 || p.bits > 16) throw Error(ErrorKind::kParameter, "bits must be in [2,16]");
  if (!(p.scale > 0.0f) || !std::isfinite(p.scale)) {
    throw Error(ErrorKind::kParameter, "scale must be positive and finite");
  }
  if (p.zero_point < p.qmin() || p.zero_point > p.qmax()) {
    throw Error(ErrorKind::kParameter, "zero point outside [qmin, qmax]");
  }
}

int32_t ReadInt(ConstTensorView v, int64_t i) {
  switch (v.dtype) {
    case DType::kI8: return v.as<int8_t>()[i];
    case DType::kI16: return v.as<int16_t>()[i];
    case DType::kI32: return v.as<int32_t>()[i];
    case DType::kF32: break;
  }
  throw Error(ErrorKind::kShape, "dequantize expects an integer tensor");
}

void WriteInt(TensorView v, int64_t i, int32_t q) {
  switch (v.dtype) {
    case DType::kI8: v.as<int8_t>()[i] = static_cast<int8_t>(q); return;
    case DType::kI16: v.as<int16_t>()[i] = static_cast<int16_t>(q); return;
    case DType::kI32: v.as<int32_t>()[i] = q; return;
    case DType::kF32: break;
  }
  throw Error(ErrorKind::kShape, "quantize expects an integer output");
}

}  // namespace

float QuantParams::range_lo() const { return DequantizeValue(qmin(), *this); }
float QuantParams::range_hi() const { return DequantizeValue(qmax(), *this); }

DType QuantParams::storage_dtype() const {
  if (qmin() >= -128 && qmax() <= 127) return DType::kI8;
  if (qmin() >= -32768 && qmax() <= 32767) return DType::kI16;
  return DType::kI32;
}

QuantParams ComputeQuantParams(double t_min, double t_max, int bits, bool is_signed) {
  if (t_min > t_max) throw Error(ErrorKind::kRange, "t_min > t_max");
  if (bits < 2 || bits > 16) throw Error(ErrorKind::kParameter, "bits must be in [2,16]");
  QuantParams p;
  p.bits = bits;
  p.is_signed = is_signed;
  if (t_min == t_max) return p;  // scale 1, zero point 0
  // Zero must be representable: z is confined to [qmin, qmax].
  t_min = std::min(t_min, 0.0);
  t_max = std::max(t_max, 0.0);
  const double levels = static_cast<double>(p.qmax()) - p.qmin();
  const double exact = (t_max - t_min) / levels;
  // Round the fp32 scale up so the grid spans the whole range.
  p.scale = static_cast<float>(exact);
  if (static_cast<double>(p.scale) < exact) p.scale = std::nextafter(p.scale, INFINITY);
  // t_min / s evaluated as t_min * levels / range so exact ties stay exact.
  const double zp = p.qmin() - std::round(t_min * levels / (t_max - t_min));
  p.zero_point = static_cast<int32_t>(std::clamp<double>(zp, p.qmin(), p.qmax()));
  return p;
}

int32_t QuantizeValue(float t, const QuantParams& p) {
  const double r = std::round(static_cast<double>(t) / static_cast<double>(p.scale));
  const double q = std::clamp(r + p.zero_point, static_cast<double>(p.qmin()),
                              static_cast<double>(p.qmax()));
  return static_cast<int32_t>(q);
}

float DequantizeValue(int32_t q, const QuantParams& p) {
  return static_cast<float>(static_cast<double>(p.scale) *
                            static_cast<double>(q - p.zero_point));
}

namespace kernels {

void Quantize(ConstTensorView x, const QuantParams& p, TensorView out) {
  if (x.dtype != DType::kF32) throw Error(ErrorKind::kShape, "quantize expects fp32 input");
  auto src = x.as<float>();
  for (size_t i = 0; i < src.size(); ++i) WriteInt(out, static_cast<int64_t>(i), QuantizeValue(src[i], p));
}

void Dequantize(ConstTensorView q, const QuantParams& p, TensorView out) {
  auto dst = out.as<float>();
  const int64_t n = q.numel();
  for (int64_t i = 0; i < n; ++i) {
    const int32_t v = ReadInt(q, i);
    if (v < p.qmin() || v > p.qmax()) {
      throw Error(ErrorKind::kIntegrity,
                  "quantized element " + std::to_string(v) + " outside [qmin, qmax]");
    }
    dst[i] = DequantizeValue(v, p);
  }
}

}  // namespace kernels

Tensor Quantize(const Tensor& t, const QuantParams& p) {
  CheckParams(p);
  Tensor out(t.shape(), p.storage_dtype());
  kernels::Quantize(t.view(), p, out.mutable_view());
  return out;
}

Tensor Dequantize(const Tensor& q, const QuantParams& p) {
  CheckParams(p);
  Tensor out(q.shape(), DType::kF32);
  kernels::Dequantize(q.view(), p, out.mutable_view());
  return out;
}

Tensor FakeQuant(const Tensor& t, const QuantParams& p) {
  CheckParams(p);
  Tensor out(t.shape(), DType::kF32);
  auto src = t.f32();
  auto dst = out.f32();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = FakeQuantValue(src[i], p);
  return out;
}

}  // namespace quad
