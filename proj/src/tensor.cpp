#include "quad/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "quad/error.hpp"
#include "quad/rng.hpp"

namespace quad {

const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kRange: return "range error";
    case ErrorKind::kCycle: return "cycle";
    case ErrorKind::kDangling: return "dangling tensor";
    case ErrorKind::kUndefined: return "undefined";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kIntegrity: return "integrity error";
    case ErrorKind::kCoverage: return "profile coverage error";
    case ErrorKind::kBinding: return "binding error";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

size_t DTypeSize(DType dtype) {
  switch (dtype) {
    case DType::kF32: return 4;
    case DType::kI8: return 1;
    case DType::kI16: return 2;
    case DType::kI32: return 4;
  }
  throw Error(ErrorKind::kFormat, "unknown dtype");
}

const char* DTypeName(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "fp32";
    case DType::kI8: return "i8";
    case DType::kI16: return "i16";
    case DType::kI32: return "i32";
  }
  return "?";
}

int64_t NumElements(std::span<const int64_t> shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string ShapeString(std::span<const int64_t> shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void CheckShape(const Shape& shape) {
  if (shape.empty()) throw Error(ErrorKind::kShape, "tensor rank must be >= 1");
  for (int64_t e : shape) {
    if (e <= 0) throw Error(ErrorKind::kShape, "non-positive extent in " + ShapeString(shape));
  }
}

bool SameShape(std::span<const int64_t> a, std::span<const int64_t> b) {
  return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

void RequireF32(ConstTensorView v, const char* op) {
  if (v.dtype != DType::kF32) throw Error(ErrorKind::kShape, std::string(op) + " expects fp32");
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  CheckShape(shape_);
  const auto n = static_cast<size_t>(numel());
  switch (dtype_) {
    case DType::kF32: storage_ = std::vector<float>(n, 0.0f); break;
    case DType::kI8: storage_ = std::vector<int8_t>(n, 0); break;
    case DType::kI16: storage_ = std::vector<int16_t>(n, 0); break;
    case DType::kI32: storage_ = std::vector<int32_t>(n, 0); break;
  }
}

Tensor Tensor::F32(Shape shape, std::vector<float> values) {
  Tensor t(std::move(shape), DType::kF32);
  if (values.size() != static_cast<size_t>(t.numel())) {
    throw Error(ErrorKind::kShape, "buffer length " + std::to_string(values.size()) +
                                       " does not match shape " + ShapeString(t.shape()));
  }
  t.storage_ = std::move(values);
  return t;
}

Tensor Tensor::Filled(Shape shape, float value) {
  Tensor t(std::move(shape), DType::kF32);
  std::fill(t.f32().begin(), t.f32().end(), value);
  return t;
}

Tensor Tensor::Identity(int64_t n) {
  Tensor t({n, n}, DType::kF32);
  for (int64_t i = 0; i < n; ++i) t.f32()[i * n + i] = 1.0f;
  return t;
}

Tensor Tensor::Ints(Shape shape, DType dtype, std::span<const int32_t> values) {
  if (dtype == DType::kF32) throw Error(ErrorKind::kParameter, "Ints needs an integer dtype");
  Tensor t(std::move(shape), dtype);
  if (values.size() != static_cast<size_t>(t.numel())) {
    throw Error(ErrorKind::kShape, "buffer length does not match shape");
  }
  for (size_t i = 0; i < values.size(); ++i) t.set_int(static_cast<int64_t>(i), values[i]);
  return t;
}

std::span<float> Tensor::f32() {
  if (dtype_ != DType::kF32) throw Error(ErrorKind::kShape, "tensor is not fp32");
  return std::get<std::vector<float>>(storage_);
}

std::span<const float> Tensor::f32() const {
  if (dtype_ != DType::kF32) throw Error(ErrorKind::kShape, "tensor is not fp32");
  return std::get<std::vector<float>>(storage_);
}

int32_t Tensor::int_at(int64_t i) const {
  switch (dtype_) {
    case DType::kI8: return std::get<std::vector<int8_t>>(storage_)[i];
    case DType::kI16: return std::get<std::vector<int16_t>>(storage_)[i];
    case DType::kI32: return std::get<std::vector<int32_t>>(storage_)[i];
    case DType::kF32: break;
  }
  throw Error(ErrorKind::kShape, "int_at on fp32 tensor");
}

void Tensor::set_int(int64_t i, int32_t value) {
  auto store = [&](auto& vec) {
    using T = typename std::decay_t<decltype(vec)>::value_type;
    if (value < std::numeric_limits<T>::min() || value > std::numeric_limits<T>::max()) {
      throw Error(ErrorKind::kRange, "value " + std::to_string(value) + " does not fit " +
                                         DTypeName(dtype_));
    }
    vec[i] = static_cast<T>(value);
  };
  switch (dtype_) {
    case DType::kI8: store(std::get<std::vector<int8_t>>(storage_)); return;
    case DType::kI16: store(std::get<std::vector<int16_t>>(storage_)); return;
    case DType::kI32: store(std::get<std::vector<int32_t>>(storage_)); return;
    case DType::kF32: break;
  }
  throw Error(ErrorKind::kShape, "set_int on fp32 tensor");
}

const void* Tensor::raw() const {
  return std::visit([](const auto& v) -> const void* { return v.data(); }, storage_);
}

void* Tensor::raw() {
  return std::visit([](auto& v) -> void* { return v.data(); }, storage_);
}

Tensor Tensor::reshaped(Shape shape) const {
  Tensor t = *this;
  CheckShape(shape);
  if (NumElements(shape) != numel()) throw Error(ErrorKind::kShape, "reshape changes numel");
  t.shape_ = std::move(shape);
  return t;
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ && a.dtype_ == b.dtype_ && a.storage_ == b.storage_;
}

bool ExactlyEqual(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  if (a.dtype() != DType::kF32) return a == b;
  auto x = a.f32();
  auto y = b.f32();
  for (size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] == y[i])) return false;
  }
  return true;
}

double MaxRelativeError(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) throw Error(ErrorKind::kShape, "MaxRelativeError shape mismatch");
  double diff = 0.0;
  double mag = 0.0;
  auto x = a.f32();
  auto y = b.f32();
  for (size_t i = 0; i < x.size(); ++i) {
    diff = std::max(diff, std::fabs(static_cast<double>(x[i]) - y[i]));
    mag = std::max(mag, std::fabs(static_cast<double>(y[i])));
  }
  return diff / std::max(mag, floor);
}

namespace kernels {

void MatMul(ConstTensorView a, ConstTensorView b, TensorView out) {
  RequireF32(a, "matmul");
  RequireF32(b, "matmul");
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
    throw Error(ErrorKind::kShape, "matmul " + ShapeString(a.shape) + " by " + ShapeString(b.shape));
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  auto lhs = a.as<float>();
  auto rhs = b.as<float>();
  auto dst = out.as<float>();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int64_t p = 0; p < k; ++p) acc += lhs[i * k + p] * rhs[p * n + j];
      dst[i * n + j] = acc;
    }
  }
}

namespace {
template <typename Fn>
void Binary(ConstTensorView a, ConstTensorView b, TensorView out, const char* name, Fn fn) {
  RequireF32(a, name);
  RequireF32(b, name);
  if (!SameShape(a.shape, b.shape)) {
    throw Error(ErrorKind::kShape,
                std::string(name) + " " + ShapeString(a.shape) + " vs " + ShapeString(b.shape));
  }
  auto x = a.as<float>();
  auto y = b.as<float>();
  auto dst = out.as<float>();
  for (size_t i = 0; i < x.size(); ++i) dst[i] = fn(x[i], y[i]);
}
}  // namespace

void Add(ConstTensorView a, ConstTensorView b, TensorView out) {
  Binary(a, b, out, "add", [](float x, float y) { return x + y; });
}

void Mul(ConstTensorView a, ConstTensorView b, TensorView out) {
  Binary(a, b, out, "mul", [](float x, float y) { return x * y; });
}

void Relu(ConstTensorView x, TensorView out) {
  RequireF32(x, "relu");
  auto src = x.as<float>();
  auto dst = out.as<float>();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
}

void Silu(ConstTensorView x, TensorView out) {
  RequireF32(x, "silu");
  auto src = x.as<float>();
  auto dst = out.as<float>();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / (1.0f + std::exp(-src[i]));
}

void Scale(ConstTensorView x, float factor, TensorView out) {
  RequireF32(x, "scale");
  auto src = x.as<float>();
  auto dst = out.as<float>();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * factor;
}

void ConcatRows(ConstTensorView a, ConstTensorView b, TensorView out) {
  RequireF32(a, "concat");
  RequireF32(b, "concat");
  if (a.shape.size() != b.shape.size() || a.shape.empty() ||
      !std::equal(a.shape.begin() + 1, a.shape.end(), b.shape.begin() + 1, b.shape.end())) {
    throw Error(ErrorKind::kShape, "concat " + ShapeString(a.shape) + " with " + ShapeString(b.shape));
  }
  auto x = a.as<float>();
  auto y = b.as<float>();
  auto dst = out.as<float>();
  std::copy(x.begin(), x.end(), dst.begin());
  std::copy(y.begin(), y.end(), dst.begin() + static_cast<ptrdiff_t>(x.size()));
}

void Conv2d(ConstTensorView x, ConstTensorView w, int stride, int padding, TensorView out) {
  RequireF32(x, "conv2d");
  RequireF32(w, "conv2d");
  const Shape os = Conv2dOutputShape(x.shape, w.shape, stride, padding);
  const int64_t batch = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int64_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  const int64_t oh = os[2], ow = os[3];
  auto src = x.as<float>();
  auto ker = w.as<float>();
  auto dst = out.as<float>();
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t o = 0; o < cout; ++o) {
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          float acc = 0.0f;
          for (int64_t c = 0; c < cin; ++c) {
            for (int64_t ky = 0; ky < kh; ++ky) {
              const int64_t iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t ix = ox * stride - padding + kx;
                if (ix < 0 || ix >= wd) continue;
                acc += src[((n * cin + c) * h + iy) * wd + ix] * ker[((o * cin + c) * kh + ky) * kw + kx];
              }
            }
          }
          dst[((n * cout + o) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
}

}  // namespace kernels

const char* ActivationName(ActivationKind kind) {
  return kind == ActivationKind::kRelu ? "relu" : "silu";
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorKind::kShape, "matmul " + ShapeString(a.shape()) + " by " + ShapeString(b.shape()));
  }
  Tensor out = Tensor::Zeros({a.dim(0), b.dim(1)});
  kernels::MatMul(a.view(), b.view(), out.mutable_view());
  return out;
}

Tensor Elementwise(const Tensor& a, const Tensor& b, ElementwiseOp op) {
  Tensor out(a.shape(), DType::kF32);
  if (op == ElementwiseOp::kAdd) {
    kernels::Add(a.view(), b.view(), out.mutable_view());
  } else {
    kernels::Mul(a.view(), b.view(), out.mutable_view());
  }
  return out;
}

Tensor Activation(const Tensor& x, ActivationKind kind) {
  Tensor out(x.shape(), DType::kF32);
  if (kind == ActivationKind::kRelu) {
    kernels::Relu(x.view(), out.mutable_view());
  } else {
    kernels::Silu(x.view(), out.mutable_view());
  }
  return out;
}

Tensor Scale(const Tensor& x, float factor) {
  Tensor out(x.shape(), DType::kF32);
  kernels::Scale(x.view(), factor, out.mutable_view());
  return out;
}

Tensor ConcatRows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank()) throw Error(ErrorKind::kShape, "concat rank mismatch");
  Shape s = a.shape();
  s[0] += b.dim(0);
  Tensor out(s, DType::kF32);
  kernels::ConcatRows(a.view(), b.view(), out.mutable_view());
  return out;
}

Shape Conv2dOutputShape(std::span<const int64_t> x, std::span<const int64_t> w, int stride,
                        int padding) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1] || stride < 1 || padding < 0) {
    throw Error(ErrorKind::kShape, "conv2d " + ShapeString(x) + " with " + ShapeString(w));
  }
  const int64_t oh = (x[2] + 2 * padding - w[2]) / stride + 1;
  const int64_t ow = (x[3] + 2 * padding - w[3]) / stride + 1;
  if (oh <= 0 || ow <= 0) throw Error(ErrorKind::kShape, "conv2d kernel larger than input");
  return {x[0], w[0], oh, ow};
}

Tensor Conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  Tensor out(Conv2dOutputShape(x.shape(), w.shape(), stride, padding), DType::kF32);
  kernels::Conv2d(x.view(), w.view(), stride, padding, out.mutable_view());
  return out;
}

uint64_t Histogram::total() const {
  uint64_t n = 0;
  for (uint64_t c : counts) n += c;
  return n;
}

Histogram MakeHistogram(std::span<const float> values, int bins, double lo, double hi) {
  if (bins < 2) throw Error(ErrorKind::kRange, "histogram needs at least 2 bins");
  if (!(lo < hi)) throw Error(ErrorKind::kRange, "degenerate histogram range");
  Histogram h{bins, lo, hi, std::vector<uint64_t>(static_cast<size_t>(bins), 0)};
  const double width = (hi - lo) / bins;
  for (float v : values) {
    const double c = std::clamp(static_cast<double>(v), lo, hi);
    auto idx = static_cast<int64_t>((c - lo) / width);
    idx = std::clamp<int64_t>(idx, 0, bins - 1);
    ++h.counts[static_cast<size_t>(idx)];
  }
  return h;
}

Histogram MakeHistogram(const Tensor& x, int bins, double lo, double hi) {
  return MakeHistogram(x.f32(), bins, lo, hi);
}

double CosineSimilarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw Error(ErrorKind::kShape, "cosine_similarity shape mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  auto x = a.f32();
  auto y = b.f32();
  for (size_t i = 0; i < x.size(); ++i) {
    dot += static_cast<double>(x[i]) * y[i];
    na += static_cast<double>(x[i]) * x[i];
    nb += static_cast<double>(y[i]) * y[i];
  }
  if (na == 0.0 && nb == 0.0) throw Error(ErrorKind::kUndefined, "both vectors have zero norm");
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double MeanSquaredError(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw Error(ErrorKind::kShape, "mse shape mismatch");
  double acc = 0.0;
  auto x = a.f32();
  auto y = b.f32();
  for (size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - y[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

double Psnr(const Tensor& ref, const Tensor& test, double peak) {
  if (!(peak > 0.0)) throw Error(ErrorKind::kRange, "psnr peak must be positive");
  const double mse = MeanSquaredError(ref, test);
  if (mse == 0.0) return kPsnrCapDb;
  return 10.0 * std::log10(peak * peak / mse);
}

namespace {

constexpr char kQtnsMagic[4] = {'Q', 'T', 'N', 'S'};

void PutLe(std::vector<std::byte>& out, uint64_t value, int width) {
  for (int i = 0; i < width; ++i) out.push_back(static_cast<std::byte>((value >> (8 * i)) & 0xFF));
}

uint64_t GetLe(std::span<const std::byte> in, size_t& pos, int width) {
  if (pos + static_cast<size_t>(width) > in.size()) throw Error(ErrorKind::kFormat, "truncated QTNS");
  uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<uint64_t>(in[pos + i]) << (8 * i);
  pos += static_cast<size_t>(width);
  return v;
}

}  // namespace

std::vector<std::byte> EncodeQtns(const Tensor& t) {
  std::vector<std::byte> out;
  for (char c : kQtnsMagic) out.push_back(static_cast<std::byte>(c));
  PutLe(out, 1, 2);
  PutLe(out, static_cast<uint8_t>(t.dtype()), 1);
  PutLe(out, t.rank(), 1);
  for (int64_t e : t.shape()) PutLe(out, static_cast<uint64_t>(e), 4);
  // Element-wise little-endian so the file is host-independent.
  const size_t width = DTypeSize(t.dtype());
  auto raw = t.bytes();
  if constexpr (std::endian::native == std::endian::little) {
    out.insert(out.end(), raw.begin(), raw.end());
  } else {
    for (size_t i = 0; i < raw.size(); i += width) {
      for (size_t b = width; b-- > 0;) out.push_back(raw[i + b]);
    }
  }
  return out;
}

Tensor DecodeQtns(std::span<const std::byte> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kQtnsMagic, 4) != 0) {
    throw Error(ErrorKind::kFormat, "bad QTNS magic");
  }
  size_t pos = 4;
  if (GetLe(bytes, pos, 2) != 1) throw Error(ErrorKind::kFormat, "unsupported QTNS version");
  const auto code = GetLe(bytes, pos, 1);
  if (code > 3) throw Error(ErrorKind::kFormat, "bad QTNS dtype code");
  const auto rank = GetLe(bytes, pos, 1);
  Shape shape;
  for (uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(GetLe(bytes, pos, 4)));
  Tensor t(shape, static_cast<DType>(code));
  if (bytes.size() - pos != t.nbytes()) throw Error(ErrorKind::kFormat, "QTNS payload size mismatch");
  const size_t width = DTypeSize(t.dtype());
  auto* dst = static_cast<std::byte*>(t.raw());
  for (size_t i = 0; i < t.nbytes(); i += width) {
    for (size_t b = 0; b < width; ++b) {
      const size_t src = std::endian::native == std::endian::little ? b : width - 1 - b;
      dst[i + b] = bytes[pos + i + src];
    }
  }
  return t;
}

void WriteQtns(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = EncodeQtns(t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor ReadQtns(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return DecodeQtns(std::as_bytes(std::span(buf)));
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * 3.14159265358979323846 * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

uint64_t MixSeed(uint64_t seed, uint64_t salt) {
  Rng r(seed ^ (salt * 0xD1B54A32D192ED03ull));
  return r.next_u64();
}

Tensor RandomUniform(Shape shape, Rng& rng, float lo, float hi) {
  Tensor t(std::move(shape), DType::kF32);
  for (float& v : t.f32()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

Tensor RandomNormal(Shape shape, Rng& rng, float stddev) {
  Tensor t(std::move(shape), DType::kF32);
  for (float& v : t.f32()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

}  // namespace quad
