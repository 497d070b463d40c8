#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace quad {

enum class DType : uint8_t { kF32 = 0, kI8 = 1, kI16 = 2, kI32 = 3 };

size_t DTypeSize(DType dtype);
const char* DTypeName(DType dtype);

using Shape = std::vector<int64_t>;

int64_t NumElements(std::span<const int64_t> shape);
std::string ShapeString(std::span<const int64_t> shape);

// Read-only window over a dense row-major buffer owned elsewhere.
struct ConstTensorView {
  std::span<const int64_t> shape;
  DType dtype = DType::kF32;
  const void* data = nullptr;

  int64_t numel() const { return NumElements(shape); }
  template <typename T>
  std::span<const T> as() const {
    return {static_cast<const T*>(data), static_cast<size_t>(numel())};
  }
};

struct TensorView {
  std::span<const int64_t> shape;
  DType dtype = DType::kF32;
  void* data = nullptr;

  int64_t numel() const { return NumElements(shape); }
  template <typename T>
  std::span<T> as() const {
    return {static_cast<T*>(data), static_cast<size_t>(numel())};
  }
  operator ConstTensorView() const { return {shape, dtype, data}; }
};

class Tensor {
 public:
  Tensor() : Tensor(Shape{1}, DType::kF32) {}
  Tensor(Shape shape, DType dtype);

  static Tensor F32(Shape shape, std::vector<float> values);
  static Tensor Zeros(Shape shape) { return Tensor(std::move(shape), DType::kF32); }
  static Tensor Filled(Shape shape, float value);
  static Tensor Identity(int64_t n);
  static Tensor Scalar(float value) { return F32({1}, {value}); }
  // Integer tensor of the given integer dtype, values range-checked.
  static Tensor Ints(Shape shape, DType dtype, std::span<const int32_t> values);

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  int64_t numel() const { return NumElements(shape_); }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  size_t rank() const { return shape_.size(); }
  size_t nbytes() const { return static_cast<size_t>(numel()) * DTypeSize(dtype_); }

  std::span<float> f32();
  std::span<const float> f32() const;

  template <typename T>
  std::span<T> as() {
    return std::get<std::vector<T>>(storage_);
  }
  template <typename T>
  std::span<const T> as() const {
    return std::get<std::vector<T>>(storage_);
  }

  // Element i widened to int32 regardless of integer dtype.
  int32_t int_at(int64_t i) const;
  void set_int(int64_t i, int32_t value);

  const void* raw() const;
  void* raw();
  std::span<const std::byte> bytes() const {
    return {static_cast<const std::byte*>(raw()), nbytes()};
  }

  ConstTensorView view() const { return {shape_, dtype_, raw()}; }
  TensorView mutable_view() { return {shape_, dtype_, raw()}; }

  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  using Storage = std::variant<std::vector<float>, std::vector<int8_t>, std::vector<int16_t>,
                               std::vector<int32_t>>;
  Shape shape_;
  DType dtype_;
  Storage storage_;
};

// Value equality on fp32 tensors: same shape and every element compares ==.
bool ExactlyEqual(const Tensor& a, const Tensor& b);
// max|a-b| / max(max|b|, floor)
double MaxRelativeError(const Tensor& a, const Tensor& b, double floor = 1e-12);

// Kernels over views. Output views must be preallocated with the right shape.
// Accumulation is fp32 in strict sequential order so results are reproducible.
namespace kernels {
void MatMul(ConstTensorView a, ConstTensorView b, TensorView out);
void Add(ConstTensorView a, ConstTensorView b, TensorView out);
void Mul(ConstTensorView a, ConstTensorView b, TensorView out);
void Relu(ConstTensorView x, TensorView out);
void Silu(ConstTensorView x, TensorView out);
void Scale(ConstTensorView x, float factor, TensorView out);
// Concatenate along axis 0.
void ConcatRows(ConstTensorView a, ConstTensorView b, TensorView out);
// NCHW input, OIHW weight, zero padding, no dilation.
void Conv2d(ConstTensorView x, ConstTensorView w, int stride, int padding, TensorView out);
}  // namespace kernels

enum class ElementwiseOp { kAdd, kMul };
enum class ActivationKind : uint8_t { kRelu = 0, kSilu = 1 };

const char* ActivationName(ActivationKind kind);

Tensor MatMul(const Tensor& a, const Tensor& b);
Tensor Elementwise(const Tensor& a, const Tensor& b, ElementwiseOp op);
Tensor Activation(const Tensor& x, ActivationKind kind);
Tensor Scale(const Tensor& x, float factor);
Tensor ConcatRows(const Tensor& a, const Tensor& b);
Tensor Conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
Shape Conv2dOutputShape(std::span<const int64_t> x, std::span<const int64_t> w, int stride,
                        int padding);

struct Histogram {
  int bin_count = 0;
  double range_lo = 0.0;
  double range_hi = 1.0;
  std::vector<uint64_t> counts;

  uint64_t total() const;
};

Histogram MakeHistogram(const Tensor& x, int bins, double lo, double hi);
Histogram MakeHistogram(std::span<const float> values, int bins, double lo, double hi);

double CosineSimilarity(const Tensor& a, const Tensor& b);
double MeanSquaredError(const Tensor& a, const Tensor& b);

constexpr double kPsnrCapDb = 99.0;
double Psnr(const Tensor& ref, const Tensor& test, double peak);

// QTNS container: "QTNS", u16 version, u8 dtype, u8 rank, rank x u32 extents, raw payload.
std::vector<std::byte> EncodeQtns(const Tensor& t);
Tensor DecodeQtns(std::span<const std::byte> bytes);
void WriteQtns(const std::filesystem::path& path, const Tensor& t);
Tensor ReadQtns(const std::filesystem::path& path);

}  // namespace quad
