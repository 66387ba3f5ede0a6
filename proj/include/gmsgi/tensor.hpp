#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gmsgi {

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// All dims must be positive; zero-size tensors are rejected everywhere.
inline std::size_t shape_numel(const Shape& s) {
  if (s.empty()) throw ShapeError("empty shape");
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dim in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// Dense row-major tensor (last axis fastest). Value semantics.
template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(Shape sh) : shape(std::move(sh)), data(shape_numel(shape), S(0)) {}
  Tensor(Shape sh, S fill) : shape(std::move(sh)), data(shape_numel(shape), fill) {}
  Tensor(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
      throw ShapeError("data size " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
  }

  static Tensor zeros(Shape sh) { return Tensor(std::move(sh)); }
  static Tensor full(Shape sh, S v) { return Tensor(std::move(sh), v); }
  static Tensor from(Shape sh, std::initializer_list<S> vals) {
    return Tensor(std::move(sh), std::vector<S>(vals));
  }

  bool defined() const { return !shape.empty(); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::size_t numel() const { return data.size(); }

  int dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("dim index out of range for " + shape_str(shape));
    return shape[i];
  }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }
  S& operator[](std::size_t i) { return data[i]; }
  const S& operator[](std::size_t i) const { return data[i]; }

  S& at2(int a, int b) { return data[static_cast<std::size_t>(a) * shape[1] + b]; }
  S at2(int a, int b) const { return data[static_cast<std::size_t>(a) * shape[1] + b]; }
  S& at3(int a, int b, int c) {
    return data[(static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c];
  }
  S at3(int a, int b, int c) const {
    return data[(static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c];
  }
  S& at4(int a, int b, int c, int d) {
    return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  S at4(int a, int b, int c, int d) const {
    return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
  }
  S& at5(int a, int b, int c, int d, int e) {
    return data[(((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d) *
                    shape[4] +
                e];
  }
  S at5(int a, int b, int c, int d, int e) const {
    return data[(((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d) *
                    shape[4] +
                e];
  }

  Tensor reshaped(Shape sh) const {
    if (shape_numel(sh) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(sh));
    Tensor out;
    out.shape = std::move(sh);
    out.data = data;
    return out;
  }

  bool all_finite() const {
    for (const S& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T2>
  Tensor<T2> cast() const {
    Tensor<T2> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T2>(data[i]);
    return out;
  }
};

template <typename S>
inline bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape == b.shape;
}

}  // namespace gmsgi
