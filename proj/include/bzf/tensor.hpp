#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace bzf {

// Library-wide error. Domain errors (bad shapes, malformed files, contract
// violations) throw this or a subclass; callers catch by the base type.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A non-finite value escaped an operation. Carries the offending node so
// training loops can report which computation produced it.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& msg, int node_id)
      : Error(msg), node_id(node_id) {}
  int node_id = -1;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major 64-bit float tensor. Immutable by convention once handed
// to a Graph; mutation helpers exist for construction and optimizer updates.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d, bool rg = false);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape s, std::vector<double> d, bool rg = false);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int axis) const;

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at2(int i, int j);
  double at2(int i, int j) const;
  double& at3(int i, int j, int k);
  double at3(int i, int j, int k) const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

using NamedTensors = std::map<std::string, Tensor>;

// Deterministic RNG used across synth, init, and tests. Hand-rolled
// transforms so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double uniform();                      // [0, 1)
  double uniform(double lo, double hi);  // [lo, hi)
  double normal();                       // standard normal, Box-Muller
  double normal(double mean, double stddev);
  int uniform_int(int lo, int hi);  // inclusive range

 private:
  uint64_t state_[4];
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace bzf
