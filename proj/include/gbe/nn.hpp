#pragma once

// Layer building blocks, parameter registry, optimiser and RNG shared by the
// networks.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gbe/ops.hpp"

namespace gbe {

/// Seeded 64-bit generator with a serialisable state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Uniform integer in [lo, hi].
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::uint64_t next() { return engine_(); }

  [[nodiscard]] std::string state() const;
  void set_state(const std::string& s);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

struct NamedParam {
  std::string name;
  Var var;
};

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

/// Flat view over a network's trainable parameters and persistent buffers.
struct ParamSet {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;

  void add(const std::string& name, const Var& v) { params.push_back({name, v}); }
  void add_buffer(const std::string& name, Tensor* t) { buffers.push_back({name, t}); }
  void append(const ParamSet& other);

  void zero_grad();
  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] double grad_norm() const;
};

/// Disables power-iteration updates of spectral normalisation in its scope.
class FreezeSpectralNorm {
 public:
  FreezeSpectralNorm();
  ~FreezeSpectralNorm();
  FreezeSpectralNorm(const FreezeSpectralNorm&) = delete;
  FreezeSpectralNorm& operator=(const FreezeSpectralNorm&) = delete;

 private:
  bool previous_;
};

/// Power-iteration steps per training forward (0 under FreezeSpectralNorm or without grad).
int spectral_iterations();

/// Convolution layer with optional bias and optional spectral weight normalisation.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int cin, int cout, int kernel, int stride, Rng& rng, bool bias = true, bool spectral = false);

  Var forward(const Var& x);
  void collect(ParamSet& ps, const std::string& prefix);

  /// Effective weight (normalised when spectral), without updating state.
  [[nodiscard]] Tensor effective_weight() const;

  [[nodiscard]] int in_channels() const { return cin_; }
  [[nodiscard]] int out_channels() const { return cout_; }
  [[nodiscard]] int stride() const { return stride_; }
  [[nodiscard]] int kernel() const { return kernel_; }
  [[nodiscard]] bool spectral() const { return spectral_; }

  Var weight;
  Var bias;
  SpectralState sn;

 private:
  int cin_ = 0, cout_ = 0, kernel_ = 3, stride_ = 1;
  bool spectral_ = false;
};

/// Sets every parameter of `ps` matching `pred(name)` to zero.
void zero_params(ParamSet& ps, const std::string& name_contains);

/// Global-norm gradient clipping; returns the norm before clipping.
double clip_grad_norm(ParamSet& ps, double max_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0001;
};

/// Adam with L2 weight decay added to the gradient.
class Adam {
 public:
  Adam() = default;
  Adam(ParamSet params, AdamConfig cfg);

  void step(double lr);
  [[nodiscard]] long steps() const { return static_cast<long>(step_[0]); }
  /// Registers moments and the step counter as checkpoint buffers.
  void collect_state(ParamSet& ps, const std::string& prefix);

 private:
  ParamSet params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  Tensor step_{Shape{1, 1, 1, 1}};
};

}  // namespace gbe
