#include "gbe/nn.hpp"

#include <cmath>
#include <sstream>

namespace gbe {
namespace {
thread_local bool g_spectral_frozen = false;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (!is) throw std::runtime_error("invalid RNG state");
}

void ParamSet::append(const ParamSet& other) {
  params.insert(params.end(), other.params.begin(), other.params.end());
  buffers.insert(buffers.end(), other.buffers.begin(), other.buffers.end());
}

void ParamSet::zero_grad() {
  for (auto& p : params) p.var.zero_grad();
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().numel();
  return n;
}

double ParamSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params) {
    if (p.var.has_grad()) s += p.var.grad().squared_norm();
  }
  return std::sqrt(s);
}

FreezeSpectralNorm::FreezeSpectralNorm() : previous_(g_spectral_frozen) { g_spectral_frozen = true; }
FreezeSpectralNorm::~FreezeSpectralNorm() { g_spectral_frozen = previous_; }

int spectral_iterations() { return (g_spectral_frozen || !grad_enabled()) ? 0 : 1; }

Conv2d::Conv2d(int cin, int cout, int kernel, int stride, Rng& rng, bool bias, bool spectral)
    : cin_(cin), cout_(cout), kernel_(kernel), stride_(stride), spectral_(spectral) {
  if (cin <= 0 || cout <= 0) throw ConfigError("Conv2d: channel counts must be positive");
  if (stride != 1 && stride != 2) throw ConfigError("Conv2d: stride must be 1 or 2");
  Tensor w({cout, cin, kernel, kernel});
  const double stddev = std::sqrt(2.0 / (cin * kernel * kernel));
  for (auto& v : w.values()) v = rng.normal(0.0, stddev);
  weight = Var(std::move(w), true);
  if (bias) this->bias = Var(Tensor({cout, 1, 1, 1}), true);
  if (spectral) {
    sn.u = Tensor({cout, 1, 1, 1});
    double norm = 0.0;
    for (auto& v : sn.u.values()) {
      v = rng.normal();
      norm += v * v;
    }
    sn.u *= 1.0 / std::sqrt(norm);
  }
}

Var Conv2d::forward(const Var& x) {
  if (x.shape().c != cin_) {
    throw ShapeError("Conv2d: expected " + std::to_string(cin_) + " input channels, got " + x.shape().str());
  }
  const Var w = spectral_ ? spectral_normalize(weight, sn, spectral_iterations()) : weight;
  return conv2d(x, w, bias, stride_, kernel_ / 2);
}

Tensor Conv2d::effective_weight() const {
  if (!spectral_) return weight.value();
  Tensor w = weight.value();
  w *= 1.0 / spectral_sigma(w, sn);
  return w;
}

void Conv2d::collect(ParamSet& ps, const std::string& prefix) {
  ps.add(prefix + ".weight", weight);
  if (bias) ps.add(prefix + ".bias", bias);
  if (spectral_) ps.add_buffer(prefix + ".sn_u", &sn.u);
}

void zero_params(ParamSet& ps, const std::string& name_contains) {
  for (auto& p : ps.params) {
    if (p.name.find(name_contains) != std::string::npos) p.var.mutable_value().fill(0.0);
  }
}

double clip_grad_norm(ParamSet& ps, double max_norm) {
  const double norm = ps.grad_norm();
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& p : ps.params) {
      if (p.var.has_grad()) p.var.mutable_grad() *= k;
    }
  }
  return norm;
}

Adam::Adam(ParamSet params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_.params) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::step(double lr) {
  step_[0] += 1.0;
  const double t = step_[0];
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params_.params.size(); ++i) {
    Var& p = params_.params[i].var;
    Tensor& value = p.mutable_value();
    const bool has = p.has_grad();
    const Tensor* g = has ? &p.grad() : nullptr;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < value.numel(); ++k) {
      const double gk = (has ? (*g)[k] : 0.0) + cfg_.weight_decay * value[k];
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
      value[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
    }
  }
}

void Adam::collect_state(ParamSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < params_.params.size(); ++i) {
    ps.add_buffer(prefix + ".m." + params_.params[i].name, &m_[i]);
    ps.add_buffer(prefix + ".v." + params_.params[i].name, &v_[i]);
  }
  ps.add_buffer(prefix + ".step", &step_);
}

}  // namespace gbe
