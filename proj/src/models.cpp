#include "ncf/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ncf/random.hpp"

namespace ncf {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

double slope_pos(double alpha) { return std::max(1.0, alpha); }
double slope_neg(double alpha) { return std::min(1.0, alpha); }

double leaky(double p, double alpha) {
  return p > 0.0 ? slope_pos(alpha) * p : slope_neg(alpha) * p;
}

double leaky_prime(double p, double alpha, double at_zero) {
  if (p > 0.0) return slope_pos(alpha);
  if (p < 0.0) return slope_neg(alpha);
  return at_zero;
}

// a^e for small nonnegative integer e, with 0^0 = 1.
double ipow(double a, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= a;
  return r;
}

struct Fnv {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  }
  void str(const std::string& s) { bytes(s.data(), s.size()); }
  void num(double v) { bytes(&v, sizeof v); }
  void num(Index v) { bytes(&v, sizeof v); }
};

// Forward pass through the deep model: pre-activations and activations.
struct DeepForward {
  std::vector<Vec> pre;
  std::vector<Vec> act;  // act[0] = x
};

std::vector<Mat> deep_matrices(const FixedOuterDeepRelu& m, const Vec& w) {
  std::vector<Mat> mats;
  Index off = 0;
  for (const auto& layer : m.layers) {
    if (layer.trainable) {
      Mat a(layer.rows, layer.cols);
      for (Index r = 0; r < layer.rows; ++r)
        for (Index c = 0; c < layer.cols; ++c) a(r, c) = w[off++];
      mats.push_back(std::move(a));
    } else {
      mats.push_back(layer.frozen);
    }
  }
  return mats;
}

DeepForward deep_forward(const FixedOuterDeepRelu& m, const std::vector<Mat>& mats,
                         const Eigen::Ref<const Vec>& x) {
  DeepForward f;
  f.act.push_back(x);
  for (const auto& a : mats) {
    Vec p = a * f.act.back();
    Vec h = p.unaryExpr([&](double v) { return leaky(v, m.alpha); });
    f.pre.push_back(std::move(p));
    f.act.push_back(std::move(h));
  }
  return f;
}

}  // namespace

// ---------------------------------------------------------------- Dataset

Dataset::Dataset(Mat X, Vec y, bool unit_norm) : X_(std::move(X)), y_(std::move(y)) {
  require_structure(X_.rows() >= 1 && X_.cols() >= 1, "dataset: need d >= 1 and n >= 1");
  require_structure(y_.size() == X_.cols(), "dataset: label count must equal column count");
  require_domain(X_.allFinite(), "dataset: inputs must be finite");
  require_domain(y_.allFinite(), "dataset: labels must be finite");
  if (unit_norm) {
    for (Index i = 0; i < X_.cols(); ++i)
      require_domain(std::abs(X_.col(i).norm() - 1.0) <= 1e-12,
                     "dataset: column " + std::to_string(i) + " is not unit norm");
  }
}

Dataset Dataset::with_labels(Vec y) const { return Dataset(X_, std::move(y)); }

// ---------------------------------------------------------------- KinkPolicy

KinkPolicy KinkPolicy::defaults(double alpha) {
  KinkPolicy p;
  p.relu_zero_value = alpha == 0.0 ? 0.0 : 0.5 * (1.0 + alpha);
  return p;
}

void KinkPolicy::validate(double alpha) const {
  require_domain(relu_zero_value >= slope_neg(alpha) && relu_zero_value <= slope_pos(alpha),
                 "kink policy: sigma'(0) outside the Clarke interval");
  require_domain(kink_tol > 0.0, "kink policy: kink tolerance must be positive");
}

// ---------------------------------------------------------------- NetworkModel

NetworkModel::NetworkModel(ModelKind kind) : kind_(std::move(kind)) {
  std::visit(
      overloaded{
          [&](const TwoLayerLeakyRelu& m) {
            require_structure(m.width >= 1, "two-layer: width must be >= 1");
            for (Index k = 0; k < m.width; ++k) blocks_.push_back({k * (m.input_dim + 1), m.input_dim + 1});
            validate(m.input_dim);
          },
          [&](const SquaredRelu& m) {
            require_structure(!m.signs.empty(), "squared relu: need at least one neuron");
            for (int s : m.signs) require_structure(s == 1 || s == -1, "squared relu: signs must be +-1");
            const auto width = static_cast<Index>(m.signs.size());
            for (Index k = 0; k < width; ++k) blocks_.push_back({k * m.input_dim, m.input_dim});
            validate(m.input_dim);
          },
          [&](const DiagonalHomogeneous& m) {
            require_structure(m.degree >= 2, "diagonal: degree must be >= 2");
            for (Index j = 0; j < m.input_dim; ++j) blocks_.push_back({2 * j, 2});
            validate(m.input_dim);
          },
          [&](const FixedOuterDeepRelu& m) {
            require_structure(!m.layers.empty(), "deep relu: no layers");
            int trainable = 0;
            Index k = 0;
            Index prev = m.layers.front().cols;
            for (const auto& layer : m.layers) {
              require_structure(layer.cols == prev, "deep relu: layer shapes do not chain");
              if (layer.trainable) {
                ++trainable;
                k += layer.rows * layer.cols;
              } else {
                require_structure(layer.frozen.rows() == layer.rows && layer.frozen.cols() == layer.cols,
                                  "deep relu: frozen matrix shape mismatch");
                require_domain(layer.frozen.allFinite(), "deep relu: frozen matrix not finite");
              }
              prev = layer.rows;
            }
            require_structure(trainable == 2, "deep relu: exactly two trainable layers required");
            require_structure(m.outer.size() == prev, "deep relu: outer vector size mismatch");
            blocks_.push_back({0, k});
            validate(m.layers.front().cols);
          },
      },
      kind_);
}

void NetworkModel::validate(Index input_dim) {
  require_structure(input_dim >= 1, "model: input dimension must be >= 1");
  input_dim_ = input_dim;
  param_dim_ = 0;
  for (const auto& b : blocks_) {
    require_structure(b.offset == param_dim_ && b.length >= 1, "model: blocks must be ordered and disjoint");
    param_dim_ += b.length;
  }
}

NetworkModel NetworkModel::two_layer_leaky_relu(double alpha, Index width, Index input_dim) {
  return NetworkModel(TwoLayerLeakyRelu{alpha, width, input_dim});
}

NetworkModel NetworkModel::squared_relu(std::vector<int> signs, Index input_dim, double alpha) {
  return NetworkModel(SquaredRelu{std::move(signs), input_dim, alpha});
}

NetworkModel NetworkModel::diagonal(Index input_dim, double alpha, int degree) {
  return NetworkModel(DiagonalHomogeneous{input_dim, alpha, degree});
}

NetworkModel NetworkModel::fixed_outer_deep_relu(std::vector<DeepReluLayer> layers, Vec outer,
                                                 double alpha) {
  return NetworkModel(FixedOuterDeepRelu{std::move(layers), std::move(outer), alpha});
}

int NetworkModel::degree() const {
  if (const auto* m = std::get_if<DiagonalHomogeneous>(&kind_)) return m->degree;
  return 2;
}

double NetworkModel::alpha() const {
  return std::visit([](const auto& m) { return m.alpha; }, kind_);
}

bool NetworkModel::is_smooth() const {
  return std::visit(overloaded{
                        [](const TwoLayerLeakyRelu& m) { return m.alpha == 1.0; },
                        [](const SquaredRelu&) { return true; },
                        [](const DiagonalHomogeneous& m) { return m.alpha == 1.0; },
                        [](const FixedOuterDeepRelu& m) { return m.alpha == 1.0; },
                    },
                    kind_);
}

std::string NetworkModel::name() const {
  return std::visit(overloaded{
                        [](const TwoLayerLeakyRelu&) { return std::string("two_layer_leaky_relu"); },
                        [](const SquaredRelu&) { return std::string("squared_relu"); },
                        [](const DiagonalHomogeneous&) { return std::string("diagonal"); },
                        [](const FixedOuterDeepRelu&) { return std::string("fixed_outer_deep_relu"); },
                    },
                    kind_);
}

double NetworkModel::eval(const Eigen::Ref<const Vec>& x, const Vec& w) const {
  require_structure(x.size() == input_dim_, "eval: input dimension mismatch");
  require_structure(w.size() == param_dim_, "eval: parameter dimension mismatch");
  return std::visit(
      overloaded{
          [&](const TwoLayerLeakyRelu& m) {
            double h = 0.0;
            for (const auto& b : blocks_) {
              const double p = x.dot(w.segment(b.offset + 1, m.input_dim));
              h += w[b.offset] * leaky(p, m.alpha);
            }
            return h;
          },
          [&](const SquaredRelu& m) {
            double h = 0.0;
            for (std::size_t k = 0; k < m.signs.size(); ++k) {
              const auto& b = blocks_[k];
              const double s = leaky(x.dot(w.segment(b.offset, b.length)), m.alpha);
              h += m.signs[k] * s * s;
            }
            return h;
          },
          [&](const DiagonalHomogeneous& m) {
            double h = 0.0;
            for (Index j = 0; j < m.input_dim; ++j)
              h += x[j] * ipow(w[2 * j], m.degree - 1) * leaky(w[2 * j + 1], m.alpha);
            return h;
          },
          [&](const FixedOuterDeepRelu& m) {
            const auto f = deep_forward(m, deep_matrices(m, w), x);
            return m.outer.dot(f.act.back());
          },
      },
      kind_);
}

Vec NetworkModel::subgrad(const Eigen::Ref<const Vec>& x, const Vec& w, const KinkPolicy& policy) const {
  require_structure(x.size() == input_dim_, "subgrad: input dimension mismatch");
  require_structure(w.size() == param_dim_, "subgrad: parameter dimension mismatch");
  const double s0 = policy.relu_zero_value;
  Vec g = Vec::Zero(param_dim_);
  std::visit(
      overloaded{
          [&](const TwoLayerLeakyRelu& m) {
            for (const auto& b : blocks_) {
              const auto u = w.segment(b.offset + 1, m.input_dim);
              const double p = x.dot(u);
              g[b.offset] = leaky(p, m.alpha);
              g.segment(b.offset + 1, m.input_dim) = w[b.offset] * leaky_prime(p, m.alpha, s0) * x;
            }
          },
          [&](const SquaredRelu& m) {
            for (std::size_t k = 0; k < m.signs.size(); ++k) {
              const auto& b = blocks_[k];
              const double p = x.dot(w.segment(b.offset, b.length));
              g.segment(b.offset, b.length) =
                  (2.0 * m.signs[k] * leaky(p, m.alpha) * leaky_prime(p, m.alpha, s0)) * x;
            }
          },
          [&](const DiagonalHomogeneous& m) {
            for (Index j = 0; j < m.input_dim; ++j) {
              const double a = w[2 * j];
              const double b = w[2 * j + 1];
              g[2 * j] = x[j] * (m.degree - 1) * ipow(a, m.degree - 2) * leaky(b, m.alpha);
              g[2 * j + 1] = x[j] * ipow(a, m.degree - 1) * leaky_prime(b, m.alpha, s0);
            }
          },
          [&](const FixedOuterDeepRelu& m) {
            const auto mats = deep_matrices(m, w);
            const auto f = deep_forward(m, mats, x);
            const auto L = mats.size();
            // delta = dH / d(pre_l)
            Vec delta = m.outer.cwiseProduct(
                f.pre[L - 1].unaryExpr([&](double p) { return leaky_prime(p, m.alpha, s0); }));
            std::vector<Index> offsets(L, -1);
            Index off = 0;
            for (std::size_t l = 0; l < L; ++l)
              if (m.layers[l].trainable) {
                offsets[l] = off;
                off += m.layers[l].rows * m.layers[l].cols;
              }
            for (std::size_t l = L; l-- > 0;) {
              if (offsets[l] >= 0) {
                const Mat grad = delta * f.act[l].transpose();
                Index o = offsets[l];
                for (Index r = 0; r < grad.rows(); ++r)
                  for (Index c = 0; c < grad.cols(); ++c) g[o++] = grad(r, c);
              }
              if (l > 0) {
                delta = (mats[l].transpose() * delta)
                            .cwiseProduct(f.pre[l - 1].unaryExpr(
                                [&](double p) { return leaky_prime(p, m.alpha, s0); }));
              }
            }
          },
      },
      kind_);
  return g;
}

Vec NetworkModel::eval_all(const Dataset& data, const Vec& w) const {
  require_structure(data.d() == input_dim_, "eval: dataset dimension mismatch");
  require_structure(w.size() == param_dim_, "eval: parameter dimension mismatch");
  if (const auto* m = std::get_if<SquaredRelu>(&kind_)) {
    Vec h = Vec::Zero(data.n());
    for (std::size_t k = 0; k < m->signs.size(); ++k) {
      const auto& b = blocks_[k];
      Vec s = (data.X().transpose() * w.segment(b.offset, b.length))
                  .unaryExpr([&](double p) { return leaky(p, m->alpha); });
      h += m->signs[k] * s.cwiseProduct(s);
    }
    return h;
  }
  Vec h(data.n());
  for (Index i = 0; i < data.n(); ++i) h[i] = eval(data.x(i), w);
  return h;
}

Vec NetworkModel::weighted_subgrad(const Dataset& data, const Vec& c, const Vec& w,
                                   const KinkPolicy& policy) const {
  require_structure(data.d() == input_dim_, "subgrad: dataset dimension mismatch");
  require_structure(c.size() == data.n(), "subgrad: weight vector length must equal n");
  require_structure(w.size() == param_dim_, "subgrad: parameter dimension mismatch");
  const double s0 = policy.relu_zero_value;
  if (const auto* m = std::get_if<SquaredRelu>(&kind_)) {
    Vec g(param_dim_);
    for (std::size_t k = 0; k < m->signs.size(); ++k) {
      const auto& b = blocks_[k];
      Vec coeff = (data.X().transpose() * w.segment(b.offset, b.length))
                      .unaryExpr([&](double p) { return 2.0 * leaky(p, m->alpha) * leaky_prime(p, m->alpha, s0); });
      g.segment(b.offset, b.length) = m->signs[k] * (data.X() * coeff.cwiseProduct(c));
    }
    return g;
  }
  if (const auto* m = std::get_if<TwoLayerLeakyRelu>(&kind_)) {
    Vec g(param_dim_);
    for (const auto& b : blocks_) {
      const Vec p = data.X().transpose() * w.segment(b.offset + 1, m->input_dim);
      const Vec act = p.unaryExpr([&](double v) { return leaky(v, m->alpha); });
      const Vec der = p.unaryExpr([&](double v) { return leaky_prime(v, m->alpha, s0); });
      g[b.offset] = c.dot(act);
      g.segment(b.offset + 1, m->input_dim) = w[b.offset] * (data.X() * der.cwiseProduct(c));
    }
    return g;
  }
  Vec g = Vec::Zero(param_dim_);
  for (Index i = 0; i < data.n(); ++i)
    if (c[i] != 0.0) g += c[i] * subgrad(data.x(i), w, policy);
  return g;
}

std::optional<KinkDecomposition> NetworkModel::kink_decomposition(const Dataset& data, const Vec& c,
                                                                  const Vec& w, double kink_tol) const {
  if (std::holds_alternative<FixedOuterDeepRelu>(kind_)) return std::nullopt;
  KinkPolicy zero;
  zero.relu_zero_value = 0.0;
  KinkDecomposition out;
  // Exact-zero pre-activations are where the selection applies; the tolerance
  // only widens the set considered as kinks for the scan.
  std::visit(
      overloaded{
          [&](const TwoLayerLeakyRelu& m) {
            out.base = Vec::Zero(param_dim_);
            for (const auto& b : blocks_) {
              const auto u = w.segment(b.offset + 1, m.input_dim);
              for (Index i = 0; i < data.n(); ++i) {
                const auto x = data.x(i);
                const double p = x.dot(u);
                const double scale = x.norm() * u.norm();
                out.base[b.offset] += c[i] * leaky(p, m.alpha);
                if (std::abs(p) <= kink_tol * scale || p == 0.0) {
                  Vec dir = Vec::Zero(param_dim_);
                  dir.segment(b.offset + 1, m.input_dim) = c[i] * w[b.offset] * x;
                  if (dir.squaredNorm() > 0.0) out.directions.push_back(std::move(dir));
                } else {
                  out.base.segment(b.offset + 1, m.input_dim) +=
                      c[i] * w[b.offset] * leaky_prime(p, m.alpha, 0.0) * x;
                }
              }
            }
          },
          [&](const SquaredRelu&) { out.base = weighted_subgrad(data, c, w, zero); },
          [&](const DiagonalHomogeneous& m) {
            out.base = Vec::Zero(param_dim_);
            for (Index j = 0; j < m.input_dim; ++j) {
              double cx = 0.0;
              for (Index i = 0; i < data.n(); ++i) cx += c[i] * data.X()(j, i);
              const double a = w[2 * j];
              const double b = w[2 * j + 1];
              out.base[2 * j] = cx * (m.degree - 1) * ipow(a, m.degree - 2) * leaky(b, m.alpha);
              if (std::abs(b) <= kink_tol * std::abs(a) || b == 0.0) {
                Vec dir = Vec::Zero(param_dim_);
                dir[2 * j + 1] = cx * ipow(a, m.degree - 1);
                if (dir[2 * j + 1] != 0.0) out.directions.push_back(std::move(dir));
              } else {
                out.base[2 * j + 1] = cx * ipow(a, m.degree - 1) * leaky_prime(b, m.alpha, 0.0);
              }
            }
          },
          [&](const FixedOuterDeepRelu&) {},
      },
      kind_);
  return out;
}

bool NetworkModel::near_kink(const Dataset& data, const Vec& w, double kink_tol) const {
  if (is_smooth()) return false;
  return std::visit(
      overloaded{
          [&](const TwoLayerLeakyRelu& m) {
            for (const auto& b : blocks_) {
              const auto u = w.segment(b.offset + 1, m.input_dim);
              if (w[b.offset] == 0.0) continue;  // kink choice is multiplied by v
              const double un = u.norm();
              for (Index i = 0; i < data.n(); ++i)
                if (std::abs(data.x(i).dot(u)) <= kink_tol * data.x(i).norm() * un) return true;
            }
            return false;
          },
          [&](const SquaredRelu&) { return false; },
          [&](const DiagonalHomogeneous& m) {
            for (Index j = 0; j < m.input_dim; ++j) {
              const double a = w[2 * j];
              if (a == 0.0 || data.X().row(j).cwiseAbs().maxCoeff() == 0.0) continue;
              if (std::abs(w[2 * j + 1]) <= kink_tol * std::abs(a)) return true;
            }
            return false;
          },
          [&](const FixedOuterDeepRelu& m) {
            const auto mats = deep_matrices(m, w);
            for (Index i = 0; i < data.n(); ++i) {
              const auto f = deep_forward(m, mats, data.x(i));
              for (std::size_t l = 0; l < f.pre.size(); ++l) {
                const double scale = mats[l].norm() * f.act[l].norm();
                if (scale == 0.0) continue;
                if ((f.pre[l].array().abs() <= kink_tol * scale).any()) return true;
              }
            }
            return false;
          },
      },
      kind_);
}

bool NetworkModel::separable() const { return blocks_.size() > 1; }

NetworkModel NetworkModel::block_model(std::size_t b) const {
  require_structure(b < blocks_.size(), "block_model: block index out of range");
  return std::visit(
      overloaded{
          [&](const TwoLayerLeakyRelu& m) { return two_layer_leaky_relu(m.alpha, 1, m.input_dim); },
          [&](const SquaredRelu& m) { return squared_relu({m.signs[b]}, m.input_dim, m.alpha); },
          [&](const DiagonalHomogeneous&) -> NetworkModel {
            throw StructuralError("block_model: diagonal blocks share the input; embed the block instead");
          },
          [&](const FixedOuterDeepRelu&) { return *this; },
      },
      kind_);
}

std::uint64_t NetworkModel::fingerprint() const {
  Fnv f;
  f.str(name());
  f.num(alpha());
  f.num(param_dim_);
  f.num(input_dim_);
  std::visit(overloaded{
                 [&](const SquaredRelu& m) {
                   for (int s : m.signs) f.num(static_cast<Index>(s));
                 },
                 [&](const DiagonalHomogeneous& m) { f.num(static_cast<Index>(m.degree)); },
                 [&](const FixedOuterDeepRelu& m) {
                   for (const auto& l : m.layers) {
                     f.num(l.rows);
                     f.num(l.cols);
                     f.num(static_cast<Index>(l.trainable));
                     if (!l.trainable) f.bytes(l.frozen.data(), sizeof(double) * l.frozen.size());
                   }
                   f.bytes(m.outer.data(), sizeof(double) * m.outer.size());
                 },
                 [&](const TwoLayerLeakyRelu&) {},
             },
             kind_);
  return f.h;
}

// ---------------------------------------------------------------- WeightVector

void SaddlePartition::validate(Index k) const {
  std::vector<int> seen(static_cast<std::size_t>(k), 0);
  for (const auto* part : {&nonzero, &zero})
    for (Index i : *part) {
      require_structure(i >= 0 && i < k, "saddle partition: index out of range");
      require_structure(seen[static_cast<std::size_t>(i)]++ == 0, "saddle partition: indices overlap");
    }
  for (int s : seen) require_structure(s == 1, "saddle partition: indices do not cover all weights");
}

WeightVector WeightVector::for_model(const NetworkModel& model, Vec values) {
  require_structure(values.size() == model.param_dim(), "weight vector: length does not match model");
  return WeightVector{std::move(values), model.blocks(), std::nullopt};
}

// ---------------------------------------------------------------- free operations

Vec eval_net(const NetworkModel& model, const Dataset& data, const Vec& w) {
  return model.eval_all(data, w);
}

Vec subgrad_net(const NetworkModel& model, const Eigen::Ref<const Vec>& x, const Vec& w,
                const KinkPolicy& policy) {
  return model.subgrad(x, w, policy);
}

double check_homogeneity(const NetworkModel& model, const Eigen::Ref<const Vec>& x, const Vec& w,
                         double c) {
  require_domain(c >= 0.0, "check_homogeneity: c must be nonnegative");
  const Vec cw = c * w;
  return std::abs(model.eval(x, cw) - ipow(c, model.degree()) * model.eval(x, w));
}

double euler_residual(const NetworkModel& model, const Eigen::Ref<const Vec>& x, const Vec& w,
                      const KinkPolicy& policy) {
  return std::abs(w.dot(model.subgrad(x, w, policy)) - model.degree() * model.eval(x, w));
}

double beta_estimate(const NetworkModel& model, const Dataset& data, int n_samples,
                     std::uint64_t seed, double safety) {
  require_domain(n_samples >= 1, "beta_estimate: need at least one sample");
  CounterRng rng(seed, /*stream=*/0xbe7a);
  double best = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const Vec w = rng.unit_vector(model.param_dim());
    best = std::max(best, model.eval_all(data, w).norm());
  }
  return safety * best;
}

Vec block_norms(const NetworkModel& model, const Vec& w) {
  Vec out(static_cast<Index>(model.blocks().size()));
  for (std::size_t b = 0; b < model.blocks().size(); ++b)
    out[static_cast<Index>(b)] = w.segment(model.blocks()[b].offset, model.blocks()[b].length).norm();
  return out;
}

}  // namespace ncf
