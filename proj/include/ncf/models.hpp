#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ncf/common.hpp"

namespace ncf {

/// Fixed training data: inputs are the columns of X (d x n), labels y (n).
class Dataset {
 public:
  Dataset(Mat X, Vec y, bool unit_norm = false);

  const Mat& X() const { return X_; }
  const Vec& y() const { return y_; }
  Index n() const { return X_.cols(); }
  Index d() const { return X_.rows(); }
  auto x(Index i) const { return X_.col(i); }

  /// Same inputs, different labels (e.g. a residual at a saddle).
  Dataset with_labels(Vec y) const;

 private:
  Mat X_;
  Vec y_;
};

/// Selection rule for the activation derivative at a kink.
///
/// The Clarke subdifferential of max(p, alpha p) at p = 0 is the interval
/// [min(alpha,1), max(alpha,1)]; `relu_zero_value` picks one element of it.
struct KinkPolicy {
  double relu_zero_value = 0.0;
  double kink_tol = 1e-12;

  /// sigma'(0) = 0 for ReLU, (1 + alpha) / 2 otherwise.
  static KinkPolicy defaults(double alpha);
  void validate(double alpha) const;
};

struct Block {
  Index offset = 0;
  Index length = 0;
};

/// sum_k v_k sigma(x^T u_k), sigma(p) = max(p, alpha p). Block k = [v_k, u_k].
struct TwoLayerLeakyRelu {
  double alpha = 0.0;
  Index width = 1;
  Index input_dim = 1;
};

/// sum_k p_k sigma(x^T u_k)^2 with p_k in {-1, +1}. Block k = u_k.
struct SquaredRelu {
  std::vector<int> signs;
  Index input_dim = 1;
  double alpha = 0.0;
};

/// sum_j x_j a_j^(degree-1) sigma(b_j). Block j = [a_j, b_j].
///
/// With alpha = 1, degree = 2 this is the diagonal linear network; alpha = -1
/// gives sigma = |.|, so a single coordinate encodes f(u1, u2) = u1 |u2|.
struct DiagonalHomogeneous {
  Index input_dim = 1;
  double alpha = 1.0;
  int degree = 2;
};

struct DeepReluLayer {
  Index rows = 0;
  Index cols = 0;
  bool trainable = false;
  Mat frozen;  // used when !trainable
};

/// outer^T sigma(L_m sigma(... sigma(L_1 x))) with exactly two trainable L_j.
struct FixedOuterDeepRelu {
  std::vector<DeepReluLayer> layers;
  Vec outer;
  double alpha = 0.0;
};

using ModelKind = std::variant<TwoLayerLeakyRelu, SquaredRelu,
                               DiagonalHomogeneous, FixedOuterDeepRelu>;

/// Subgradient written as base + sum_k s_k * directions[k], where s_k is the
/// activation derivative chosen at the k-th active kink and `base` uses 0 there.
struct KinkDecomposition {
  Vec base;
  std::vector<Vec> directions;
};

class NetworkModel {
 public:
  explicit NetworkModel(ModelKind kind);

  static NetworkModel two_layer_leaky_relu(double alpha, Index width,
                                           Index input_dim);
  static NetworkModel squared_relu(std::vector<int> signs, Index input_dim,
                                   double alpha = 0.0);
  static NetworkModel diagonal(Index input_dim, double alpha, int degree = 2);
  static NetworkModel fixed_outer_deep_relu(std::vector<DeepReluLayer> layers,
                                            Vec outer, double alpha = 0.0);

  const ModelKind& kind() const { return kind_; }
  Index param_dim() const { return param_dim_; }
  Index input_dim() const { return input_dim_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  int degree() const;
  double alpha() const;
  bool is_smooth() const;
  std::string name() const;

  /// H(x; w).
  double eval(const Eigen::Ref<const Vec>& x, const Vec& w) const;
  /// One element of the Clarke subdifferential of H(x; .) at w.
  Vec subgrad(const Eigen::Ref<const Vec>& x, const Vec& w,
              const KinkPolicy& policy) const;

  /// H(X; w) for all samples.
  Vec eval_all(const Dataset& data, const Vec& w) const;
  /// sum_i c_i * subgrad(x_i, w).
  Vec weighted_subgrad(const Dataset& data, const Vec& c, const Vec& w,
                       const KinkPolicy& policy) const;

  /// Decomposition of weighted_subgrad over active kinks; nullopt for models
  /// where kink choices do not enter linearly (deep networks).
  std::optional<KinkDecomposition> kink_decomposition(
      const Dataset& data, const Vec& c, const Vec& w, double kink_tol) const;

  /// True when some pre-activation that matters for the subgradient lies
  /// within kink_tol (relative) of an activation kink.
  bool near_kink(const Dataset& data, const Vec& w, double kink_tol) const;

  /// The sub-network acting on block b alone, for separable models.
  NetworkModel block_model(std::size_t b) const;
  /// True when H(x; w) = sum_b H_b(x; w_b).
  bool separable() const;

  /// Stable fingerprint of the architecture (including frozen weights).
  std::uint64_t fingerprint() const;

 private:
  void validate(Index input_dim);

  ModelKind kind_;
  Index param_dim_ = 0;
  Index input_dim_ = 0;
  std::vector<Block> blocks_;
};

/// Flat parameter vector with the owning model's block layout and an optional
/// saddle partition (w_n, w_z).
struct SaddlePartition {
  std::vector<Index> nonzero;  // w_n
  std::vector<Index> zero;     // w_z
  void validate(Index k) const;
};

struct WeightVector {
  Vec values;
  std::vector<Block> layout;
  std::optional<SaddlePartition> partition;

  static WeightVector for_model(const NetworkModel& model, Vec values);
};

Vec eval_net(const NetworkModel& model, const Dataset& data, const Vec& w);
Vec subgrad_net(const NetworkModel& model, const Eigen::Ref<const Vec>& x,
                const Vec& w, const KinkPolicy& policy);

/// |H(x; c w) - c^degree H(x; w)|; throws DomainError for c < 0.
double check_homogeneity(const NetworkModel& model,
                         const Eigen::Ref<const Vec>& x, const Vec& w, double c);

/// |w^T s - degree * H(x; w)| for the subgradient s selected by `policy`.
double euler_residual(const NetworkModel& model, const Eigen::Ref<const Vec>& x,
                      const Vec& w, const KinkPolicy& policy);

/// Sampled estimate of beta = sup_{|w|=1} |H(X; w)|_2, times `safety`.
double beta_estimate(const NetworkModel& model, const Dataset& data,
                     int n_samples, std::uint64_t seed, double safety = 1.25);

/// Per-block Euclidean norms of w.
Vec block_norms(const NetworkModel& model, const Vec& w);

}  // namespace ncf
