#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace edgefl::lowrank {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Thin singular value decomposition M = U * diag(S) * V^T with
// k = min(rows, cols) columns in U and V and S sorted descending.
struct SvdResult {
  Matrix left;
  Vector singular_values;
  Matrix right;
};

// One-sided Jacobi SVD. Intended for the small dense matrices that appear in
// adapter algebra (at most 256 per side).
SvdResult svd(const Matrix& m);

// Low-rank adapter for one layer. delta = (alpha / rank) * up * down.
struct LoraAdapter {
  std::string layer_id;
  Matrix down;  // rank x d_in
  Matrix up;    // d_out x rank
  double alpha = 1.0;

  int rank() const { return static_cast<int>(down.rows()); }
  Eigen::Index d_in() const { return down.cols(); }
  Eigen::Index d_out() const { return up.rows(); }
  // Largest rank the layer can host.
  int rank_bound() const { return static_cast<int>(std::min(d_in(), d_out())); }

  // Dense update. Accumulates over the rank index in ascending order so that
  // appending zero components leaves the result bit-identical.
  Matrix delta() const;

  // Throws DimensionError / ArgumentError / NumericError on a broken adapter.
  void validate() const;

  // Adapter with zero up factor and Gaussian down factor (std 1/sqrt(rank)).
  template <typename Rng>
  static LoraAdapter initialized(std::string layer_id, int rank, Eigen::Index d_in,
                                 Eigen::Index d_out, Rng& rng) {
    LoraAdapter a;
    a.layer_id = std::move(layer_id);
    a.down = rng.normal_matrix(rank, d_in) / std::sqrt(static_cast<double>(rank));
    a.up = Matrix::Zero(d_out, rank);
    a.alpha = rank;
    return a;
  }
};

// Adapters keyed by layer id; std::map iteration order is the canonical
// layer order used by every per-layer report.
using AdapterSet = std::map<std::string, LoraAdapter>;

// base + scale * delta(adapter). base is taken by const reference and never
// modified.
Matrix apply_delta(const Matrix& base, const LoraAdapter& adapter, double scale);

// Lower median for even counts.
int median_rank(std::span<const int> ranks);

// Zero-pads (lossless) or SVD-truncates (Eckart-Young optimal) to
// target_rank. Aligned adapters always carry alpha == target_rank.
LoraAdapter align_rank(const LoraAdapter& adapter, int target_rank);

// Factor-space weighted mean. All adapters must share layer, shape and rank.
LoraAdapter average_adapters(std::span<const LoraAdapter> adapters,
                             std::span<const double> weights);

// Concatenates factors so delta(out) == sum_i coeffs[i] * delta(adapters[i]).
// Throws RankOverflowError when the summed rank exceeds the layer bound.
LoraAdapter stack_adapters(std::span<const LoraAdapter> adapters,
                           std::span<const double> coeffs);

// Sum of squared singular values of delta(adapter).
double energy_trace(const LoraAdapter& adapter);

struct EnergyProfile {
  std::vector<std::string> layers;
  std::vector<double> raw;
  std::vector<double> normalized;
  bool degenerate = false;  // total energy was zero; normalized is uniform
};

EnergyProfile snt_profile(const AdapterSet& adapters);

// Total-variation distance between normalized profiles, in [0, 1].
double snt_distance(const EnergyProfile& p, const EnergyProfile& q);

// Delta of every layer in the set, keyed like the set.
std::map<std::string, Matrix> dense_deltas(const AdapterSet& adapters);

}  // namespace edgefl::lowrank
