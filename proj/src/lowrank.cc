#include "edgefl/lowrank.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "edgefl/errors.h"

namespace edgefl::lowrank {

namespace {

constexpr Eigen::Index kMaxSvdDim = 256;

bool all_finite(const Matrix& m) { return m.allFinite(); }

std::string shape(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

// Replaces the columns of `u` flagged in `missing` by unit vectors orthogonal
// to every other column (Gram-Schmidt against the standard basis).
void complete_orthonormal(Matrix& u, const std::vector<bool>& missing) {
  const Eigen::Index rows = u.rows();
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    if (!missing[j]) continue;
    Vector best;
    double best_norm = -1.0;
    for (Eigen::Index k = 0; k < rows; ++k) {
      Vector candidate = Vector::Unit(rows, k);
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index c = 0; c < u.cols(); ++c) {
          if (c == j || (missing[c] && c > j)) continue;
          candidate -= u.col(c).dot(candidate) * u.col(c);
        }
      }
      const double norm = candidate.norm();
      if (norm > best_norm) {
        best_norm = norm;
        best = candidate;
      }
      if (best_norm > 0.5) break;
    }
    u.col(j) = best / best_norm;
  }
}

}  // namespace

SvdResult svd(const Matrix& m) {
  if (!all_finite(m)) throw NumericError("svd: matrix contains non-finite entries");
  if (m.rows() > kMaxSvdDim || m.cols() > kMaxSvdDim)
    throw DimensionError("svd: matrix " + shape(m) + " exceeds 256 per side");

  const bool transposed = m.rows() < m.cols();
  Matrix a = transposed ? Matrix(m.transpose()) : m;
  const Eigen::Index n = a.cols();
  Matrix v = Matrix::Identity(n, n);
  const double eps = std::numeric_limits<double>::epsilon();

  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p + 1 < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = a.col(p).squaredNorm();
        const double beta = a.col(q).squaredNorm();
        const double gamma = a.col(p).dot(a.col(q));
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (Eigen::Index i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }

  Vector norms(n);
  for (Eigen::Index j = 0; j < n; ++j) norms(j) = a.col(j).norm();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return norms(x) > norms(y); });

  SvdResult out;
  out.left.resize(a.rows(), n);
  out.right.resize(n, n);
  out.singular_values.resize(n);
  std::vector<bool> missing(n, false);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = order[j];
    const double sigma = norms(src);
    out.singular_values(j) = sigma;
    out.right.col(j) = v.col(src);
    if (sigma > std::numeric_limits<double>::min() * 1e4) {
      out.left.col(j) = a.col(src) / sigma;
    } else {
      out.singular_values(j) = 0.0;
      out.left.col(j).setZero();
      missing[j] = true;
    }
  }
  if (std::find(missing.begin(), missing.end(), true) != missing.end())
    complete_orthonormal(out.left, missing);

  if (transposed) std::swap(out.left, out.right);
  return out;
}

Matrix LoraAdapter::delta() const {
  const double factor = alpha / static_cast<double>(rank());
  const Matrix scaled_up = up * factor;
  Matrix out = Matrix::Zero(up.rows(), down.cols());
  for (Eigen::Index k = 0; k < down.rows(); ++k) out.noalias() += scaled_up.col(k) * down.row(k);
  return out;
}

void LoraAdapter::validate() const {
  if (down.rows() < 1) throw ArgumentError("adapter " + layer_id + ": rank must be positive");
  if (up.cols() != down.rows())
    throw DimensionError("adapter " + layer_id + ": up " + shape(up) + " and down " +
                         shape(down) + " disagree on rank");
  if (rank() > rank_bound())
    throw ArgumentError("adapter " + layer_id + ": rank " + std::to_string(rank()) +
                        " exceeds layer bound " + std::to_string(rank_bound()));
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw ArgumentError("adapter " + layer_id + ": alpha must be positive and finite");
  if (!all_finite(up) || !all_finite(down))
    throw NumericError("adapter " + layer_id + ": non-finite factor entries");
}

Matrix apply_delta(const Matrix& base, const LoraAdapter& adapter, double scale) {
  if (base.rows() != adapter.d_out() || base.cols() != adapter.d_in())
    throw DimensionError("apply_delta: base " + shape(base) + " vs adapter " + adapter.layer_id +
                         " delta " + std::to_string(adapter.d_out()) + "x" +
                         std::to_string(adapter.d_in()));
  if (!std::isfinite(scale)) throw ArgumentError("apply_delta: scale must be finite");
  if (scale == 0.0) return base;
  return base + scale * adapter.delta();
}

int median_rank(std::span<const int> ranks) {
  if (ranks.empty()) throw ArgumentError("median_rank: empty rank list");
  std::vector<int> sorted(ranks.begin(), ranks.end());
  std::sort(sorted.begin(), sorted.end());
  return sorted[(sorted.size() - 1) / 2];
}

LoraAdapter align_rank(const LoraAdapter& adapter, int target_rank) {
  if (target_rank < 1) throw ArgumentError("align_rank: target rank must be positive");
  if (target_rank > adapter.rank_bound())
    throw ArgumentError("align_rank: target rank " + std::to_string(target_rank) +
                        " exceeds layer bound " + std::to_string(adapter.rank_bound()) +
                        " of " + adapter.layer_id);
  const int r = adapter.rank();
  if (r == target_rank) return adapter;

  LoraAdapter out;
  out.layer_id = adapter.layer_id;
  out.alpha = target_rank;
  if (r < target_rank) {
    out.down = Matrix::Zero(target_rank, adapter.d_in());
    out.down.topRows(r) = adapter.down;
    out.up = Matrix::Zero(adapter.d_out(), target_rank);
    out.up.leftCols(r) = adapter.up * (adapter.alpha / static_cast<double>(r));
    return out;
  }
  const SvdResult dec = svd(adapter.delta());
  out.up = dec.left.leftCols(target_rank) * dec.singular_values.head(target_rank).asDiagonal();
  out.down = dec.right.leftCols(target_rank).transpose();
  return out;
}

LoraAdapter average_adapters(std::span<const LoraAdapter> adapters,
                             std::span<const double> weights) {
  if (adapters.empty()) throw ArgumentError("average_adapters: no adapters");
  if (adapters.size() != weights.size())
    throw ArgumentError("average_adapters: adapter and weight counts differ");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w))
      throw ArgumentError("average_adapters: weights must be finite and nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ArgumentError("average_adapters: weights sum to " + std::to_string(total));

  const LoraAdapter& first = adapters.front();
  bool same_alpha = true;
  for (const LoraAdapter& a : adapters) {
    if (a.layer_id != first.layer_id)
      throw PreconditionError("average_adapters: mixed layers " + first.layer_id + " and " +
                              a.layer_id);
    if (a.d_in() != first.d_in() || a.d_out() != first.d_out())
      throw DimensionError("average_adapters: layer shapes differ for " + a.layer_id);
    if (a.rank() != first.rank())
      throw PreconditionError("average_adapters: ranks " + std::to_string(first.rank()) + " and " +
                              std::to_string(a.rank()) + " differ; align first");
    same_alpha = same_alpha && a.alpha == first.alpha;
  }

  LoraAdapter out;
  out.layer_id = first.layer_id;
  out.alpha = same_alpha ? first.alpha : first.rank();
  out.down = Matrix::Zero(first.rank(), first.d_in());
  out.up = Matrix::Zero(first.d_out(), first.rank());
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const LoraAdapter& a = adapters[i];
    const double fold = same_alpha ? 1.0 : a.alpha / static_cast<double>(a.rank());
    out.down += weights[i] * a.down;
    out.up += (weights[i] * fold) * a.up;
  }
  return out;
}

LoraAdapter stack_adapters(std::span<const LoraAdapter> adapters,
                           std::span<const double> coeffs) {
  if (adapters.empty()) throw ArgumentError("stack_adapters: no adapters");
  if (adapters.size() != coeffs.size())
    throw ArgumentError("stack_adapters: adapter and coefficient counts differ");
  const LoraAdapter& first = adapters.front();
  int total_rank = 0;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const LoraAdapter& a = adapters[i];
    if (!std::isfinite(coeffs[i])) throw ArgumentError("stack_adapters: non-finite coefficient");
    if (a.layer_id != first.layer_id || a.d_in() != first.d_in() || a.d_out() != first.d_out())
      throw DimensionError("stack_adapters: layer " + a.layer_id + " does not match " +
                           first.layer_id);
    total_rank += a.rank();
  }
  if (total_rank > first.rank_bound())
    throw RankOverflowError("stack_adapters: stacked rank " + std::to_string(total_rank) +
                            " exceeds layer bound " + std::to_string(first.rank_bound()) +
                            " of " + first.layer_id);

  LoraAdapter out;
  out.layer_id = first.layer_id;
  out.alpha = total_rank;
  out.down.resize(total_rank, first.d_in());
  out.up.resize(first.d_out(), total_rank);
  Eigen::Index offset = 0;
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const LoraAdapter& a = adapters[i];
    out.down.middleRows(offset, a.rank()) = a.down;
    out.up.middleCols(offset, a.rank()) = a.up * (coeffs[i] * a.alpha / a.rank());
    offset += a.rank();
  }
  return out;
}

double energy_trace(const LoraAdapter& adapter) {
  return svd(adapter.delta()).singular_values.squaredNorm();
}

EnergyProfile snt_profile(const AdapterSet& adapters) {
  EnergyProfile p;
  double total = 0.0;
  for (const auto& [id, adapter] : adapters) {
    p.layers.push_back(id);
    p.raw.push_back(energy_trace(adapter));
    total += p.raw.back();
  }
  const std::size_t count = p.raw.size();
  p.normalized.resize(count);
  if (total > 0.0) {
    for (std::size_t i = 0; i < count; ++i) p.normalized[i] = p.raw[i] / total;
  } else {
    p.degenerate = true;
    std::fill(p.normalized.begin(), p.normalized.end(), count ? 1.0 / count : 0.0);
  }
  return p;
}

double snt_distance(const EnergyProfile& p, const EnergyProfile& q) {
  if (p.normalized.size() != q.normalized.size())
    throw ArgumentError("snt_distance: profiles have " + std::to_string(p.normalized.size()) +
                        " and " + std::to_string(q.normalized.size()) + " layers");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.normalized.size(); ++i)
    sum += std::abs(p.normalized[i] - q.normalized[i]);
  return std::clamp(0.5 * sum, 0.0, 1.0);
}

std::map<std::string, Matrix> dense_deltas(const AdapterSet& adapters) {
  std::map<std::string, Matrix> out;
  for (const auto& [id, adapter] : adapters) out.emplace(id, adapter.delta());
  return out;
}

}  // namespace edgefl::lowrank
