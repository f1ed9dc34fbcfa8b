#include "edgefl/metrics.h"

#include <cmath>
#include <numeric>

#include "edgefl/errors.h"
#include "edgefl/federation.h"

namespace edgefl::metrics {

GaussianFit fit_gaussian(const Eigen::MatrixXd& points) {
  if (points.cols() != 2) throw DimensionError("fit_gaussian: points must have 2 columns");
  const Eigen::Index n = points.rows();
  if (n < 2) throw ArgumentError("fit_gaussian: need at least 2 points");
  if (!points.allFinite()) throw NumericError("fit_gaussian: non-finite points");
  GaussianFit fit;
  fit.mean = points.colwise().mean().transpose();
  const Eigen::MatrixXd centered = points.rowwise() - fit.mean.transpose();
  fit.raw_covariance = (centered.transpose() * centered) / static_cast<double>(n - 1);
  // Exact symmetry regardless of summation order.
  fit.raw_covariance(1, 0) = fit.raw_covariance(0, 1);
  fit.covariance = fit.raw_covariance + kCovarianceRegularization * Eigen::Matrix2d::Identity();
  return fit;
}

GaussianFit fit_gaussian(const diffusion::SampleBatch& batch) { return fit_gaussian(batch.points); }

double frechet_2d(const GaussianFit& a, const GaussianFit& b) {
  const Eigen::Matrix2d product = a.covariance * b.covariance;
  const double det = product.determinant();
  const double tr = product.trace();
  constexpr double tol = 1e-9;
  if (det < -tol) throw NumericError("frechet_2d: covariance product has negative determinant");
  // Eigenvalues of a product of PSD matrices are real and nonnegative, so
  // tr(sqrt(P)) = sqrt(l1) + sqrt(l2) = sqrt(tr P + 2 sqrt(det P)).
  const double inner = tr + 2.0 * std::sqrt(std::max(det, 0.0));
  if (inner < -tol) throw NumericError("frechet_2d: covariance product is not PSD");
  const double sqrt_trace = std::sqrt(std::max(inner, 0.0));
  const double d = (a.mean - b.mean).squaredNorm() + a.covariance.trace() +
                   b.covariance.trace() - 2.0 * sqrt_trace;
  if (d < -tol) throw NumericError("frechet_2d: negative distance " + std::to_string(d));
  return std::max(d, 0.0);
}

double frechet_2d(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return frechet_2d(fit_gaussian(a), fit_gaussian(b));
}

double cluster_purity(const federation::ClusterAssignment& assignment,
                      const std::map<int, std::string>& truth) {
  if (truth.empty()) return 1.0;
  std::size_t majority_total = 0;
  for (const auto& members : assignment.members) {
    std::map<std::string, std::size_t> counts;
    for (int client : members) {
      auto it = truth.find(client);
      if (it != truth.end()) ++counts[it->second];
    }
    std::size_t best = 0;
    for (const auto& [label, count] : counts) best = std::max(best, count);
    majority_total += best;
  }
  for (const auto& [client, label] : truth)
    if (!assignment.cluster_of.contains(client))
      throw ArgumentError("cluster_purity: client " + std::to_string(client) + " is unassigned");
  return static_cast<double>(majority_total) / static_cast<double>(truth.size());
}

std::vector<EnergyRow> energy_report(const std::vector<lowrank::AdapterSet>& members,
                                     const lowrank::AdapterSet& fedavg,
                                     const lowrank::AdapterSet& stacked) {
  if (members.empty()) throw ArgumentError("energy_report: no members");
  std::vector<EnergyRow> rows;
  for (const auto& [layer, avg] : fedavg) {
    EnergyRow row;
    row.layer = layer;
    for (const auto& m : members) {
      auto it = m.find(layer);
      if (it == m.end()) throw DimensionError("energy_report: member lacks layer " + layer);
      row.member_energy.push_back(lowrank::energy_trace(it->second));
    }
    auto st = stacked.find(layer);
    if (st == stacked.end()) throw DimensionError("energy_report: stacked set lacks " + layer);
    row.fedavg_energy = lowrank::energy_trace(avg);
    row.stacked_energy = lowrank::energy_trace(st->second);
    const double mean = std::accumulate(row.member_energy.begin(), row.member_energy.end(), 0.0) /
                        row.member_energy.size();
    row.cancellation_ratio = mean > 0.0 ? row.fedavg_energy / mean : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<double> stacked_block_energies(const lowrank::LoraAdapter& stacked,
                                           const std::vector<int>& member_ranks) {
  const int total = std::accumulate(member_ranks.begin(), member_ranks.end(), 0);
  if (total != stacked.rank())
    throw DimensionError("stacked_block_energies: member ranks sum to " + std::to_string(total) +
                         ", adapter rank is " + std::to_string(stacked.rank()));
  std::vector<double> out;
  Eigen::Index offset = 0;
  const double factor = stacked.alpha / stacked.rank();
  for (int r : member_ranks) {
    lowrank::LoraAdapter block;
    block.layer_id = stacked.layer_id;
    block.down = stacked.down.middleRows(offset, r);
    block.up = stacked.up.middleCols(offset, r) * factor;
    block.alpha = r;
    out.push_back(lowrank::energy_trace(block));
    offset += r;
  }
  return out;
}

double neutrality_score(const std::vector<Eigen::MatrixXd>& latents) {
  if (latents.size() < 2) return 0.0;
  double total = 0.0;
  int pairs = 0;
  std::vector<GaussianFit> fits;
  for (const auto& l : latents) fits.push_back(fit_gaussian(l));
  for (std::size_t i = 0; i < fits.size(); ++i)
    for (std::size_t j = i + 1; j < fits.size(); ++j) {
      total += frechet_2d(fits[i], fits[j]);
      ++pairs;
    }
  return total / pairs;
}

}  // namespace edgefl::metrics
