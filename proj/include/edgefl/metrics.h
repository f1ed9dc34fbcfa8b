#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "edgefl/diffusion.h"
#include "edgefl/lowrank.h"

namespace edgefl::federation {
struct ClusterAssignment;
}

namespace edgefl::metrics {

struct GaussianFit {
  Eigen::Vector2d mean;
  Eigen::Matrix2d covariance;      // regularized
  Eigen::Matrix2d raw_covariance;  // before the 1e-9 diagonal shift
};

inline constexpr double kCovarianceRegularization = 1e-9;

// Sample mean and unbiased covariance (divisor n - 1).
GaussianFit fit_gaussian(const diffusion::SampleBatch& batch);
GaussianFit fit_gaussian(const Eigen::MatrixXd& points);

// Squared Frechet distance between two Gaussians, with the trace of the
// 2x2 matrix square root taken in closed form.
double frechet_2d(const GaussianFit& a, const GaussianFit& b);

// Convenience: fit both batches then compare.
double frechet_2d(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

double cluster_purity(const federation::ClusterAssignment& assignment,
                      const std::map<int, std::string>& truth);

struct EnergyRow {
  std::string layer;
  std::vector<double> member_energy;
  double fedavg_energy = 0.0;
  double stacked_energy = 0.0;
  double cancellation_ratio = 0.0;  // fedavg energy / mean member energy
};

std::vector<EnergyRow> energy_report(const std::vector<lowrank::AdapterSet>& members,
                                     const lowrank::AdapterSet& fedavg,
                                     const lowrank::AdapterSet& stacked);

// Energy of each member's block inside a stacked adapter (blocks are laid out
// in member order with the given ranks).
std::vector<double> stacked_block_energies(const lowrank::LoraAdapter& stacked,
                                           const std::vector<int>& member_ranks);

// Mean pairwise Frechet distance between server-side latent populations.
double neutrality_score(const std::vector<Eigen::MatrixXd>& latents);

}  // namespace edgefl::metrics
