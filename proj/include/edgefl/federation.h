#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "edgefl/diffusion.h"
#include "edgefl/lowrank.h"
#include "edgefl/rng.h"

namespace edgefl::federation {

using diffusion::StyleToken;
using lowrank::AdapterSet;
using lowrank::Vector;

inline constexpr int kEmbeddingDim = 16;

// Opaque unit-norm encoding of a client's style token.
struct DomainEmbedding {
  int client_id = -1;
  Vector values;
  bool fallback = false;  // projection was zero; perturbed direction used
};

// Fixed random projection keyed by salt, then normalization.
DomainEmbedding encode_domain(const StyleToken& token, std::uint64_t salt, int client_id = -1);

double cosine(const Vector& a, const Vector& b);

struct ClusterAssignment {
  std::map<int, int> cluster_of;          // client id -> cluster id
  std::vector<std::vector<int>> members;  // ascending client ids
  std::vector<Vector> centroids;          // normalized mean member embedding

  int cluster_count() const { return static_cast<int>(members.size()); }
};

// Average-linkage agglomerative clustering on cosine similarity; merging
// stops once no pair of clusters reaches tau_c. Cluster ids follow the
// smallest member id.
ClusterAssignment cluster_clients(std::span<const DomainEmbedding> embeddings, double tau_c);

inline constexpr int kAllowedRanks[] = {4, 8, 16, 64, 128};
bool is_allowed_rank(int rank);

struct ClientProfile {
  int client_id = 0;
  int rank = 16;
  AdapterSet adapters;
  StyleToken token;
  DomainEmbedding embedding;
  int sample_count = 0;
  diffusion::SampleBatch data;  // stays on the device

  void validate() const;
};

// Per layer: median rank, align every member to it, weighted factor average.
// Default weights are uniform.
AdapterSet intra_cluster_aggregate(std::span<const AdapterSet> members,
                                   const std::optional<std::vector<double>>& weights = {});
AdapterSet intra_cluster_aggregate(std::span<const ClientProfile> members,
                                   const std::optional<std::vector<double>>& weights = {});

// 1 - cosine(centroid, reference), in [0, 2].
double ded(const Vector& cluster_centroid, const Vector& reference);

struct ClusterModel {
  int cluster_id = 0;
  AdapterSet adapters;
  Vector centroid;
};

struct ClusterCoefficient {
  int cluster_id = 0;
  double ded = 0.0;
  double snt_dist = 0.0;
  double weight = 0.0;
  bool filtered = false;
};

struct AggregationCoefficients {
  std::vector<ClusterCoefficient> clusters;
  bool all_filtered_fallback = false;
  bool degenerate_snt = false;
};

// DED gating against the normalized mean centroid, then a softmax over
// -lambda_snt * snt_distance(profile, mean surviving profile).
AggregationCoefficients compute_coefficients(std::span<const ClusterModel> clusters,
                                             double tau_ded = 0.8, double lambda_snt = 4.0);

struct GlobalAggregate {
  AdapterSet adapters;
  bool rank_overflow = false;
  std::map<std::string, int> stacked_rank;  // rank before any overflow truncation
};

// Stacks surviving cluster adapters per layer with their weights. Layers
// whose stacked rank exceeds the layer bound are truncated to the bound and
// flagged.
GlobalAggregate inter_cluster_aggregate(std::span<const ClusterModel> clusters,
                                        const AggregationCoefficients& coefficients);

// Baseline: align to the global median rank, factor average weighted by
// sample count.
AdapterSet fedavg_aggregate(std::span<const AdapterSet> adapters,
                            std::span<const int> sample_counts);
AdapterSet fedavg_aggregate(std::span<const ClientProfile> profiles);

struct GeoMedResult {
  AdapterSet adapters;
  int iterations = 0;  // largest count over layers
  bool converged = true;
};

struct GeoMedOptions {
  double tol = 1e-9;
  int max_iter = 1000;
  double epsilon = 1e-12;
};

// Baseline: per layer Weiszfeld geometric median of the vectorized (up | down)
// factors after median-rank alignment.
GeoMedResult geomed_aggregate(std::span<const AdapterSet> adapters, const GeoMedOptions& options = {});
GeoMedResult geomed_aggregate(std::span<const ClientProfile> profiles,
                              const GeoMedOptions& options = {});

// Weiszfeld iteration on points stored as columns. Exposed for testing.
struct WeiszfeldResult {
  Vector point;
  int iterations = 0;
  bool converged = true;
};
WeiszfeldResult weiszfeld(const Eigen::MatrixXd& points, const GeoMedOptions& options = {});

struct FinetuneOptions {
  int epochs = 1;
  double learning_rate = 0.05;
  int batch_size = 2;
  double adapter_scale = 1.0;
  double max_grad_norm = 0.0;  // 0 disables clipping
};

struct FinetuneResult {
  ClientProfile profile;
  std::vector<double> losses;
};

// Trains adapters and token together over epochs * ceil(n / batch) steps and
// refreshes the domain embedding.
FinetuneResult local_finetune(const ClientProfile& profile, const diffusion::Denoiser& denoiser,
                              const FinetuneOptions& options,
                              const diffusion::DiffusionSchedule& schedule, RngStream& rng,
                              std::uint64_t embedding_salt);

}  // namespace edgefl::federation
