#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Dense>

namespace edgefl {

// Stateless 64-bit mixer (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

// Hashes a key together with a list of tags into a new key.
std::uint64_t derive_key(std::uint64_t key, std::initializer_list<std::uint64_t> tags);

// Purpose tags for stream derivation.
enum class Purpose : std::uint64_t {
  kData = 1,
  kInit = 2,
  kTraining = 3,
  kSampling = 4,
  kProjection = 5,
  kEvaluation = 6,
  kPretrain = 7,
};

// Deterministic random stream. Every stochastic operation takes one of these
// explicitly; streams fork by key so independent consumers never share state.
// Uniform and normal draws are computed here rather than through
// std::*_distribution so sequences do not depend on the standard library.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key = 0) : key_(key), engine_(mix64(key)) {}

  // Stream for (global seed, client id, round, purpose).
  static RngStream for_purpose(std::uint64_t seed, std::uint64_t client, std::uint64_t round,
                               Purpose purpose) {
    return RngStream(derive_key(seed, {client, round, static_cast<std::uint64_t>(purpose)}));
  }

  std::uint64_t key() const { return key_; }

  // Child stream keyed by (this key, tag); does not advance this stream.
  RngStream fork(std::uint64_t tag) const { return RngStream(derive_key(key_, {tag})); }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);

 private:
  std::uint64_t key_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace edgefl
