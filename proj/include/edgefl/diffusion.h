#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "edgefl/lowrank.h"
#include "edgefl/rng.h"

namespace edgefl::diffusion {

using lowrank::AdapterSet;
using lowrank::Matrix;
using lowrank::Vector;

// Variance schedule indexed by step t in [1, steps].
struct DiffusionSchedule {
  int steps = 50;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  static DiffusionSchedule linear(int steps = 50, double beta_start = 1e-4, double beta_end = 0.12);

  double beta_at(int t) const { return beta[t - 1]; }
  double alpha_at(int t) const { return alpha[t - 1]; }
  double alpha_bar_at(int t) const { return alpha_bar[t - 1]; }

  void check_step(int t, const char* what) const;
  void validate() const;
};

enum class TokenProvenance { kNeutral, kLearned, kAssigned };

struct StyleToken {
  Vector values;
  TokenProvenance provenance = TokenProvenance::kNeutral;

  static StyleToken neutral(int dim);
};

std::string_view to_string(TokenProvenance p);

enum class Activation { kSilu, kIdentity };

struct DenseLayer {
  std::string id;
  Matrix weight;  // out x in
  Vector bias;
  Activation activation = Activation::kSilu;
};

// Conditional noise-prediction MLP. Input is [x (2) | time embedding | token].
class Denoiser {
 public:
  static constexpr int kDataDim = 2;
  static constexpr int kTimeDim = 8;
  static constexpr int kTokenDim = 8;

  struct Architecture {
    int hidden = 64;
    int hidden_layers = 5;  // number of 64-wide activations
    std::vector<std::string> adaptable = {"fc2", "fc3"};
  };

  Denoiser() = default;
  Denoiser(std::vector<DenseLayer> layers, std::vector<std::string> adaptable);

  // Fresh network with scaled Gaussian weights and zero biases.
  static Denoiser create(RngStream& rng, const Architecture& arch);
  static Denoiser create(RngStream& rng) { return create(rng, Architecture{}); }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }
  const std::vector<std::string>& adaptable_layers() const { return adaptable_; }
  const DenseLayer& layer(std::string_view id) const;
  int input_dim() const { return kDataDim + kTimeDim + kTokenDim; }

  std::size_t parameter_count() const;
  // Order-sensitive hash of every weight and bias bit pattern.
  std::uint64_t checksum() const;

  // Adapters for every adaptable layer: zero up factor, Gaussian down factor.
  // Ranks above a layer's bound are rejected.
  AdapterSet make_adapters(int rank, RngStream& rng) const;
  // Throws unless the key set and per-layer shapes match this network.
  void check_adapters(const AdapterSet& adapters) const;

  static Vector time_embedding(int t);

 private:
  void check_shapes() const;

  std::vector<DenseLayer> layers_;
  std::vector<std::string> adaptable_;
};

struct SampleBatch {
  Matrix points;  // n x 2
  std::optional<std::string> style;  // evaluation label, never serialized

  Eigen::Index size() const { return points.rows(); }
};

const std::vector<std::string>& style_names();

// 2-D style populations standing in for image domains.
SampleBatch make_style_dataset(std::string_view style, int n, RngStream& rng);
// Generic distribution the backbone is pretrained on.
SampleBatch make_generic_dataset(int n, RngStream& rng);

SampleBatch forward_diffuse(const SampleBatch& x0, int t, const Matrix& noise,
                            const DiffusionSchedule& schedule);

// Noise prediction for every row of x_t at a common step. adapters may be
// null; when present each adaptable layer uses apply_delta(W, adapter, scale).
Matrix predict_noise(const Denoiser& denoiser, const AdapterSet* adapters, double adapter_scale,
                     const Matrix& x_t, int t, const StyleToken& token);

// Per-row step variant used by training.
Matrix predict_noise(const Denoiser& denoiser, const AdapterSet* adapters, double adapter_scale,
                     const Matrix& x_t, const std::vector<int>& steps, const StyleToken& token);

// Loss and analytic gradients of mean((eps_hat - eps)^2) for fixed steps and
// noise. Gradients are filled for adapters (always, when present) and the
// token; base gradients only when requested.
struct LossGradients {
  double loss = 0.0;
  AdapterSet adapter_grads;  // up/down hold d loss / d factor
  Vector token_grad;
  std::vector<Matrix> weight_grads;
  std::vector<Vector> bias_grads;
};

struct GradientRequest {
  bool base = false;
};

LossGradients loss_and_gradients(const Denoiser& denoiser, const AdapterSet* adapters,
                                 double adapter_scale, const StyleToken& token, const Matrix& x0,
                                 const std::vector<int>& steps, const Matrix& noise,
                                 const DiffusionSchedule& schedule, GradientRequest request = {});

// Same loss with a per-example conditioning matrix (kTokenDim x n); used for
// pretraining the backbone.
LossGradients loss_and_gradients(const Denoiser& denoiser, const AdapterSet* adapters,
                                 double adapter_scale, const Matrix& conditioning,
                                 const Matrix& x0, const std::vector<int>& steps,
                                 const Matrix& noise, const DiffusionSchedule& schedule,
                                 GradientRequest request);

enum class Trainable { kAdapters, kToken, kBoth };

struct TrainingStepResult {
  double loss = 0.0;  // before the update
  AdapterSet adapters;
  StyleToken token;
};

// One gradient-descent step on the masked parameter groups. Base weights are
// never touched. Draws one step and one noise vector per example from rng.
// A positive max_grad_norm rescales the joint masked gradient to at most that
// norm.
TrainingStepResult training_step(const Denoiser& denoiser, const AdapterSet& adapters,
                                 double adapter_scale, const StyleToken& token,
                                 const SampleBatch& batch, Trainable mask, double learning_rate,
                                 const DiffusionSchedule& schedule, RngStream& rng,
                                 double max_grad_norm = 0.0);

// Reverse process from x_{from_step} down to x_{to_step}. Step t's noise is
// drawn from stream.fork(t), so a run split at any step and resumed with the
// same stream reproduces the unsplit run exactly.
Matrix ddpm_denoise(const Denoiser& denoiser, const AdapterSet* adapters, double adapter_scale,
                    const StyleToken& token, Matrix x, int from_step, int to_step,
                    const DiffusionSchedule& schedule, const RngStream& stream);

// x_T for n points under the given stream.
Matrix initial_latent(int n, const RngStream& stream);

struct SampleStart {
  Matrix latent;
  int step = 0;
};

SampleBatch ddpm_sample(const Denoiser& denoiser, const AdapterSet* adapters,
                        double adapter_scale, const StyleToken& token, int n,
                        const DiffusionSchedule& schedule, const RngStream& stream,
                        const std::optional<SampleStart>& start = std::nullopt);

struct TokenLearningResult {
  StyleToken token;
  std::vector<double> losses;
};

// Textual inversion: optimizes only the token, starting from the neutral one.
TokenLearningResult learn_style_token(const Denoiser& denoiser, const AdapterSet* adapters,
                                      double adapter_scale, const SampleBatch& batch, int epochs,
                                      double learning_rate, int batch_size,
                                      const DiffusionSchedule& schedule, RngStream& rng);

struct PretrainOptions {
  int steps = 4000;
  int batch_size = 128;
  double learning_rate = 2e-3;
};

// Full-weight Adam training of the backbone on the generic distribution.
// Returns the final moving-average loss.
double pretrain(Denoiser& denoiser, const DiffusionSchedule& schedule,
                const PretrainOptions& options, RngStream& rng);

// Minibatch order for one epoch (Fisher-Yates with the stream).
std::vector<int> shuffled_indices(int n, RngStream& rng);

}  // namespace edgefl::diffusion
