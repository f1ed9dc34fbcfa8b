#include "edgefl/diffusion.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "edgefl/errors.h"

namespace edgefl::diffusion {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Matrix activate(const Matrix& z, Activation act) {
  if (act == Activation::kIdentity) return z;
  return z.unaryExpr([](double v) { return v * sigmoid(v); });
}

Matrix activation_derivative(const Matrix& z, Activation act) {
  if (act == Activation::kIdentity) return Matrix::Ones(z.rows(), z.cols());
  return z.unaryExpr([](double v) {
    const double s = sigmoid(v);
    return s * (1.0 + v * (1.0 - s));
  });
}

std::uint64_t hash_matrix(std::uint64_t h, const Matrix& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      h = mix64(h ^ std::bit_cast<std::uint64_t>(m(i, j)));
  return h;
}

struct ForwardCache {
  std::vector<Matrix> weights;  // effective weights
  std::vector<Matrix> inputs;   // input to each layer, features x n
  std::vector<Matrix> pre;      // pre-activations
  Matrix output;                // 2 x n
};

Matrix build_input(const Matrix& x, const std::vector<int>& steps, const Matrix& conditioning) {
  const Eigen::Index n = x.rows();
  Matrix in(Denoiser::kDataDim + Denoiser::kTimeDim + Denoiser::kTokenDim, n);
  in.topRows(Denoiser::kDataDim) = x.transpose();
  for (Eigen::Index j = 0; j < n; ++j)
    in.block(Denoiser::kDataDim, j, Denoiser::kTimeDim, 1) = Denoiser::time_embedding(steps[j]);
  in.bottomRows(Denoiser::kTokenDim) = conditioning;
  return in;
}

ForwardCache forward(const Denoiser& denoiser, const AdapterSet* adapters, double scale,
                     Matrix input, bool keep) {
  ForwardCache cache;
  const auto& layers = denoiser.layers();
  cache.weights.reserve(layers.size());
  for (const DenseLayer& layer : layers) {
    if (adapters != nullptr) {
      auto it = adapters->find(layer.id);
      if (it != adapters->end()) {
        cache.weights.push_back(lowrank::apply_delta(layer.weight, it->second, scale));
        continue;
      }
    }
    cache.weights.push_back(layer.weight);
  }
  Matrix h = std::move(input);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix z = cache.weights[l] * h;
    z.colwise() += layers[l].bias;
    Matrix next = activate(z, layers[l].activation);
    if (keep) {
      cache.inputs.push_back(std::move(h));
      cache.pre.push_back(std::move(z));
    }
    h = std::move(next);
  }
  cache.output = std::move(h);
  return cache;
}

void check_batch(const Matrix& x, const char* what) {
  if (x.cols() != Denoiser::kDataDim)
    throw DimensionError(std::string(what) + ": points must have 2 columns");
  if (!x.allFinite()) throw NumericError(std::string(what) + ": non-finite points");
}

Matrix token_columns(const StyleToken& token, Eigen::Index n) {
  if (token.values.size() != Denoiser::kTokenDim)
    throw DimensionError("style token must have dimension " +
                         std::to_string(Denoiser::kTokenDim));
  if (!token.values.allFinite()) throw NumericError("style token has non-finite entries");
  return token.values.replicate(1, n);
}

// Generic pretraining concepts: blob centers and their conditioning tokens.
struct GenericConcept {
  Eigen::Vector2d center;
  double spread;
};

const std::vector<GenericConcept>& generic_concepts() {
  static const std::vector<GenericConcept> concepts = [] {
    std::vector<GenericConcept> c;
    for (int k = 0; k < 6; ++k) c.push_back({Eigen::Vector2d(2.0 * (k - 2.5), 0.0), 0.4});
    return c;
  }();
  return concepts;
}

Eigen::Vector2d generic_point(std::size_t k, RngStream& rng) {
  const auto& c = generic_concepts()[k];
  const double x = c.center.x() + c.spread * rng.normal();
  const double y = c.center.y() + c.spread * rng.normal();
  return Eigen::Vector2d(x, y);
}

const Matrix& generic_concept_tokens() {
  static const Matrix tokens = [] {
    RngStream rng(0xC0FFEEULL);
    return Matrix(rng.normal_matrix(Denoiser::kTokenDim, generic_concepts().size()));
  }();
  return tokens;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ArgumentError("schedule: need at least 2 steps");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start < beta_end))
    throw ArgumentError("schedule: need 0 < beta_start < beta_end < 1");
  DiffusionSchedule s;
  s.steps = steps;
  double running = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double b = beta_start + (beta_end - beta_start) * i / (steps - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
  }
  s.validate();
  return s;
}

void DiffusionSchedule::check_step(int t, const char* what) const {
  if (t < 1 || t > steps)
    throw ArgumentError(std::string(what) + ": step " + std::to_string(t) + " outside [1, " +
                        std::to_string(steps) + "]");
}

void DiffusionSchedule::validate() const {
  if (static_cast<int>(beta.size()) != steps) throw ArgumentError("schedule: length mismatch");
  for (int i = 0; i < steps; ++i) {
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw ArgumentError("schedule: beta outside (0, 1)");
    if (i > 0 && !(beta[i] > beta[i - 1]))
      throw ArgumentError("schedule: beta must be strictly increasing");
  }
  if (!(alpha_bar.back() < 0.05))
    throw ArgumentError("schedule: alpha_bar at the final step must be below 0.05");
}

// ---------------------------------------------------------------------------
// Tokens and the network

StyleToken StyleToken::neutral(int dim) { return {Vector::Zero(dim), TokenProvenance::kNeutral}; }

std::string_view to_string(TokenProvenance p) {
  switch (p) {
    case TokenProvenance::kNeutral:
      return "neutral";
    case TokenProvenance::kLearned:
      return "learned";
    case TokenProvenance::kAssigned:
      return "assigned";
  }
  return "unknown";
}

Denoiser::Denoiser(std::vector<DenseLayer> layers, std::vector<std::string> adaptable)
    : layers_(std::move(layers)), adaptable_(std::move(adaptable)) {
  check_shapes();
}

void Denoiser::check_shapes() const {
  if (layers_.empty()) throw ArgumentError("denoiser: no layers");
  Eigen::Index width = input_dim();
  for (const DenseLayer& l : layers_) {
    if (l.weight.cols() != width)
      throw DimensionError("denoiser: layer " + l.id + " expects input " +
                           std::to_string(l.weight.cols()) + ", chain provides " +
                           std::to_string(width));
    if (l.bias.size() != l.weight.rows())
      throw DimensionError("denoiser: bias of " + l.id + " does not match its weight");
    if (!l.weight.allFinite() || !l.bias.allFinite())
      throw NumericError("denoiser: layer " + l.id + " has non-finite parameters");
    width = l.weight.rows();
  }
  if (width != kDataDim) throw DimensionError("denoiser: output width must be 2");
  for (const std::string& id : adaptable_) layer(id);
}

Denoiser Denoiser::create(RngStream& rng, const Architecture& arch) {
  if (arch.hidden < 1 || arch.hidden_layers < 1) throw ArgumentError("denoiser: empty architecture");
  std::vector<DenseLayer> layers;
  Eigen::Index width = kDataDim + kTimeDim + kTokenDim;
  for (int l = 0; l <= arch.hidden_layers; ++l) {
    const bool last = l == arch.hidden_layers;
    const Eigen::Index out = last ? kDataDim : arch.hidden;
    DenseLayer layer;
    layer.id = "fc" + std::to_string(l);
    const double std_dev = (last ? 0.5 : 1.0) / std::sqrt(static_cast<double>(width));
    layer.weight = rng.normal_matrix(out, width) * std_dev;
    layer.bias = Vector::Zero(out);
    layer.activation = last ? Activation::kIdentity : Activation::kSilu;
    layers.push_back(std::move(layer));
    width = out;
  }
  return Denoiser(std::move(layers), arch.adaptable);
}

const DenseLayer& Denoiser::layer(std::string_view id) const {
  for (const DenseLayer& l : layers_)
    if (l.id == id) return l;
  throw ArgumentError("denoiser: unknown layer " + std::string(id));
}

std::size_t Denoiser::parameter_count() const {
  std::size_t count = 0;
  for (const DenseLayer& l : layers_) count += l.weight.size() + l.bias.size();
  return count;
}

std::uint64_t Denoiser::checksum() const {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (const DenseLayer& l : layers_) {
    h = hash_matrix(h, l.weight);
    h = hash_matrix(h, l.bias);
  }
  return h;
}

AdapterSet Denoiser::make_adapters(int rank, RngStream& rng) const {
  AdapterSet set;
  for (const std::string& id : adaptable_) {
    const DenseLayer& l = layer(id);
    const auto bound = std::min(l.weight.rows(), l.weight.cols());
    if (rank < 1 || rank > bound)
      throw ArgumentError("rank " + std::to_string(rank) + " outside [1, " +
                          std::to_string(bound) + "] for layer " + id);
    set.emplace(id, lowrank::LoraAdapter::initialized(id, rank, l.weight.cols(), l.weight.rows(),
                                                      rng));
  }
  return set;
}

void Denoiser::check_adapters(const AdapterSet& adapters) const {
  if (adapters.size() != adaptable_.size())
    throw DimensionError("adapter set covers " + std::to_string(adapters.size()) +
                         " layers, backbone designates " + std::to_string(adaptable_.size()));
  for (const std::string& id : adaptable_) {
    auto it = adapters.find(id);
    if (it == adapters.end()) throw DimensionError("adapter set lacks layer " + id);
    const DenseLayer& l = layer(id);
    const auto& a = it->second;
    if (a.d_in() != l.weight.cols() || a.d_out() != l.weight.rows())
      throw DimensionError("adapter for " + id + " has delta " + std::to_string(a.d_out()) + "x" +
                           std::to_string(a.d_in()) + ", layer is " +
                           std::to_string(l.weight.rows()) + "x" +
                           std::to_string(l.weight.cols()));
    a.validate();
  }
}

Vector Denoiser::time_embedding(int t) {
  Vector e(kTimeDim);
  for (int k = 0; k < kTimeDim / 2; ++k) {
    const double freq = std::pow(10.0, -0.5 * k);
    e(2 * k) = std::sin(t * freq);
    e(2 * k + 1) = std::cos(t * freq);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Data

const std::vector<std::string>& style_names() {
  static const std::vector<std::string> names = {"ring", "spiral", "moons", "grid"};
  return names;
}

SampleBatch make_style_dataset(std::string_view style, int n, RngStream& rng) {
  if (n < 1) throw ArgumentError("make_style_dataset: n must be positive");
  SampleBatch batch;
  batch.points.resize(n, 2);
  batch.style = std::string(style);
  constexpr double pi = std::numbers::pi;
  Eigen::Vector2d center;
  if (style == "ring") {
    center << 5.0, 5.0;
    for (int i = 0; i < n; ++i) {
      const double a = 2.0 * pi * rng.uniform();
      const double r = 1.0 + 0.08 * rng.normal();
      batch.points.row(i) << r * std::cos(a), r * std::sin(a);
    }
  } else if (style == "spiral") {
    center << -5.0, 5.0;
    for (int i = 0; i < n; ++i) {
      const double u = rng.uniform();
      const double a = 3.0 * pi * u;
      const double r = 0.3 + 1.4 * u;
      batch.points.row(i) << r * std::cos(a) + 0.06 * rng.normal(),
          r * std::sin(a) + 0.06 * rng.normal();
    }
  } else if (style == "moons") {
    center << 0.0, 10.0;
    for (int i = 0; i < n; ++i) {
      const double a = pi * rng.uniform();
      double x, y;
      if (rng.uniform() < 0.5) {
        x = std::cos(a);
        y = std::sin(a);
      } else {
        x = 1.0 - std::cos(a);
        y = 0.5 - std::sin(a);
      }
      batch.points.row(i) << 0.9 * (x - 0.5) + 0.07 * rng.normal(),
          0.9 * (y - 0.25) + 0.07 * rng.normal();
    }
  } else if (style == "grid") {
    center << 2.5, 10.0;
    for (int i = 0; i < n; ++i) {
      const int gx = static_cast<int>(rng.below(3));
      const int gy = static_cast<int>(rng.below(3));
      batch.points.row(i) << 0.6 * (gx - 1) + 0.05 * rng.normal(),
          0.6 * (gy - 1) + 0.05 * rng.normal();
    }
  } else {
    throw ArgumentError("make_style_dataset: unknown style '" + std::string(style) + "'");
  }
  batch.points.rowwise() += center.transpose();
  return batch;
}

SampleBatch make_generic_dataset(int n, RngStream& rng) {
  if (n < 1) throw ArgumentError("make_generic_dataset: n must be positive");
  const auto& concepts = generic_concepts();
  SampleBatch batch;
  batch.points.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    const auto k = rng.below(concepts.size());
    batch.points.row(i) = generic_point(k, rng).transpose();
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Diffusion process

SampleBatch forward_diffuse(const SampleBatch& x0, int t, const Matrix& noise,
                            const DiffusionSchedule& schedule) {
  schedule.check_step(t, "forward_diffuse");
  if (noise.rows() != x0.points.rows() || noise.cols() != x0.points.cols())
    throw DimensionError("forward_diffuse: noise shape differs from batch shape");
  const double ab = schedule.alpha_bar_at(t);
  SampleBatch out;
  out.points = std::sqrt(ab) * x0.points + std::sqrt(1.0 - ab) * noise;
  out.style = x0.style;
  return out;
}

Matrix predict_noise(const Denoiser& denoiser, const AdapterSet* adapters, double adapter_scale,
                     const Matrix& x_t, const std::vector<int>& steps, const StyleToken& token) {
  check_batch(x_t, "predict_noise");
  if (static_cast<Eigen::Index>(steps.size()) != x_t.rows())
    throw DimensionError("predict_noise: one step per row required");
  if (adapters) denoiser.check_adapters(*adapters);
  Matrix in = build_input(x_t, steps, token_columns(token, x_t.rows()));
  return forward(denoiser, adapters, adapter_scale, std::move(in), false).output.transpose();
}

Matrix predict_noise(const Denoiser& denoiser, const AdapterSet* adapters, double adapter_scale,
                     const Matrix& x_t, int t, const StyleToken& token) {
  if (t < 1) throw ArgumentError("predict_noise: step must be positive");
  return predict_noise(denoiser, adapters, adapter_scale, x_t,
                       std::vector<int>(x_t.rows(), t), token);
}

LossGradients loss_and_gradients(const Denoiser& denoiser, const AdapterSet* adapters,
                                 double adapter_scale, const Matrix& conditioning,
                                 const Matrix& x0, const std::vector<int>& steps,
                                 const Matrix& noise, const DiffusionSchedule& schedule,
                                 GradientRequest request) {
  check_batch(x0, "loss_and_gradients");
  const Eigen::Index n = x0.rows();
  if (n < 1) throw ArgumentError("loss_and_gradients: empty batch");
  if (noise.rows() != n || noise.cols() != 2 || static_cast<Eigen::Index>(steps.size()) != n ||
      conditioning.rows() != Denoiser::kTokenDim || conditioning.cols() != n)
    throw DimensionError("loss_and_gradients: inconsistent batch shapes");
  if (adapters) denoiser.check_adapters(*adapters);

  Matrix x_t(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    schedule.check_step(steps[i], "loss_and_gradients");
    const double ab = schedule.alpha_bar_at(steps[i]);
    x_t.row(i) = std::sqrt(ab) * x0.row(i) + std::sqrt(1.0 - ab) * noise.row(i);
  }

  ForwardCache cache =
      forward(denoiser, adapters, adapter_scale, build_input(x_t, steps, conditioning), true);
  const Matrix residual = cache.output - noise.transpose();
  const double count = static_cast<double>(residual.size());

  LossGradients g;
  g.loss = residual.squaredNorm() / count;

  const auto& layers = denoiser.layers();
  if (request.base) {
    g.weight_grads.resize(layers.size());
    g.bias_grads.resize(layers.size());
  }
  Matrix upstream = residual * (2.0 / count);  // d loss / d output
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Matrix dz =
        upstream.cwiseProduct(activation_derivative(cache.pre[l], layers[l].activation));
    const bool adapted = adapters != nullptr && adapters->count(layers[l].id) > 0;
    if (request.base || adapted) {
      const Matrix dw = dz * cache.inputs[l].transpose();
      if (adapted) {
        const auto& a = adapters->at(layers[l].id);
        const double f = adapter_scale * a.alpha / a.rank();
        lowrank::LoraAdapter grad;
        grad.layer_id = a.layer_id;
        grad.alpha = a.alpha;
        grad.up = f * dw * a.down.transpose();
        grad.down = f * a.up.transpose() * dw;
        g.adapter_grads.emplace(a.layer_id, std::move(grad));
      }
      if (request.base) {
        g.bias_grads[l] = dz.rowwise().sum();
        g.weight_grads[l] = dw;
      }
    }
    upstream = cache.weights[l].transpose() * dz;
  }
  g.token_grad = upstream.bottomRows(Denoiser::kTokenDim).rowwise().sum();
  return g;
}

LossGradients loss_and_gradients(const Denoiser& denoiser, const AdapterSet* adapters,
                                 double adapter_scale, const StyleToken& token, const Matrix& x0,
                                 const std::vector<int>& steps, const Matrix& noise,
                                 const DiffusionSchedule& schedule, GradientRequest request) {
  return loss_and_gradients(denoiser, adapters, adapter_scale, token_columns(token, x0.rows()), x0,
                            steps, noise, schedule, request);
}

TrainingStepResult training_step(const Denoiser& denoiser, const AdapterSet& adapters,
                                 double adapter_scale, const StyleToken& token,
                                 const SampleBatch& batch, Trainable mask, double learning_rate,
                                 const DiffusionSchedule& schedule, RngStream& rng,
                                 double max_grad_norm) {
  const Eigen::Index n = batch.size();
  if (n < 1) throw ArgumentError("training_step: empty batch");
  if (!std::isfinite(learning_rate) || learning_rate < 0.0)
    throw ArgumentError("training_step: learning rate must be finite and nonnegative");

  std::vector<int> steps(n);
  for (Eigen::Index i = 0; i < n; ++i)
    steps[i] = 1 + static_cast<int>(rng.below(schedule.steps));
  const Matrix noise = rng.normal_matrix(n, 2);

  const LossGradients g = loss_and_gradients(denoiser, &adapters, adapter_scale, token,
                                             batch.points, steps, noise, schedule);
  if (!std::isfinite(g.loss)) {
    std::ostringstream os;
    os << "training_step: non-finite loss (" << g.loss << "), token norm " << token.values.norm()
       << ", adapter energy";
    for (const auto& [id, a] : adapters) os << " " << id << "=" << a.up.norm() * a.down.norm();
    throw NumericError(os.str());
  }

  const bool train_adapters = mask == Trainable::kAdapters || mask == Trainable::kBoth;
  const bool train_token = mask == Trainable::kToken || mask == Trainable::kBoth;
  double step = learning_rate;
  if (max_grad_norm > 0.0) {
    double sq = train_token ? g.token_grad.squaredNorm() : 0.0;
    if (train_adapters)
      for (const auto& [id, grad] : g.adapter_grads)
        sq += grad.up.squaredNorm() + grad.down.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_grad_norm) step *= max_grad_norm / norm;
  }

  TrainingStepResult out{g.loss, adapters, token};
  if (train_adapters) {
    for (auto& [id, a] : out.adapters) {
      const auto& grad = g.adapter_grads.at(id);
      a.up -= step * grad.up;
      a.down -= step * grad.down;
    }
  }
  if (train_token) {
    out.token.values -= step * g.token_grad;
    out.token.provenance = TokenProvenance::kLearned;
  }
  return out;
}

Matrix initial_latent(int n, const RngStream& stream) {
  RngStream init = stream.fork(0);
  return init.normal_matrix(n, 2);
}

Matrix ddpm_denoise(const Denoiser& denoiser, const AdapterSet* adapters, double adapter_scale,
                    const StyleToken& token, Matrix x, int from_step, int to_step,
                    const DiffusionSchedule& schedule, const RngStream& stream) {
  schedule.check_step(from_step, "ddpm_denoise");
  if (to_step < 0 || to_step > from_step)
    throw ArgumentError("ddpm_denoise: target step must lie in [0, from_step]");
  check_batch(x, "ddpm_denoise");
  if (adapters) denoiser.check_adapters(*adapters);
  const Matrix conditioning = token_columns(token, x.rows());
  std::vector<int> steps(x.rows());
  for (int t = from_step; t > to_step; --t) {
    std::fill(steps.begin(), steps.end(), t);
    const Matrix eps =
        forward(denoiser, adapters, adapter_scale, build_input(x, steps, conditioning), false)
            .output.transpose();
    const double beta = schedule.beta_at(t);
    const double alpha = schedule.alpha_at(t);
    const double ab = schedule.alpha_bar_at(t);
    x = (x - (beta / std::sqrt(1.0 - ab)) * eps) / std::sqrt(alpha);
    if (t > 1) {
      const double ab_prev = schedule.alpha_bar_at(t - 1);
      const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
      RngStream step_rng = stream.fork(static_cast<std::uint64_t>(t));
      x += sigma * step_rng.normal_matrix(x.rows(), 2);
    }
  }
  return x;
}

SampleBatch ddpm_sample(const Denoiser& denoiser, const AdapterSet* adapters,
                        double adapter_scale, const StyleToken& token, int n,
                        const DiffusionSchedule& schedule, const RngStream& stream,
                        const std::optional<SampleStart>& start) {
  if (n < 1) throw ArgumentError("ddpm_sample: n must be positive");
  SampleBatch out;
  if (start) {
    if (start->step <= 0 || start->step >= schedule.steps)
      throw ArgumentError("ddpm_sample: start step " + std::to_string(start->step) +
                          " outside (0, " + std::to_string(schedule.steps) + ")");
    if (start->latent.rows() != n)
      throw DimensionError("ddpm_sample: start latent has " + std::to_string(start->latent.rows()) +
                           " rows, expected " + std::to_string(n));
    out.points = ddpm_denoise(denoiser, adapters, adapter_scale, token, start->latent, start->step,
                              0, schedule, stream);
  } else {
    out.points = ddpm_denoise(denoiser, adapters, adapter_scale, token, initial_latent(n, stream),
                              schedule.steps, 0, schedule, stream);
  }
  return out;
}

std::vector<int> shuffled_indices(int n, RngStream& rng) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  for (int i = n - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
  return idx;
}

TokenLearningResult learn_style_token(const Denoiser& denoiser, const AdapterSet* adapters,
                                      double adapter_scale, const SampleBatch& batch, int epochs,
                                      double learning_rate, int batch_size,
                                      const DiffusionSchedule& schedule, RngStream& rng) {
  if (batch_size < 1) throw ArgumentError("learn_style_token: batch size must be positive");
  TokenLearningResult result{StyleToken::neutral(Denoiser::kTokenDim), {}};
  if (epochs <= 0) return result;
  const int n = static_cast<int>(batch.size());
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const std::vector<int> order = shuffled_indices(n, rng);
    for (int begin = 0; begin < n; begin += batch_size) {
      const int count = std::min(batch_size, n - begin);
      SampleBatch mini;
      mini.points.resize(count, 2);
      for (int i = 0; i < count; ++i) mini.points.row(i) = batch.points.row(order[begin + i]);
      std::vector<int> steps(count);
      for (int i = 0; i < count; ++i) steps[i] = 1 + static_cast<int>(rng.below(schedule.steps));
      const Matrix noise = rng.normal_matrix(count, 2);
      const LossGradients g =
          loss_and_gradients(denoiser, adapters, adapter_scale, result.token,
                             mini.points, steps, noise, schedule);
      if (!std::isfinite(g.loss)) throw NumericError("learn_style_token: non-finite loss");
      result.losses.push_back(g.loss);
      result.token.values -= learning_rate * g.token_grad;
    }
  }
  result.token.provenance = TokenProvenance::kLearned;
  return result;
}

double pretrain(Denoiser& denoiser, const DiffusionSchedule& schedule,
                const PretrainOptions& options, RngStream& rng) {
  const auto& concepts = generic_concepts();
  const Matrix& concept_tokens = generic_concept_tokens();
  auto& layers = denoiser.mutable_layers();
  std::vector<Matrix> m_w, v_w;
  std::vector<Vector> m_b, v_b;
  for (const DenseLayer& l : layers) {
    m_w.push_back(Matrix::Zero(l.weight.rows(), l.weight.cols()));
    v_w.push_back(m_w.back());
    m_b.push_back(Vector::Zero(l.bias.size()));
    v_b.push_back(m_b.back());
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double smoothed = 0.0;
  const int bs = options.batch_size;
  for (int step = 1; step <= options.steps; ++step) {
    Matrix x0(bs, 2);
    Matrix cond = Matrix::Zero(Denoiser::kTokenDim, bs);
    for (int i = 0; i < bs; ++i) {
      const auto k = rng.below(concepts.size());
      x0.row(i) = generic_point(k, rng).transpose();
      // Half of the examples keep the neutral token.
      if (rng.uniform() < 0.5) cond.col(i) = concept_tokens.col(k);
    }
    std::vector<int> steps(bs);
    for (int i = 0; i < bs; ++i) steps[i] = 1 + static_cast<int>(rng.below(schedule.steps));
    const Matrix noise = rng.normal_matrix(bs, 2);
    const LossGradients g = loss_and_gradients(denoiser, nullptr, 0.0, cond, x0, steps, noise,
                                               schedule, GradientRequest{.base = true});
    smoothed = step == 1 ? g.loss : 0.99 * smoothed + 0.01 * g.loss;
    const double lr = options.learning_rate * std::min(1.0, 2.0 * (options.steps - step + 1) /
                                                                options.steps);
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      m_w[l] = b1 * m_w[l] + (1 - b1) * g.weight_grads[l];
      v_w[l] = b2 * v_w[l] + (1 - b2) * g.weight_grads[l].cwiseAbs2();
      layers[l].weight.array() -=
          lr * (m_w[l].array() / c1) / ((v_w[l].array() / c2).sqrt() + eps);
      m_b[l] = b1 * m_b[l] + (1 - b1) * g.bias_grads[l];
      v_b[l] = b2 * v_b[l] + (1 - b2) * g.bias_grads[l].cwiseAbs2();
      layers[l].bias.array() -= lr * (m_b[l].array() / c1) / ((v_b[l].array() / c2).sqrt() + eps);
    }
  }
  return smoothed;
}

}  // namespace edgefl::diffusion
