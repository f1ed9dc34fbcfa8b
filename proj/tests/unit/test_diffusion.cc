#include <doctest.h>

#include <cmath>

#include "edgefl/diffusion.h"
#include "edgefl/errors.h"

using namespace edgefl;
using diffusion::Denoiser;
using diffusion::Matrix;
using diffusion::StyleToken;
using diffusion::Vector;

namespace {

StyleToken random_token(RngStream& rng) {
  StyleToken t;
  t.values = rng.normal_matrix(Denoiser::kTokenDim, 1).col(0);
  t.provenance = diffusion::TokenProvenance::kLearned;
  return t;
}

lowrank::AdapterSet active_adapters(const Denoiser& net, int rank, RngStream& rng) {
  auto a = net.make_adapters(rank, rng);
  for (auto& [id, ad] : a) ad.up = 0.1 * rng.normal_matrix(ad.up.rows(), ad.up.cols());
  return a;
}

// Straightforward per-row forward pass.
Vector reference_forward(const Denoiser& net, const lowrank::AdapterSet* adapters, double scale,
                         const Eigen::Vector2d& x, int t, const StyleToken& token) {
  Vector h(net.input_dim());
  h << x, Denoiser::time_embedding(t), token.values;
  for (const auto& layer : net.layers()) {
    Matrix w = layer.weight;
    if (adapters && adapters->contains(layer.id)) {
      const auto& a = adapters->at(layer.id);
      w += scale * (a.alpha / a.rank()) * a.up * a.down;
    }
    Vector z = w * h + layer.bias;
    if (layer.activation == diffusion::Activation::kSilu)
      for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = z(i) / (1.0 + std::exp(-z(i)));
    h = z;
  }
  return h;
}

}  // namespace

TEST_CASE("linear schedule") {
  const auto s = diffusion::DiffusionSchedule::linear(50, 1e-4, 0.12);
  CHECK(s.beta_at(1) == doctest::Approx(1e-4));
  CHECK(s.beta_at(50) == doctest::Approx(0.12));
  double product = 1.0;
  for (int t = 1; t <= 50; ++t) {
    product *= 1.0 - (1e-4 + (0.12 - 1e-4) * (t - 1) / 49.0);
    CHECK(s.alpha_bar_at(t) == doctest::Approx(product).epsilon(1e-12));
  }
  CHECK_THROWS_AS(s.check_step(0, "x"), ArgumentError);
  CHECK_THROWS_AS(s.check_step(51, "x"), ArgumentError);
  CHECK_THROWS_AS(diffusion::DiffusionSchedule::linear(50, 0.2, 0.1), ArgumentError);
  CHECK_THROWS_AS(diffusion::DiffusionSchedule::linear(1), ArgumentError);
}

TEST_CASE("forward diffusion") {
  const auto s = diffusion::DiffusionSchedule::linear();
  RngStream rng(1);
  diffusion::SampleBatch x0;
  x0.points = rng.normal_matrix(5, 2);
  const Matrix noise = rng.normal_matrix(5, 2);
  const auto xt = diffusion::forward_diffuse(x0, 20, noise, s);
  const double ab = s.alpha_bar_at(20);
  CHECK((xt.points - (std::sqrt(ab) * x0.points + std::sqrt(1 - ab) * noise)).norm() < 1e-14);
  CHECK_THROWS_AS(diffusion::forward_diffuse(x0, 20, rng.normal_matrix(4, 2), s), DimensionError);
}

TEST_CASE("network shape and adapters") {
  RngStream rng(2);
  const Denoiser net = Denoiser::create(rng);
  CHECK(net.input_dim() == 18);
  CHECK(net.layers().size() == 6);
  CHECK(net.layers().back().weight.rows() == 2);
  CHECK(net.adaptable_layers() == std::vector<std::string>{"fc2", "fc3"});
  const auto a = net.make_adapters(16, rng);
  CHECK(a.size() == 2);
  for (const auto& [id, ad] : a) {
    CHECK(ad.rank() == 16);
    CHECK(ad.up.norm() == 0.0);
  }
  CHECK_THROWS(net.make_adapters(65, rng));
  auto wrong = a;
  wrong.erase("fc3");
  CHECK_THROWS(net.check_adapters(wrong));
}

TEST_CASE("predict_noise matches a per-row reference") {
  RngStream rng(3);
  const Denoiser net = Denoiser::create(rng);
  const auto adapters = active_adapters(net, 4, rng);
  const StyleToken token = random_token(rng);
  const Matrix x = rng.normal_matrix(6, 2);
  const std::vector<int> steps = {1, 5, 10, 25, 40, 50};
  const Matrix eps = diffusion::predict_noise(net, &adapters, 0.7, x, steps, token);
  for (int i = 0; i < 6; ++i) {
    const Vector ref = reference_forward(net, &adapters, 0.7, x.row(i).transpose(), steps[i], token);
    CHECK((eps.row(i).transpose() - ref).norm() < 1e-12);
  }
}

TEST_CASE("zero adapters leave predictions unchanged") {
  RngStream rng(4);
  const Denoiser net = Denoiser::create(rng);
  const auto adapters = net.make_adapters(8, rng);
  const StyleToken token = random_token(rng);
  const Matrix x = rng.normal_matrix(10, 2);
  const Matrix a = diffusion::predict_noise(net, &adapters, 1.0, x, 7, token);
  const Matrix b = diffusion::predict_noise(net, nullptr, 0.0, x, 7, token);
  CHECK((a.array() == b.array()).all());
}

TEST_CASE("token and base gradients match finite differences") {
  RngStream rng(5);
  const Denoiser net = Denoiser::create(rng);
  const auto schedule = diffusion::DiffusionSchedule::linear();
  const auto adapters = active_adapters(net, 4, rng);
  const StyleToken token = random_token(rng);
  const Matrix x0 = rng.normal_matrix(3, 2);
  const Matrix noise = rng.normal_matrix(3, 2);
  const std::vector<int> steps = {3, 17, 44};
  const auto g = diffusion::loss_and_gradients(net, &adapters, 1.0, token, x0, steps, noise,
                                               schedule, {.base = true});
  const double h = 1e-5;
  auto loss = [&](const Denoiser& n, const StyleToken& t) {
    return diffusion::loss_and_gradients(n, &adapters, 1.0, t, x0, steps, noise, schedule).loss;
  };
  for (Eigen::Index k = 0; k < token.values.size(); ++k) {
    StyleToken p = token, m = token;
    p.values[k] += h;
    m.values[k] -= h;
    const double fd = (loss(net, p) - loss(net, m)) / (2 * h);
    CHECK(g.token_grad[k] == doctest::Approx(fd).epsilon(1e-5));
  }
  for (std::size_t l : {0u, 2u, 5u}) {
    for (int k = 0; k < 5; ++k) {
      Denoiser p = net, m = net;
      p.mutable_layers()[l].weight.data()[k * 7] += h;
      m.mutable_layers()[l].weight.data()[k * 7] -= h;
      const double fd = (loss(p, token) - loss(m, token)) / (2 * h);
      CHECK(g.weight_grads[l].data()[k * 7] == doctest::Approx(fd).epsilon(1e-5));
    }
    Denoiser p = net, m = net;
    p.mutable_layers()[l].bias[1] += h;
    m.mutable_layers()[l].bias[1] -= h;
    CHECK(g.bias_grads[l][1] ==
          doctest::Approx((loss(p, token) - loss(m, token)) / (2 * h)).epsilon(1e-5));
  }
}

TEST_CASE("training step touches only the masked group") {
  RngStream rng(6);
  const Denoiser net = Denoiser::create(rng);
  const auto schedule = diffusion::DiffusionSchedule::linear();
  const auto adapters = active_adapters(net, 4, rng);
  const StyleToken token = random_token(rng);
  diffusion::SampleBatch batch;
  batch.points = rng.normal_matrix(4, 2);
  const auto checksum = net.checksum();

  RngStream r1(9);
  const auto only_token = diffusion::training_step(net, adapters, 1.0, token, batch,
                                                   diffusion::Trainable::kToken, 0.1, schedule, r1);
  CHECK(only_token.adapters.at("fc2").up == adapters.at("fc2").up);
  CHECK(only_token.token.values != token.values);

  RngStream r2(9);
  const auto only_adapters = diffusion::training_step(
      net, adapters, 1.0, token, batch, diffusion::Trainable::kAdapters, 0.1, schedule, r2);
  CHECK(only_adapters.token.values == token.values);
  CHECK(only_adapters.adapters.at("fc2").up != adapters.at("fc2").up);
  CHECK(net.checksum() == checksum);
}

TEST_CASE("clipping bounds the update size") {
  RngStream rng(7);
  const Denoiser net = Denoiser::create(rng);
  const auto schedule = diffusion::DiffusionSchedule::linear();
  const auto adapters = active_adapters(net, 4, rng);
  const StyleToken token = random_token(rng);
  diffusion::SampleBatch batch;
  batch.points = 5.0 * rng.normal_matrix(4, 2);
  const double lr = 0.5, cap = 1e-3;
  RngStream r(3);
  const auto out = diffusion::training_step(net, adapters, 1.0, token, batch,
                                            diffusion::Trainable::kBoth, lr, schedule, r, cap);
  double moved = (out.token.values - token.values).squaredNorm();
  for (const auto& [id, a] : adapters) {
    moved += (out.adapters.at(id).up - a.up).squaredNorm();
    moved += (out.adapters.at(id).down - a.down).squaredNorm();
  }
  CHECK(std::sqrt(moved) <= lr * cap * (1 + 1e-9));
  CHECK(std::sqrt(moved) > 0.0);
}

TEST_CASE("reverse step matches the posterior mean plus stream noise") {
  RngStream rng(8);
  const Denoiser net = Denoiser::create(rng);
  const auto s = diffusion::DiffusionSchedule::linear();
  const StyleToken token = random_token(rng);
  const RngStream stream(77);
  const Matrix x = rng.normal_matrix(5, 2);
  const int t = 30;
  const Matrix out = diffusion::ddpm_denoise(net, nullptr, 0.0, token, x, t, t - 1, s, stream);
  const Matrix eps = diffusion::predict_noise(net, nullptr, 0.0, x, t, token);
  const double beta = s.beta_at(t), ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1);
  RngStream z = stream.fork(t);
  const Matrix expected = (x - beta / std::sqrt(1 - ab) * eps) / std::sqrt(1 - beta) +
                          std::sqrt(beta * (1 - ab_prev) / (1 - ab)) * z.normal_matrix(5, 2);
  CHECK((out - expected).norm() < 1e-12);
}

TEST_CASE("split sampling equals unsplit sampling") {
  RngStream rng(9);
  const Denoiser net = Denoiser::create(rng);
  const auto s = diffusion::DiffusionSchedule::linear();
  const auto adapters = active_adapters(net, 4, rng);
  const StyleToken token = random_token(rng);
  const RngStream stream(123);
  const auto whole = diffusion::ddpm_sample(net, &adapters, 0.8, token, 64, s, stream);
  for (int split : {49, 40, 35, 1}) {
    Matrix x = diffusion::initial_latent(64, stream);
    x = diffusion::ddpm_denoise(net, &adapters, 0.8, token, x, 50, split, s, stream);
    const auto rest =
        diffusion::ddpm_sample(net, &adapters, 0.8, token, 64, s, stream,
                               diffusion::SampleStart{x, split});
    CHECK((rest.points.array() == whole.points.array()).all());
  }
  const auto other = diffusion::ddpm_sample(net, &adapters, 0.8, token, 64, s, RngStream(124));
  CHECK((other.points - whole.points).norm() > 1.0);
  CHECK_THROWS_AS(diffusion::ddpm_sample(net, nullptr, 0, token, 0, s, stream), ArgumentError);
}

TEST_CASE("style datasets are deterministic and distinct") {
  std::vector<Eigen::Vector2d> means;
  for (const auto& style : diffusion::style_names()) {
    RngStream a(5), b(5);
    const auto x = diffusion::make_style_dataset(style, 200, a);
    const auto y = diffusion::make_style_dataset(style, 200, b);
    CHECK(x.size() == 200);
    CHECK(x.style == style);
    CHECK((x.points.array() == y.points.array()).all());
    means.push_back(x.points.colwise().mean().transpose());
  }
  for (std::size_t i = 0; i < means.size(); ++i)
    for (std::size_t j = i + 1; j < means.size(); ++j) CHECK((means[i] - means[j]).norm() > 1.0);
  RngStream r(1);
  CHECK_THROWS_AS(diffusion::make_style_dataset("cubism", 10, r), ArgumentError);
  const auto generic = diffusion::make_generic_dataset(300, r);
  CHECK(generic.size() == 300);
  CHECK(std::abs(generic.points.col(1).mean()) < 0.2);
}

TEST_CASE("token learning moves only the token") {
  RngStream rng(10);
  const Denoiser net = Denoiser::create(rng);
  const auto s = diffusion::DiffusionSchedule::linear();
  RngStream data(2);
  const auto batch = diffusion::make_style_dataset("ring", 16, data);
  const auto checksum = net.checksum();
  RngStream train(3);
  const auto result = diffusion::learn_style_token(net, nullptr, 0.0, batch, 2, 0.05, 4, s, train);
  CHECK(result.losses.size() == 8);
  CHECK(result.token.provenance == diffusion::TokenProvenance::kLearned);
  CHECK(result.token.values.norm() > 0.0);
  CHECK(net.checksum() == checksum);
}

TEST_CASE("pretraining lowers the loss and is reproducible") {
  const auto s = diffusion::DiffusionSchedule::linear();
  RngStream init_a(1), init_b(1);
  Denoiser a = Denoiser::create(init_a), b = Denoiser::create(init_b);
  RngStream eval(5);
  const auto data = diffusion::make_generic_dataset(256, eval);
  std::vector<int> steps;
  for (int i = 0; i < 256; ++i) steps.push_back(1 + i % 50);
  const Matrix noise = eval.normal_matrix(256, 2);
  const StyleToken neutral = StyleToken::neutral(Denoiser::kTokenDim);
  const double before =
      diffusion::loss_and_gradients(a, nullptr, 0.0, neutral, data.points, steps, noise, s).loss;
  RngStream ra(2), rb(2);
  diffusion::pretrain(a, s, {300, 64, 2e-3}, ra);
  diffusion::pretrain(b, s, {300, 64, 2e-3}, rb);
  const double after =
      diffusion::loss_and_gradients(a, nullptr, 0.0, neutral, data.points, steps, noise, s).loss;
  CHECK(after < before);
  CHECK(a.checksum() == b.checksum());
}

TEST_CASE("shuffled indices form a permutation") {
  RngStream rng(4);
  auto p = diffusion::shuffled_indices(50, rng);
  std::sort(p.begin(), p.end());
  for (int i = 0; i < 50; ++i) CHECK(p[static_cast<std::size_t>(i)] == i);
}
