#include <doctest.h>

#include <set>

#include "edgefl/errors.h"
#include "edgefl/federation.h"

using namespace edgefl;
using federation::ClusterModel;
using federation::DomainEmbedding;
using lowrank::AdapterSet;
using lowrank::LoraAdapter;
using lowrank::Matrix;
using lowrank::Vector;

namespace {

LoraAdapter random_adapter(const std::string& id, int rank, RngStream& rng, int d = 12) {
  LoraAdapter a;
  a.layer_id = id;
  a.down = rng.normal_matrix(rank, d);
  a.up = rng.normal_matrix(d, rank);
  a.alpha = rank;
  return a;
}

AdapterSet random_set(int rank, RngStream& rng) {
  return {{"a", random_adapter("a", rank, rng)}, {"b", random_adapter("b", rank, rng)}};
}

DomainEmbedding embedding(int id, Vector v) {
  DomainEmbedding e;
  e.client_id = id;
  e.values = v.normalized();
  return e;
}

// Average linkage with Lance-Williams similarity updates.
std::set<std::set<int>> reference_clusters(const std::vector<DomainEmbedding>& e, double tau) {
  const std::size_t n = e.size();
  std::vector<std::set<int>> groups;
  std::vector<std::vector<double>> sim(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    groups.push_back({e[i].client_id});
    for (std::size_t j = 0; j < n; ++j) sim[i][j] = federation::cosine(e[i].values, e[j].values);
  }
  std::vector<bool> alive(n, true);
  while (true) {
    double best = -2;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (alive[i] && alive[j] && sim[i][j] > best) {
          best = sim[i][j];
          bi = i;
          bj = j;
        }
    if (best < tau) break;
    const double ni = static_cast<double>(groups[bi].size());
    const double nj = static_cast<double>(groups[bj].size());
    for (std::size_t k = 0; k < n; ++k)
      if (alive[k] && k != bi && k != bj) {
        sim[bi][k] = sim[k][bi] = (ni * sim[bi][k] + nj * sim[bj][k]) / (ni + nj);
      }
    groups[bi].insert(groups[bj].begin(), groups[bj].end());
    alive[bj] = false;
  }
  std::set<std::set<int>> out;
  for (std::size_t i = 0; i < n; ++i)
    if (alive[i]) out.insert(groups[i]);
  return out;
}

}  // namespace

TEST_CASE("domain encoding") {
  RngStream rng(1);
  diffusion::StyleToken t;
  t.values = rng.normal_matrix(8, 1).col(0);
  const auto a = federation::encode_domain(t, 5, 2);
  const auto b = federation::encode_domain(t, 5, 2);
  const auto c = federation::encode_domain(t, 6, 2);
  CHECK(a.values.size() == federation::kEmbeddingDim);
  CHECK(a.values.norm() == doctest::Approx(1.0));
  CHECK(a.values == b.values);
  CHECK(a.values != c.values);
  CHECK(a.client_id == 2);
  CHECK_FALSE(a.fallback);

  const auto zero = federation::encode_domain(diffusion::StyleToken::neutral(8), 5, 2);
  CHECK(zero.fallback);
  CHECK(zero.values.norm() == doctest::Approx(1.0));

  diffusion::StyleToken scaled = t;
  scaled.values *= 3.0;
  CHECK((federation::encode_domain(scaled, 5).values - a.values).norm() < 1e-12);
}

TEST_CASE("cosine") {
  Vector a(2), b(2);
  a << 1, 0;
  b << 0, 2;
  CHECK(federation::cosine(a, b) == 0.0);
  CHECK(federation::cosine(a, a) == doctest::Approx(1.0));
  CHECK(federation::cosine(a, -a) == doctest::Approx(-1.0));
  CHECK(federation::cosine(a, Vector::Zero(2)) == 0.0);
}

TEST_CASE("clustering agrees with a Lance-Williams reference") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed);
    const int n = 3 + static_cast<int>(rng.below(8));
    const Matrix centers = rng.normal_matrix(4, 3);
    std::vector<DomainEmbedding> e;
    for (int i = 0; i < n; ++i)
      e.push_back(embedding(10 + i, centers.col(static_cast<Eigen::Index>(rng.below(3))) +
                                        0.4 * rng.normal_matrix(4, 1).col(0)));
    for (double tau : {0.2, 0.5, 0.8}) {
      const auto got = federation::cluster_clients(e, tau);
      std::set<std::set<int>> ours;
      for (const auto& m : got.members) ours.insert(std::set<int>(m.begin(), m.end()));
      CHECK(ours == reference_clusters(e, tau));
    }
  }
}

TEST_CASE("cluster ids follow the smallest member") {
  Vector x(2), y(2);
  x << 1, 0;
  y << 0, 1;
  std::vector<DomainEmbedding> e = {embedding(7, y), embedding(3, x), embedding(5, y),
                                    embedding(1, x)};
  const auto a = federation::cluster_clients(e, 0.5);
  REQUIRE(a.cluster_count() == 2);
  CHECK(a.members[0] == std::vector<int>{1, 3});
  CHECK(a.members[1] == std::vector<int>{5, 7});
  CHECK(a.cluster_of.at(7) == 1);
  CHECK((a.centroids[0] - x).norm() < 1e-12);

  CHECK_THROWS_AS(federation::cluster_clients(e, 1.0), ArgumentError);
  e.push_back(embedding(3, y));
  CHECK_THROWS_AS(federation::cluster_clients(e, 0.5), ArgumentError);
}

TEST_CASE("single client forms its own cluster") {
  Vector x(3);
  x << 1, 2, 3;
  const std::vector<DomainEmbedding> e = {embedding(4, x)};
  const auto a = federation::cluster_clients(e, 0.5);
  CHECK(a.cluster_count() == 1);
  CHECK(a.members[0] == std::vector<int>{4});
}

TEST_CASE("intra-cluster aggregation aligns to the median rank") {
  RngStream rng(2);
  const std::vector<AdapterSet> members = {random_set(4, rng), random_set(8, rng),
                                           random_set(12, rng)};
  const auto out = federation::intra_cluster_aggregate(members);
  for (const auto& [id, a] : out) CHECK(a.rank() == 8);

  // Oracle: align by hand, then uniform factor average.
  for (const auto& [id, a] : out) {
    Matrix up = Matrix::Zero(12, 8), down = Matrix::Zero(8, 12);
    for (const auto& m : members) {
      const auto aligned = lowrank::align_rank(m.at(id), 8);
      up += aligned.up / 3.0;
      down += aligned.down / 3.0;
    }
    CHECK((a.up - up).norm() < 1e-12);
    CHECK((a.down - down).norm() < 1e-12);
  }

  const std::vector<AdapterSet> same = {members[0], members[0]};
  const auto twin = federation::intra_cluster_aggregate(same);
  CHECK((twin.at("a").delta() - members[0].at("a").delta()).norm() < 1e-12);

  AdapterSet missing = members[0];
  missing.erase("b");
  const std::vector<AdapterSet> broken = {members[0], missing};
  CHECK_THROWS_AS(federation::intra_cluster_aggregate(broken), DimensionError);
}

TEST_CASE("ded") {
  Vector a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  CHECK(federation::ded(a, a) == doctest::Approx(0.0));
  CHECK(federation::ded(a, b) == doctest::Approx(1.0));
  CHECK(federation::ded(a, -a) == doctest::Approx(2.0));
}

TEST_CASE("coefficients: identical profiles give uniform weights") {
  RngStream rng(3);
  const AdapterSet shared = random_set(4, rng);
  std::vector<ClusterModel> clusters;
  for (int k = 0; k < 3; ++k) {
    Vector c = Vector::Zero(3);
    c(k) = 1.0;
    c += Vector::Constant(3, 1.0);
    clusters.push_back({k, shared, c.normalized()});
  }
  const auto co = federation::compute_coefficients(clusters, 0.8, 4.0);
  for (const auto& c : co.clusters) {
    CHECK_FALSE(c.filtered);
    CHECK(c.weight == doctest::Approx(1.0 / 3));
  }
}

TEST_CASE("coefficients: gating and softmax") {
  RngStream rng(4);
  Vector e0(3), e1(3), e2(3);
  e0 << 1, 0.1, 0;
  e1 << 1, -0.1, 0;
  e2 << -1, 0, 0.2;
  AdapterSet flat = random_set(4, rng);
  AdapterSet skewed = flat;
  skewed.at("a").up *= 3.0;
  std::vector<ClusterModel> clusters = {{0, flat, e0.normalized()},
                                        {1, skewed, e1.normalized()},
                                        {2, flat, e2.normalized()}};
  const auto co = federation::compute_coefficients(clusters, 0.8, 4.0);
  CHECK(co.clusters[2].filtered);
  CHECK(co.clusters[2].weight == 0.0);

  // Oracle for the survivors.
  const auto p0 = lowrank::snt_profile(flat), p1 = lowrank::snt_profile(skewed);
  lowrank::EnergyProfile mean;
  for (std::size_t l = 0; l < 2; ++l) mean.normalized.push_back((p0.normalized[l] + p1.normalized[l]) / 2);
  const double d0 = lowrank::snt_distance(p0, mean), d1 = lowrank::snt_distance(p1, mean);
  const double w0 = std::exp(-4 * d0) / (std::exp(-4 * d0) + std::exp(-4 * d1));
  CHECK(co.clusters[0].weight == doctest::Approx(w0).epsilon(1e-12));
  CHECK(co.clusters[0].weight + co.clusters[1].weight == doctest::Approx(1.0));
  Vector m = e0.normalized() + e1.normalized() + e2.normalized();
  CHECK(co.clusters[2].ded == doctest::Approx(1 - federation::cosine(e2, m)));
}

TEST_CASE("coefficients: fallbacks") {
  RngStream rng(5);
  Vector a(2), b(2);
  a << 1, 0;
  b << -1, 0;
  const std::vector<ClusterModel> opposed = {{0, random_set(4, rng), a}, {1, random_set(4, rng), b}};
  const auto co = federation::compute_coefficients(opposed, 0.8, 4.0);
  CHECK(co.all_filtered_fallback);
  CHECK(co.clusters[0].weight == 0.5);
  CHECK(co.clusters[1].weight == 0.5);

  AdapterSet zero = random_set(4, rng);
  for (auto& [id, ad] : zero) ad.up.setZero();
  const std::vector<ClusterModel> blank = {{0, zero, a}};
  const auto single = federation::compute_coefficients(blank);
  CHECK(single.degenerate_snt);
  CHECK(single.clusters[0].weight == 1.0);
}

TEST_CASE("inter-cluster aggregation stacks survivors") {
  RngStream rng(6);
  const std::vector<ClusterModel> clusters = {{0, random_set(4, rng), Vector::Ones(2)},
                                              {1, random_set(2, rng), Vector::Ones(2)},
                                              {2, random_set(4, rng), Vector::Ones(2)}};
  federation::AggregationCoefficients co;
  co.clusters = {{0, 0, 0, 0.3, false}, {1, 0, 0, 0.7, false}, {2, 1.5, 0, 0.0, true}};
  const auto g = federation::inter_cluster_aggregate(clusters, co);
  CHECK_FALSE(g.rank_overflow);
  for (const auto& [id, a] : g.adapters) {
    CHECK(a.rank() == 6);
    const Matrix expected = 0.3 * clusters[0].adapters.at(id).delta() +
                            0.7 * clusters[1].adapters.at(id).delta();
    CHECK((a.delta() - expected).norm() < 1e-12 * expected.norm());
  }

  const std::vector<ClusterModel> one = {clusters[0]};
  federation::AggregationCoefficients solo;
  solo.clusters = {{0, 0, 0, 1.0, false}};
  const auto g1 = federation::inter_cluster_aggregate(one, solo);
  CHECK((g1.adapters.at("a").delta() - clusters[0].adapters.at("a").delta()).norm() < 1e-12);
}

TEST_CASE("inter-cluster aggregation truncates on overflow") {
  RngStream rng(7);
  const std::vector<ClusterModel> clusters = {{0, random_set(8, rng), Vector::Ones(2)},
                                              {1, random_set(8, rng), Vector::Ones(2)}};
  federation::AggregationCoefficients co;
  co.clusters = {{0, 0, 0, 0.5, false}, {1, 0, 0, 0.5, false}};
  const auto g = federation::inter_cluster_aggregate(clusters, co);
  CHECK(g.rank_overflow);
  CHECK(g.stacked_rank.at("a") == 16);
  CHECK(g.adapters.at("a").rank() == 12);
  const Matrix expected = 0.5 * clusters[0].adapters.at("a").delta() +
                          0.5 * clusters[1].adapters.at("a").delta();
  CHECK((g.adapters.at("a").delta() - expected).norm() < 1e-10 * expected.norm());
}

TEST_CASE("fedavg weights by sample count") {
  RngStream rng(8);
  const std::vector<AdapterSet> sets = {random_set(4, rng), random_set(4, rng)};
  const std::vector<int> counts = {100, 300};
  const auto avg = federation::fedavg_aggregate(sets, counts);
  CHECK((avg.at("a").up - (0.25 * sets[0].at("a").up + 0.75 * sets[1].at("a").up)).norm() < 1e-12);
  const std::vector<int> negative = {-1, 3};
  CHECK_THROWS_AS(federation::fedavg_aggregate(sets, negative), ArgumentError);
}

TEST_CASE("weiszfeld matches a grid-search minimum") {
  RngStream rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix pts = rng.normal_matrix(2, 7);
    auto objective = [&](double x, double y) {
      Vector p(2);
      p << x, y;
      return (pts.colwise() - p).colwise().norm().sum();
    };
    const auto w = federation::weiszfeld(pts);
    CHECK(w.converged);
    double best = 1e300, bx = 0, by = 0;
    double step = 0.05, cx = 0, cy = 0, half = 3.0;
    for (int level = 0; level < 6; ++level) {
      for (double x = cx - half; x <= cx + half; x += step)
        for (double y = cy - half; y <= cy + half; y += step) {
          const double v = objective(x, y);
          if (v < best) {
            best = v;
            bx = x;
            by = y;
          }
        }
      cx = bx;
      cy = by;
      half = 2 * step;
      step /= 10;
    }
    CHECK(objective(w.point(0), w.point(1)) <= best + 1e-9);
    CHECK(std::hypot(w.point(0) - bx, w.point(1) - by) < 1e-4);
  }
}

TEST_CASE("weiszfeld on collinear points picks the middle one") {
  Matrix pts(1, 3);
  pts << 0, 1, 10;
  const auto w = federation::weiszfeld(pts);
  CHECK(w.point(0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("geometric median of identical members") {
  RngStream rng(10);
  const AdapterSet s = random_set(4, rng);
  const std::vector<AdapterSet> same = {s, s, s};
  const auto g = federation::geomed_aggregate(same);
  CHECK(g.converged);
  CHECK((g.adapters.at("b").delta() - s.at("b").delta()).norm() < 1e-9);
}

TEST_CASE("local finetuning") {
  RngStream rng(11);
  const auto net = diffusion::Denoiser::create(rng);
  const auto schedule = diffusion::DiffusionSchedule::linear();
  federation::ClientProfile p;
  p.client_id = 2;
  p.rank = 4;
  p.adapters = net.make_adapters(4, rng);
  p.token = diffusion::StyleToken::neutral(8);
  RngStream data(3);
  p.data = diffusion::make_style_dataset("spiral", 12, data);
  p.sample_count = 12;
  CHECK_NOTHROW(p.validate());
  const auto checksum = net.checksum();
  RngStream train(4);
  const auto r = federation::local_finetune(p, net, {2, 0.05, 4, 1.0, 2.0}, schedule, train, 9);
  CHECK(r.losses.size() == 6);
  CHECK(r.profile.rank == 4);
  CHECK(r.profile.adapters.at("fc2").up.norm() > 0.0);
  CHECK(r.profile.token.values.norm() > 0.0);
  CHECK(r.profile.embedding.values ==
        federation::encode_domain(r.profile.token, 9, 2).values);
  CHECK(net.checksum() == checksum);

  p.rank = 5;
  CHECK_THROWS_AS(p.validate(), ArgumentError);
  p.rank = 8;
  CHECK_THROWS_AS(p.validate(), PreconditionError);
}
