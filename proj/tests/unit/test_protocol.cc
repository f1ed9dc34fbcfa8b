#include <doctest.h>

#include "edgefl/errors.h"
#include "edgefl/protocol.h"

using namespace edgefl;
using namespace edgefl::protocol;

namespace {

diffusion::Denoiser small_net() {
  RngStream rng(1);
  return diffusion::Denoiser::create(rng);
}

World make_world(int clients_per_style = 1, int rank = 4) {
  World w;
  w.base = small_net();
  w.schedule = diffusion::DiffusionSchedule::linear();
  w.seed = 3;
  w.embedding_salt = 3;
  const char* styles[] = {"ring", "spiral", "moons"};
  int id = 0;
  for (const char* style : styles)
    for (int k = 0; k < clients_per_style; ++k, ++id) {
      federation::ClientProfile p;
      p.client_id = id;
      p.rank = rank;
      RngStream rng(derive_key(9, {static_cast<std::uint64_t>(id)}));
      p.data = diffusion::make_style_dataset(style, 8, rng);
      p.data.style.reset();
      p.sample_count = 8;
      p.adapters = w.base.make_adapters(rank, rng);
      p.token = diffusion::StyleToken::neutral(8);
      p.embedding = federation::encode_domain(p.token, w.embedding_salt, id);
      w.clients.push_back(std::move(p));
    }
  return w;
}

RoundConfig quick_round() {
  RoundConfig c;
  c.finetune = {1, 0.05, 4, 1.0, 2.0};
  return c;
}

std::size_t adapter_set_bytes(const lowrank::AdapterSet& s) {
  std::size_t n = 4;
  for (const auto& [id, a] : s)
    n += 4 + id.size() + 8 + 8 + 8 * a.down.size() + 8 + 8 * a.up.size();
  return n;
}

}  // namespace

TEST_CASE("message sizes follow the wire layout") {
  RngStream rng(2);
  const auto net = small_net();
  const auto adapters = net.make_adapters(16, rng);

  CHECK(message_size(RoundControl{Marker::kRoundBegin}) == kHeaderBytes);

  AdapterUpload up{4, 100, adapters,
                   federation::encode_domain(diffusion::StyleToken::neutral(8), 1, 4)};
  const std::size_t upload = 16 + 4 + 4 + (4 + 8 * 16) + 1 + adapter_set_bytes(adapters);
  CHECK(message_size(up) == upload);
  CHECK(upload == 16 + 8 + 132 + 1 + 4 + 2 * (7 + 8 + 8 + 16 * 64 * 8 + 8 + 64 * 16 * 8));

  CHECK(message_size(ClusterModelDown{1, adapters}) == 16 + 4 + adapter_set_bytes(adapters));

  federation::AggregationCoefficients co;
  co.clusters = {{0, 0.1, 0.2, 0.6, false}, {1, 0.9, 0.3, 0.0, true}};
  CHECK(message_size(GlobalLoraToIES{adapters, co}) ==
        16 + adapter_set_bytes(adapters) + 4 + 2 * (4 + 8 + 8 + 8 + 1) + 2);

  CHECK(message_size(InferRequest{diffusion::StyleToken::neutral(8), 0.2, 1.0, 10, 7}) ==
        16 + (4 + 64) + 8 + 8 + 4 + 8);
  CHECK(message_size(LatentHandoff{Eigen::MatrixXd::Zero(10, 2), 40, 7}) ==
        16 + 8 + 160 + 4 + 8);

  for (int rank : {4, 8, 16, 64}) {
    const auto a = net.make_adapters(rank, rng);
    AdapterUpload u{0, 1, a, up.embedding};
    CHECK(message_size(u) == encode(u).size());
    CHECK(message_size(u) < encode_denoiser(net).size());
  }
  CHECK(encode_denoiser(net).size() == 144046);
}

TEST_CASE("every variant round-trips") {
  RngStream rng(3);
  const auto net = small_net();
  auto adapters = net.make_adapters(4, rng);
  for (auto& [id, a] : adapters) a.up = rng.normal_matrix(a.up.rows(), a.up.cols());
  diffusion::StyleToken token;
  token.values = rng.normal_matrix(8, 1).col(0);
  federation::AggregationCoefficients co;
  co.clusters = {{2, 0.1, 0.2, 1.0, false}};
  co.degenerate_snt = true;

  const std::vector<Message> messages = {
      AdapterUpload{1, 50, adapters, federation::encode_domain(token, 2, 1)},
      ClusterModelDown{3, adapters},
      GlobalLoraToIES{adapters, co},
      InferRequest{token, 0.3, 0.8, 12, 99},
      LatentHandoff{rng.normal_matrix(5, 2), 35, 99},
      RoundControl{Marker::kRoundEnd}};
  for (const auto& m : messages) {
    const Bytes bytes = encode(m);
    CHECK(bytes.size() == message_size(m));
    const Message back = decode(bytes);
    CHECK(back.index() == m.index());
    CHECK(encode(back) == bytes);
  }
  const auto upload = std::get<AdapterUpload>(decode(encode(messages[0])));
  CHECK(upload.sample_count == 50);
  CHECK(upload.adapters.at("fc3").up == adapters.at("fc3").up);
  const auto global = std::get<GlobalLoraToIES>(decode(encode(messages[2])));
  CHECK(global.coefficients.degenerate_snt);
  CHECK(global.coefficients.clusters[0].cluster_id == 2);
}

TEST_CASE("decoding rejects damaged frames") {
  const Bytes good = encode(RoundControl{Marker::kRoundBegin});
  Bytes bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode(bad_magic), ProtocolError);
  Bytes short_frame(good.begin(), good.begin() + 10);
  CHECK_THROWS_AS(decode(short_frame), ProtocolError);
  Bytes bad_marker = good;
  bad_marker[6] = 9;
  CHECK_THROWS_AS(decode(bad_marker), ProtocolError);
  const Bytes latent = encode(LatentHandoff{Eigen::MatrixXd::Ones(3, 2), 4, 1});
  Bytes truncated(latent.begin(), latent.end() - 3);
  CHECK_THROWS_AS(decode(truncated), ProtocolError);
}

TEST_CASE("adapter sets and the denoiser round-trip") {
  RngStream rng(4);
  const auto net = small_net();
  const auto adapters = net.make_adapters(8, rng);
  const auto back = decode_adapter_set(encode_adapter_set(adapters));
  CHECK(back.size() == adapters.size());
  CHECK(back.at("fc2").down == adapters.at("fc2").down);
  CHECK(back.at("fc2").alpha == adapters.at("fc2").alpha);
  const auto copy = decode_denoiser(encode_denoiser(net));
  CHECK(copy.checksum() == net.checksum());
  CHECK(copy.adaptable_layers() == net.adaptable_layers());
}

TEST_CASE("log records round-trip through JSON lines") {
  LogRecord r{2, 3, Endpoint::client(5), Endpoint::tes(), "AdapterUpload", 1234};
  const std::string line = to_json_line(r);
  CHECK(line ==
        R"({"round":2,"step":3,"sender":"client:5","receiver":"tes","variant":"AdapterUpload","bytes":1234})");
  const auto back = parse_json_line(line);
  CHECK(back.sender == r.sender);
  CHECK(back.receiver == r.receiver);
  CHECK(back.bytes == 1234);
  CHECK(parse_json_line(to_json_line({0, 0, Endpoint::ies(), Endpoint::client(0), "LatentHandoff", 1}))
            .sender == Endpoint::ies());
  CHECK_THROWS_AS(parse_json_line("{\"round\":1}"), ProtocolError);
  CHECK_THROWS_AS(parse_json_line("not json"), ProtocolError);
}

TEST_CASE("router refuses routes outside the allowed set") {
  RngStream rng(5);
  const auto net = small_net();
  const auto adapters = net.make_adapters(4, rng);
  const auto emb = federation::encode_domain(diffusion::StyleToken::neutral(8), 1, 0);
  Router r;
  federation::ClusterAssignment a;
  a.members = {{0, 1}, {2}};
  r.set_membership(a);

  CHECK_NOTHROW(r.send(1, 1, Endpoint::client(0), Endpoint::tes(), AdapterUpload{0, 1, adapters, emb}));
  CHECK_THROWS_AS(r.send(1, 1, Endpoint::client(1), Endpoint::tes(), AdapterUpload{0, 1, adapters, emb}),
                  ProtocolError);
  CHECK_THROWS_AS(r.send(1, 1, Endpoint::client(0), Endpoint::ies(), AdapterUpload{0, 1, adapters, emb}),
                  ProtocolError);
  CHECK_THROWS_AS(r.send(1, 2, Endpoint::tes(), Endpoint::client(2), ClusterModelDown{0, adapters}),
                  ProtocolError);
  CHECK_THROWS_AS(r.send(1, 2, Endpoint::tes(), Endpoint::ies(), ClusterModelDown{0, adapters}),
                  ProtocolError);
  CHECK_THROWS_AS(r.send(1, 3, Endpoint::client(0), Endpoint::ies(), GlobalLoraToIES{adapters, {}}),
                  ProtocolError);
  CHECK_THROWS_AS(r.send(1, 0, Endpoint::client(0), Endpoint::tes(),
                         InferRequest{diffusion::StyleToken::neutral(8), 0.2, 1.0, 2, 1}),
                  ProtocolError);
  CHECK_THROWS_AS(r.send(1, 0, Endpoint::tes(), Endpoint::client(0),
                         LatentHandoff{Eigen::MatrixXd::Zero(2, 2), 1, 1}),
                  ProtocolError);
  CHECK_THROWS_AS(r.send(1, 0, Endpoint::ies(), Endpoint::client(0), RoundControl{}), ProtocolError);
  CHECK(r.log().size() == 1);

  CHECK_NOTHROW(r.send(1, 2, Endpoint::tes(), Endpoint::client(1), ClusterModelDown{0, adapters}));
  const auto inbox = r.drain(Endpoint::client(1));
  REQUIRE(inbox.size() == 1);
  CHECK(inbox[0].sender == Endpoint::tes());
  CHECK(r.drain(Endpoint::client(1)).empty());
}

TEST_CASE("server step count") {
  CHECK(server_steps(0.2, 50) == 10);
  CHECK(server_steps(0.3, 50) == 15);
  CHECK(server_steps(0.0, 50) == 0);
  CHECK(server_steps(0.21, 50) == 11);
  CHECK(server_steps(0.1, 30) == 3);
}

TEST_CASE("hybrid configuration ranges") {
  HybridConfig h;
  CHECK_NOTHROW(h.validate(50));
  h.mix_loras = 0.5;
  CHECK_THROWS_AS(h.validate(50), ArgumentError);
  h = {};
  h.local_scale = 0.96;
  CHECK_THROWS_AS(h.validate(50), ArgumentError);
  h = {};
  h.client_scale[0] = 0.7;
  CHECK_THROWS_AS(h.validate(50), ArgumentError);
  h = {};
  h.rho = 1.0;
  CHECK_THROWS_AS(h.validate(50), ArgumentError);
  h = {};
  h.rho = 0.99;
  CHECK_THROWS_AS(h.validate(50), ArgumentError);
}

TEST_CASE("training round") {
  World w = make_world(2, 4);
  const auto report = run_training_round(w, quick_round());
  CHECK(report.round == 1);
  CHECK(w.rounds_completed == 1);
  CHECK(report.assignment.cluster_of.size() == 6);
  CHECK(w.ies.global.has_value());
  CHECK(w.tes.uploads.size() == 6);

  std::size_t logged = 0, uploads = 0;
  for (const auto& m : report.messages) {
    logged += m.bytes;
    if (m.variant == "AdapterUpload") ++uploads;
    CHECK(m.round == 1);
  }
  CHECK(uploads == 6);
  CHECK(report.total_bytes() == logged);
  CHECK(report.messages.size() == w.router.log().size());

  // Members adopt their cluster model.
  for (const auto& model : w.tes.cluster_models)
    for (int id : report.assignment.members[static_cast<std::size_t>(model.cluster_id)])
      CHECK(w.clients[static_cast<std::size_t>(id)].adapters.at("fc2").up ==
            model.adapters.at("fc2").up);

  // Global rank is the sum over surviving clusters.
  int expected = 0;
  for (const auto& c : report.coefficients.clusters)
    if (!c.filtered) expected += 4;
  CHECK(report.global_rank.at("fc2") == std::min(expected, 64));

  const auto second = run_training_round(w, quick_round());
  CHECK(second.round == 2);
  CHECK(second.messages.front().round == 2);
}

TEST_CASE("single client round") {
  World w = make_world(1, 4);
  w.clients.resize(1);
  const auto report = run_training_round(w, quick_round());
  CHECK(report.assignment.cluster_count() == 1);
  REQUIRE(report.coefficients.clusters.size() == 1);
  CHECK(report.coefficients.clusters[0].weight == 1.0);
  CHECK((w.ies.global->at("fc3").delta() - w.clients[0].adapters.at("fc3").delta()).norm() <
        1e-12);
}

TEST_CASE("rounds are reproducible") {
  World a = make_world(), b = make_world();
  const auto ra = run_training_round(a, quick_round());
  const auto rb = run_training_round(b, quick_round());
  CHECK(ra.final_loss == rb.final_loss);
  CHECK(encode_adapter_set(*a.ies.global) == encode_adapter_set(*b.ies.global));
}

TEST_CASE("hybrid inference") {
  World w = make_world();
  HybridConfig h;
  h.sample_count = 32;
  h.stream_id = 11;
  CHECK_THROWS_AS(hybrid_infer(w, h), ProtocolError);

  run_training_round(w, quick_round());
  const auto before = w.router.log().size();
  const auto out = hybrid_infer(w, h);
  CHECK(out.server_steps == 10);
  CHECK(out.client_steps == 40);
  CHECK(out.samples.size() == 3);
  CHECK(out.shared_latent.rows() == 32);

  const auto& log = w.router.log();
  CHECK(log.size() == before + 4);
  CHECK(log[before].variant == "InferRequest");
  for (std::size_t i = before + 1; i < log.size(); ++i) {
    CHECK(log[i].variant == "LatentHandoff");
    CHECK(log[i].sender == Endpoint::ies());
  }

  // Each client resumes from the shared latent with its own adapters.
  const RngStream stream(11);
  for (const auto& c : w.clients) {
    const auto expected = diffusion::ddpm_denoise(w.base, &c.adapters, 0.95, c.token,
                                                  out.shared_latent, 40, 0, w.schedule, stream);
    CHECK((out.samples.at(c.client_id).points.array() == expected.array()).all());
  }

  h.use_global = false;
  const auto plain = hybrid_infer(w, h);
  const Eigen::MatrixXd bare = diffusion::ddpm_denoise(
      w.base, nullptr, 0.0, diffusion::StyleToken::neutral(8),
      diffusion::initial_latent(32, stream), 50, 40, w.schedule, stream);
  CHECK((plain.shared_latent.array() == bare.array()).all());

  h.client_scale[1] = 0.75;
  h.use_global = true;
  const auto mixed = hybrid_infer(w, h);
  CHECK((mixed.samples.at(0).points.array() == out.samples.at(0).points.array()).all());
  CHECK((mixed.samples.at(1).points - out.samples.at(1).points).norm() > 0.0);
}
