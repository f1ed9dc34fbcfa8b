#include "edgefl/protocol.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "edgefl/errors.h"

namespace edgefl::protocol {

namespace {

constexpr char kMagic[4] = {'E', 'F', 'L', '1'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }

  void vec(const Eigen::VectorXd& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v(i));
  }

  void mat(const Eigen::MatrixXd& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }

  void adapters(const AdapterSet& set) {
    u32(static_cast<std::uint32_t>(set.size()));
    for (const auto& [id, a] : set) {
      str(id);
      f64(a.alpha);
      mat(a.down);
      mat(a.up);
    }
  }

  Bytes framed(FrameKind kind, std::uint16_t sub) && {
    Writer head;
    for (char c : kMagic) head.u8(static_cast<std::uint8_t>(c));
    head.u16(static_cast<std::uint16_t>(kind));
    head.u16(sub);
    head.u64(out_.size());
    head.out_.insert(head.out_.end(), out_.begin(), out_.end());
    return std::move(head.out_);
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  Bytes out_;
};

class Reader {
 public:
  explicit Reader(const Bytes& bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  int i32() { return static_cast<int>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  Eigen::VectorXd vec() {
    const std::uint32_t n = u32();
    need(8ull * n);
    Eigen::VectorXd v(n);
    for (std::uint32_t i = 0; i < n; ++i) v(i) = f64();
    return v;
  }

  Eigen::MatrixXd mat() {
    const std::uint32_t rows = u32();
    const std::uint32_t cols = u32();
    need(8ull * rows * cols);
    Eigen::MatrixXd m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = f64();
    return m;
  }

  AdapterSet adapters() {
    const std::uint32_t n = u32();
    AdapterSet set;
    for (std::uint32_t i = 0; i < n; ++i) {
      lowrank::LoraAdapter a;
      a.layer_id = str();
      a.alpha = f64();
      a.down = mat();
      a.up = mat();
      a.validate();
      set.emplace(a.layer_id, std::move(a));
    }
    return set;
  }

  // Returns (kind, sub-kind) after checking magic and length.
  std::pair<FrameKind, std::uint16_t> header() {
    need(kHeaderBytes);
    if (std::memcmp(bytes_.data(), kMagic, 4) != 0) throw ProtocolError("decode: bad magic");
    pos_ = 4;
    const auto kind = static_cast<FrameKind>(u16());
    const std::uint16_t sub = u16();
    const std::uint64_t length = u64();
    if (length != bytes_.size() - kHeaderBytes)
      throw ProtocolError("decode: payload length " + std::to_string(length) + " but frame carries " +
                          std::to_string(bytes_.size() - kHeaderBytes));
    return {kind, sub};
  }

  void finish() const {
    if (pos_ != bytes_.size()) throw ProtocolError("decode: trailing bytes");
  }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw ProtocolError("decode: truncated frame");
  }

  std::uint64_t get(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const Bytes& bytes_;
  std::size_t pos_ = 0;
};

void write_coefficients(Writer& w, const federation::AggregationCoefficients& c) {
  w.u32(static_cast<std::uint32_t>(c.clusters.size()));
  for (const auto& k : c.clusters) {
    w.i32(k.cluster_id);
    w.f64(k.ded);
    w.f64(k.snt_dist);
    w.f64(k.weight);
    w.u8(k.filtered ? 1 : 0);
  }
  w.u8(c.all_filtered_fallback ? 1 : 0);
  w.u8(c.degenerate_snt ? 1 : 0);
}

federation::AggregationCoefficients read_coefficients(Reader& r) {
  federation::AggregationCoefficients c;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    federation::ClusterCoefficient k;
    k.cluster_id = r.i32();
    k.ded = r.f64();
    k.snt_dist = r.f64();
    k.weight = r.f64();
    k.filtered = r.u8() != 0;
    c.clusters.push_back(k);
  }
  c.all_filtered_fallback = r.u8() != 0;
  c.degenerate_snt = r.u8() != 0;
  return c;
}

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};

}  // namespace

std::string_view variant_name(const Message& message) {
  static constexpr std::string_view names[] = {"AdapterUpload", "ClusterModelDown",
                                               "GlobalLoraToIES", "InferRequest",
                                               "LatentHandoff", "RoundControl"};
  return names[message.index()];
}

Bytes encode(const Message& message) {
  return std::visit(
      Overloaded{
          [](const AdapterUpload& m) {
            Writer w;
            w.i32(m.client_id);
            w.i32(m.sample_count);
            w.vec(m.embedding.values);
            w.u8(m.embedding.fallback ? 1 : 0);
            w.adapters(m.adapters);
            return std::move(w).framed(FrameKind::kAdapterUpload, 0);
          },
          [](const ClusterModelDown& m) {
            Writer w;
            w.i32(m.cluster_id);
            w.adapters(m.adapters);
            return std::move(w).framed(FrameKind::kClusterModelDown, 0);
          },
          [](const GlobalLoraToIES& m) {
            Writer w;
            w.adapters(m.adapters);
            write_coefficients(w, m.coefficients);
            return std::move(w).framed(FrameKind::kGlobalLoraToIES, 0);
          },
          [](const InferRequest& m) {
            Writer w;
            w.vec(m.token.values);
            w.f64(m.rho);
            w.f64(m.mix_loras);
            w.i32(m.sample_count);
            w.u64(m.stream_id);
            return std::move(w).framed(FrameKind::kInferRequest, 0);
          },
          [](const LatentHandoff& m) {
            Writer w;
            w.mat(m.latent);
            w.i32(m.resume_step);
            w.u64(m.stream_id);
            return std::move(w).framed(FrameKind::kLatentHandoff, 0);
          },
          [](const RoundControl& m) {
            return Writer{}.framed(FrameKind::kRoundControl, static_cast<std::uint16_t>(m.marker));
          },
      },
      message);
}

Message decode(const Bytes& bytes) {
  Reader r(bytes);
  const auto [kind, sub] = r.header();
  Message out;
  switch (kind) {
    case FrameKind::kAdapterUpload: {
      AdapterUpload m;
      m.client_id = r.i32();
      m.sample_count = r.i32();
      m.embedding.client_id = m.client_id;
      m.embedding.values = r.vec();
      m.embedding.fallback = r.u8() != 0;
      m.adapters = r.adapters();
      out = std::move(m);
      break;
    }
    case FrameKind::kClusterModelDown: {
      ClusterModelDown m;
      m.cluster_id = r.i32();
      m.adapters = r.adapters();
      out = std::move(m);
      break;
    }
    case FrameKind::kGlobalLoraToIES: {
      GlobalLoraToIES m;
      m.adapters = r.adapters();
      m.coefficients = read_coefficients(r);
      out = std::move(m);
      break;
    }
    case FrameKind::kInferRequest: {
      InferRequest m;
      m.token.values = r.vec();
      m.token.provenance = m.token.values.isZero(0.0) ? diffusion::TokenProvenance::kNeutral
                                                      : diffusion::TokenProvenance::kAssigned;
      m.rho = r.f64();
      m.mix_loras = r.f64();
      m.sample_count = r.i32();
      m.stream_id = r.u64();
      out = std::move(m);
      break;
    }
    case FrameKind::kLatentHandoff: {
      LatentHandoff m;
      m.latent = r.mat();
      m.resume_step = r.i32();
      m.stream_id = r.u64();
      out = std::move(m);
      break;
    }
    case FrameKind::kRoundControl: {
      if (sub != static_cast<std::uint16_t>(Marker::kRoundBegin) &&
          sub != static_cast<std::uint16_t>(Marker::kRoundEnd))
        throw ProtocolError("decode: unknown control marker " + std::to_string(sub));
      out = RoundControl{static_cast<Marker>(sub)};
      break;
    }
    default:
      throw ProtocolError("decode: frame kind " + std::to_string(static_cast<int>(kind)) +
                          " is not a message");
  }
  r.finish();
  return out;
}

std::size_t message_size(const Message& message) { return encode(message).size(); }

Bytes encode_adapter_set(const AdapterSet& adapters) {
  Writer w;
  w.adapters(adapters);
  return std::move(w).framed(FrameKind::kAdapterSet, 0);
}

AdapterSet decode_adapter_set(const Bytes& bytes) {
  Reader r(bytes);
  if (r.header().first != FrameKind::kAdapterSet)
    throw ProtocolError("decode_adapter_set: not an adapter-set frame");
  AdapterSet set = r.adapters();
  r.finish();
  return set;
}

Bytes encode_denoiser(const diffusion::Denoiser& denoiser) {
  Writer w;
  w.u32(static_cast<std::uint32_t>(denoiser.layers().size()));
  for (const auto& l : denoiser.layers()) {
    w.str(l.id);
    w.u8(l.activation == diffusion::Activation::kSilu ? 0 : 1);
    w.mat(l.weight);
    w.vec(l.bias);
  }
  w.u32(static_cast<std::uint32_t>(denoiser.adaptable_layers().size()));
  for (const auto& id : denoiser.adaptable_layers()) w.str(id);
  return std::move(w).framed(FrameKind::kDenoiser, 0);
}

diffusion::Denoiser decode_denoiser(const Bytes& bytes) {
  Reader r(bytes);
  if (r.header().first != FrameKind::kDenoiser)
    throw ProtocolError("decode_denoiser: not a denoiser frame");
  std::vector<diffusion::DenseLayer> layers(r.u32());
  for (auto& l : layers) {
    l.id = r.str();
    l.activation = r.u8() == 0 ? diffusion::Activation::kSilu : diffusion::Activation::kIdentity;
    l.weight = r.mat();
    l.bias = r.vec();
  }
  std::vector<std::string> adaptable(r.u32());
  for (auto& id : adaptable) id = r.str();
  r.finish();
  return diffusion::Denoiser(std::move(layers), std::move(adaptable));
}

// ---------------------------------------------------------------------------
// Routing and log

std::string Endpoint::label() const {
  switch (role) {
    case Role::kClient:
      return "client:" + std::to_string(id);
    case Role::kTes:
      return "tes";
    case Role::kIes:
      return "ies";
  }
  return "?";
}

namespace {

Endpoint parse_endpoint(std::string_view s) {
  if (s == "tes") return Endpoint::tes();
  if (s == "ies") return Endpoint::ies();
  if (s.starts_with("client:")) return Endpoint::client(std::stoi(std::string(s.substr(7))));
  throw ProtocolError("log: unknown endpoint '" + std::string(s) + "'");
}

}  // namespace

std::string to_json_line(const LogRecord& record) {
  nlohmann::ordered_json j;
  j["round"] = record.round;
  j["step"] = record.step;
  j["sender"] = record.sender.label();
  j["receiver"] = record.receiver.label();
  j["variant"] = record.variant;
  j["bytes"] = record.bytes;
  return j.dump();
}

LogRecord parse_json_line(std::string_view line) {
  try {
    const auto j = nlohmann::json::parse(line);
    LogRecord r;
    r.round = j.at("round").get<int>();
    r.step = j.at("step").get<int>();
    r.sender = parse_endpoint(j.at("sender").get<std::string>());
    r.receiver = parse_endpoint(j.at("receiver").get<std::string>());
    r.variant = j.at("variant").get<std::string>();
    r.bytes = j.at("bytes").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("log: malformed record: ") + e.what());
  }
}

void Router::set_membership(const federation::ClusterAssignment& assignment) {
  members_.clear();
  for (std::size_t c = 0; c < assignment.members.size(); ++c)
    members_[static_cast<int>(c)] = assignment.members[c];
}

void Router::check_route(const Endpoint& sender, const Endpoint& receiver,
                         const Message& message) const {
  auto refuse = [&](const std::string& why) {
    throw ProtocolError(std::string(variant_name(message)) + " from " + sender.label() + " to " +
                        receiver.label() + ": " + why);
  };
  if (sender == receiver) refuse("sender and receiver coincide");
  std::visit(
      Overloaded{
          [&](const AdapterUpload& m) {
            if (sender.role != Role::kClient || sender.id != m.client_id)
              refuse("uploads come only from the owning client");
            if (receiver.role != Role::kTes) refuse("uploads go only to the TES");
          },
          [&](const ClusterModelDown& m) {
            if (sender.role != Role::kTes) refuse("cluster models come only from the TES");
            if (receiver.role != Role::kClient) refuse("cluster models go only to clients");
            const auto it = members_.find(m.cluster_id);
            if (it == members_.end() ||
                std::find(it->second.begin(), it->second.end(), receiver.id) == it->second.end())
              refuse("receiver is not a member of cluster " + std::to_string(m.cluster_id));
          },
          [&](const GlobalLoraToIES&) {
            if (sender.role != Role::kTes || receiver.role != Role::kIes)
              refuse("the global adapter travels only from TES to IES");
          },
          [&](const InferRequest&) {
            if (sender.role != Role::kClient || receiver.role != Role::kIes)
              refuse("inference requests travel only from a client to the IES");
          },
          [&](const LatentHandoff&) {
            if (sender.role != Role::kIes || receiver.role != Role::kClient)
              refuse("latents travel only from the IES to clients");
          },
          [&](const RoundControl&) {
            if (sender.role != Role::kTes) refuse("round markers come only from the TES");
          },
      },
      message);
}

void Router::send(int round, int step, Endpoint sender, Endpoint receiver, Message message) {
  check_route(sender, receiver, message);
  log_.push_back({round, step, sender, receiver, std::string(variant_name(message)),
                  message_size(message)});
  mailboxes_[receiver].push_back({sender, std::move(message)});
}

std::vector<Envelope> Router::drain(Endpoint receiver) {
  auto it = mailboxes_.find(receiver);
  if (it == mailboxes_.end()) return {};
  std::vector<Envelope> out = std::move(it->second);
  mailboxes_.erase(it);
  return out;
}

// ---------------------------------------------------------------------------
// Training round

namespace {

void tally(RoundReport& report, const LogRecord& r) {
  if (r.sender.role == Role::kClient)
    report.uplink_bytes += r.bytes;
  else if (r.receiver.role == Role::kClient)
    report.downlink_bytes += r.bytes;
  else
    report.server_bytes += r.bytes;
}

}  // namespace

RoundReport run_training_round(World& world, const RoundConfig& config) {
  if (world.clients.empty()) throw ArgumentError("run_training_round: no clients");
  const int round = world.rounds_completed + 1;
  const std::size_t log_start = world.router.log().size();
  RoundReport report;
  report.round = round;
  Router& net = world.router;

  for (const auto& c : world.clients)
    net.send(round, 0, Endpoint::tes(), Endpoint::client(c.client_id),
             RoundControl{Marker::kRoundBegin});

  // (1) local fine-tuning and (2) upload
  for (auto& c : world.clients) {
    net.drain(Endpoint::client(c.client_id));
    RngStream rng = RngStream::for_purpose(world.seed, static_cast<std::uint64_t>(c.client_id),
                                           static_cast<std::uint64_t>(round), Purpose::kTraining);
    federation::FinetuneResult r = federation::local_finetune(
        c, world.base, config.finetune, world.schedule, rng, world.embedding_salt);
    const int n = static_cast<int>(c.data.size());
    const std::size_t per_epoch =
        static_cast<std::size_t>((n + config.finetune.batch_size - 1) / config.finetune.batch_size);
    double last = 0.0;
    const std::size_t k = std::min(per_epoch, r.losses.size());
    for (std::size_t i = r.losses.size() - k; i < r.losses.size(); ++i) last += r.losses[i];
    report.final_loss[c.client_id] = k > 0 ? last / static_cast<double>(k) : 0.0;
    c = std::move(r.profile);
    net.send(round, 1, Endpoint::client(c.client_id), Endpoint::tes(),
             AdapterUpload{c.client_id, c.sample_count, c.adapters, c.embedding});
  }

  // (3) clustering, (4) intra-cluster and (5) inter-cluster aggregation at the TES
  TesState& tes = world.tes;
  tes.uploads.clear();
  for (auto& env : net.drain(Endpoint::tes()))
    if (auto* up = std::get_if<AdapterUpload>(&env.message)) tes.uploads.push_back(std::move(*up));
  std::vector<federation::DomainEmbedding> embeddings;
  for (const auto& up : tes.uploads) embeddings.push_back(up.embedding);
  tes.assignment = federation::cluster_clients(embeddings, config.tau_c);
  net.set_membership(tes.assignment);

  tes.cluster_models.clear();
  for (int k = 0; k < tes.assignment.cluster_count(); ++k) {
    std::vector<AdapterSet> sets;
    std::vector<double> weights;
    double total = 0.0;
    for (int id : tes.assignment.members[k])
      for (const auto& up : tes.uploads)
        if (up.client_id == id) {
          sets.push_back(up.adapters);
          const double w = config.weight_by_samples ? static_cast<double>(up.sample_count) : 1.0;
          weights.push_back(w);
          total += w;
        }
    for (double& w : weights) w = total > 0.0 ? w / total : 1.0 / static_cast<double>(sets.size());
    tes.cluster_models.push_back({k, federation::intra_cluster_aggregate(sets, weights),
                                  tes.assignment.centroids[k]});
  }
  const auto coefficients =
      federation::compute_coefficients(tes.cluster_models, config.tau_ded, config.lambda_snt);
  const auto global = federation::inter_cluster_aggregate(tes.cluster_models, coefficients);

  // (6a) personalized models down to members, (6b) global adapter to the IES
  for (const auto& model : tes.cluster_models)
    for (int id : tes.assignment.members[model.cluster_id])
      net.send(round, 2, Endpoint::tes(), Endpoint::client(id),
               ClusterModelDown{model.cluster_id, model.adapters});
  net.send(round, 3, Endpoint::tes(), Endpoint::ies(), GlobalLoraToIES{global.adapters, coefficients});

  for (auto& c : world.clients)
    for (auto& env : net.drain(Endpoint::client(c.client_id)))
      if (auto* down = std::get_if<ClusterModelDown>(&env.message)) {
        c.adapters = std::move(down->adapters);
        c.rank = c.adapters.begin()->second.rank();
      }
  for (auto& env : net.drain(Endpoint::ies()))
    if (auto* g = std::get_if<GlobalLoraToIES>(&env.message)) {
      world.ies.global = std::move(g->adapters);
      world.ies.coefficients = std::move(g->coefficients);
    }

  for (const auto& c : world.clients)
    net.send(round, 4, Endpoint::tes(), Endpoint::client(c.client_id),
             RoundControl{Marker::kRoundEnd});
  net.send(round, 4, Endpoint::tes(), Endpoint::ies(), RoundControl{Marker::kRoundEnd});
  for (const auto& c : world.clients) net.drain(Endpoint::client(c.client_id));
  net.drain(Endpoint::ies());

  report.assignment = tes.assignment;
  report.coefficients = coefficients;
  for (const auto& [layer, a] : global.adapters) report.global_rank[layer] = a.rank();
  report.rank_overflow = global.rank_overflow;
  report.degenerate_snt = coefficients.degenerate_snt;
  report.all_filtered_fallback = coefficients.all_filtered_fallback;
  for (std::size_t i = log_start; i < net.log().size(); ++i) {
    report.messages.push_back(net.log()[i]);
    tally(report, net.log()[i]);
  }
  ++world.rounds_completed;
  return report;
}

// ---------------------------------------------------------------------------
// Hybrid inference

int server_steps(double rho, int total_steps) {
  const double x = rho * total_steps;
  const double nearest = std::round(x);
  if (std::abs(x - nearest) < 1e-9) return static_cast<int>(nearest);
  return static_cast<int>(std::ceil(x));
}

void HybridConfig::validate(int total_steps) const {
  if (!(rho >= 0.0 && rho < 1.0)) throw ArgumentError("hybrid: rho must be in [0, 1)");
  if (!(mix_loras >= 0.7 && mix_loras <= 1.0))
    throw ArgumentError("hybrid: mix_loras must be in [0.7, 1.0]");
  auto check_scale = [](double s) {
    if (!(s >= 0.75 && s <= 0.95)) throw ArgumentError("hybrid: local_scale must be in [0.75, 0.95]");
  };
  check_scale(local_scale);
  for (const auto& [id, s] : client_scale) check_scale(s);
  if (sample_count < 2) throw ArgumentError("hybrid: sample_count must be at least 2");
  if (server_steps(rho, total_steps) >= total_steps)
    throw ArgumentError("hybrid: server steps must stay below T");
}

HybridResult hybrid_infer(World& world, const HybridConfig& config) {
  const int T = world.schedule.steps;
  config.validate(T);
  if (world.clients.empty()) throw ArgumentError("hybrid_infer: no clients");
  if (config.use_global && !world.ies.global)
    throw ProtocolError("hybrid_infer: IES holds no global adapter");
  const int round = world.rounds_completed;
  Router& net = world.router;

  const int requester = world.clients.front().client_id;
  net.send(round, 0, Endpoint::client(requester), Endpoint::ies(),
           InferRequest{diffusion::StyleToken::neutral(diffusion::Denoiser::kTokenDim), config.rho,
                        config.mix_loras, config.sample_count, config.stream_id});

  HybridResult out;
  out.server_steps = server_steps(config.rho, T);
  out.client_steps = T - out.server_steps;
  for (auto& env : net.drain(Endpoint::ies())) {
    const auto* req = std::get_if<InferRequest>(&env.message);
    if (!req) continue;
    const RngStream stream(req->stream_id);
    Matrix x = diffusion::initial_latent(req->sample_count, stream);
    if (out.server_steps > 0) {
      const AdapterSet* global = config.use_global ? &*world.ies.global : nullptr;
      x = diffusion::ddpm_denoise(world.base, global, config.use_global ? req->mix_loras : 0.0,
                                  req->token, std::move(x), T, out.client_steps, world.schedule,
                                  stream);
    }
    out.shared_latent = x;
    for (const auto& c : world.clients)
      net.send(round, 1, Endpoint::ies(), Endpoint::client(c.client_id),
               LatentHandoff{x, out.client_steps, req->stream_id});
  }

  for (auto& c : world.clients) {
    for (auto& env : net.drain(Endpoint::client(c.client_id))) {
      const auto* handoff = std::get_if<LatentHandoff>(&env.message);
      if (!handoff) continue;
      const auto it = config.client_scale.find(c.client_id);
      const double scale = it == config.client_scale.end() ? config.local_scale : it->second;
      diffusion::SampleBatch batch;
      batch.points = diffusion::ddpm_denoise(world.base, &c.adapters, scale, c.token,
                                             handoff->latent, handoff->resume_step, 0,
                                             world.schedule, RngStream(handoff->stream_id));
      out.samples[c.client_id] = std::move(batch);
    }
  }
  return out;
}

}  // namespace edgefl::protocol
