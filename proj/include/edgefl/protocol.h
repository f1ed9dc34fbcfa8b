#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "edgefl/diffusion.h"
#include "edgefl/federation.h"
#include "edgefl/lowrank.h"

namespace edgefl::protocol {

using Bytes = std::vector<std::uint8_t>;
using diffusion::Matrix;
using lowrank::AdapterSet;

// Wire variants. None of them has a field able to hold samples, style labels
// or base-model weights.
struct AdapterUpload {
  int client_id = 0;
  int sample_count = 0;
  AdapterSet adapters;
  federation::DomainEmbedding embedding;
};

struct ClusterModelDown {
  int cluster_id = 0;
  AdapterSet adapters;
};

struct GlobalLoraToIES {
  AdapterSet adapters;
  federation::AggregationCoefficients coefficients;
};

struct InferRequest {
  diffusion::StyleToken token;  // generic prompt, always neutral here
  double rho = 0.0;
  double mix_loras = 1.0;
  int sample_count = 0;
  std::uint64_t stream_id = 0;
};

struct LatentHandoff {
  Matrix latent;
  int resume_step = 0;
  std::uint64_t stream_id = 0;
};

enum class Marker : std::uint16_t { kRoundBegin = 1, kRoundEnd = 2 };

struct RoundControl {
  Marker marker = Marker::kRoundBegin;
};

using Message = std::variant<AdapterUpload, ClusterModelDown, GlobalLoraToIES, InferRequest,
                             LatentHandoff, RoundControl>;

std::string_view variant_name(const Message& message);

// Canonical encoding. Every frame starts with a 16-byte header:
//   "EFL1", u16 frame kind, u16 sub-kind, u64 payload length.
// Payload integers are little-endian; reals are IEEE-754 f64 little-endian.
// A matrix is u32 rows, u32 cols, then row-major values; a vector is u32
// length then values; a string is u32 length then bytes. An adapter set is
// u32 count then, per layer in key order: id string, f64 alpha, down, up.
inline constexpr std::size_t kHeaderBytes = 16;

enum class FrameKind : std::uint16_t {
  kAdapterUpload = 1,
  kClusterModelDown = 2,
  kGlobalLoraToIES = 3,
  kInferRequest = 4,
  kLatentHandoff = 5,
  kRoundControl = 6,
  kAdapterSet = 16,
  kDenoiser = 17,
};

Bytes encode(const Message& message);
Message decode(const Bytes& bytes);
std::size_t message_size(const Message& message);

Bytes encode_adapter_set(const AdapterSet& adapters);
AdapterSet decode_adapter_set(const Bytes& bytes);

// Full base network (every layer's id, activation, weight and bias). Never
// sent as a message; used to compare upload costs.
Bytes encode_denoiser(const diffusion::Denoiser& denoiser);
diffusion::Denoiser decode_denoiser(const Bytes& bytes);

enum class Role { kClient, kTes, kIes };

struct Endpoint {
  Role role = Role::kClient;
  int id = -1;  // client id; -1 for servers

  static Endpoint client(int id) { return {Role::kClient, id}; }
  static Endpoint tes() { return {Role::kTes, -1}; }
  static Endpoint ies() { return {Role::kIes, -1}; }
  std::string label() const;
  auto operator<=>(const Endpoint&) const = default;
};

struct LogRecord {
  int round = 0;
  int step = 0;
  Endpoint sender;
  Endpoint receiver;
  std::string variant;
  std::size_t bytes = 0;
};

// One JSON object per line.
std::string to_json_line(const LogRecord& record);
LogRecord parse_json_line(std::string_view line);

struct Envelope {
  Endpoint sender;
  Message message;
};

// In-memory channels between roles. Routes outside the allowed set raise
// ProtocolError before anything is logged or delivered.
class Router {
 public:
  void set_membership(const federation::ClusterAssignment& assignment);
  void send(int round, int step, Endpoint sender, Endpoint receiver, Message message);
  std::vector<Envelope> drain(Endpoint receiver);

  const std::vector<LogRecord>& log() const { return log_; }

 private:
  void check_route(const Endpoint& sender, const Endpoint& receiver, const Message& message) const;

  std::map<int, std::vector<int>> members_;
  std::map<Endpoint, std::vector<Envelope>> mailboxes_;
  std::vector<LogRecord> log_;
};

struct TesState {
  std::vector<AdapterUpload> uploads;  // latest round
  federation::ClusterAssignment assignment;
  std::vector<federation::ClusterModel> cluster_models;
};

struct IesState {
  std::optional<AdapterSet> global;
  federation::AggregationCoefficients coefficients;
};

struct World {
  diffusion::Denoiser base;  // identical copy on every client and on the IES
  diffusion::DiffusionSchedule schedule;
  std::vector<federation::ClientProfile> clients;  // ascending ids
  TesState tes;
  IesState ies;
  Router router;
  std::uint64_t seed = 0;
  std::uint64_t embedding_salt = 0;
  int rounds_completed = 0;
};

struct RoundConfig {
  federation::FinetuneOptions finetune;
  double tau_c = 0.5;
  double tau_ded = 0.8;
  double lambda_snt = 4.0;
  bool weight_by_samples = false;  // intra-cluster weights; uniform when false
};

struct RoundReport {
  int round = 0;  // 1-based; round 0 is the untrained state
  federation::ClusterAssignment assignment;
  federation::AggregationCoefficients coefficients;
  std::vector<LogRecord> messages;
  std::map<int, double> final_loss;  // mean of each client's last epoch
  std::map<std::string, int> global_rank;
  std::size_t uplink_bytes = 0;    // client -> server
  std::size_t downlink_bytes = 0;  // server -> client
  std::size_t server_bytes = 0;    // TES -> IES
  bool rank_overflow = false;
  bool degenerate_snt = false;
  bool all_filtered_fallback = false;

  std::size_t total_bytes() const { return uplink_bytes + downlink_bytes + server_bytes; }
};

RoundReport run_training_round(World& world, const RoundConfig& config);

struct HybridConfig {
  double rho = 0.2;
  double mix_loras = 1.0;
  double local_scale = 0.95;
  std::map<int, double> client_scale;  // per-client overrides
  int sample_count = 1000;
  std::uint64_t stream_id = 0;
  bool use_global = true;  // false: server steps run the bare backbone

  void validate(int total_steps) const;
};

// ceil(rho * T), with rho * T values within 1e-9 of an integer taken as exact.
int server_steps(double rho, int total_steps);

struct HybridResult {
  int server_steps = 0;
  int client_steps = 0;
  Matrix shared_latent;
  std::map<int, diffusion::SampleBatch> samples;
};

HybridResult hybrid_infer(World& world, const HybridConfig& config);

}  // namespace edgefl::protocol
