#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mulab/tensor.hpp"

namespace mulab {

enum class Activation { kRelu, kSquaredRelu, kSwiGLU };
enum class AttnScaleMode { kMup, kStandard };
enum class NormParams { kNone, kVector, kScalar };

const char* to_string(Activation a);
const char* to_string(AttnScaleMode m);
const char* to_string(NormParams n);
Activation activation_from_string(const std::string& s);
AttnScaleMode attn_scale_mode_from_string(const std::string& s);
NormParams norm_params_from_string(const std::string& s);

// Full architectural description of one decoder-only transformer; the single
// source of truth for shapes and variant toggles.
struct ModelConfig {
  int64_t vocab = 256;        // V
  int64_t context = 64;       // C (tokens per training sequence)
  int64_t depth = 4;          // L
  int64_t width = 64;         // M (residual stream)
  int64_t head_width = 32;    // D
  int64_t n_heads = 2;        // H (query heads)
  int64_t kv_heads = 2;       // H for multi-head, 1 for multi-query
  int64_t mlp_width = 256;    // F
  Activation activation = Activation::kRelu;
  AttnScaleMode attn_scale_mode = AttnScaleMode::kMup;
  double attn_scale_override = 0.0;  // >0 replaces the mode formula
  NormParams norm_params = NormParams::kNone;
  bool use_biases = false;
  bool embed_norm = false;
  double rope_base = 10000.0;

  // Derives H = M/D, kv_heads, and the default MLP width: 4M for relu and
  // squared relu, 5M for swiglu and for multi-query.
  static ModelConfig make(int64_t vocab, int64_t context, int64_t depth, int64_t width,
                          int64_t head_width, Activation act = Activation::kRelu,
                          bool multi_query = false, int64_t mlp_width = 0);

  void validate() const;  // throws std::invalid_argument
  double attn_scale() const;
  bool is_multi_query() const { return kv_heads == 1 && n_heads > 1; }
};

enum class ParamRole {
  kEmbedding,
  kAttnQuery,
  kAttnKey,
  kAttnValue,
  kAttnOut,
  kMlpIn,
  kMlpOut,
  kMlpGate,
  kMlpUp,
  kMlpDown,
  kUnembedding,
  kBias,
  kNormGain,
};

const char* to_string(ParamRole r);

struct ParamSpec {
  std::string name;
  ParamRole role;
  Shape shape;
  int64_t fan_in = 0;  // 0 where fan-in is not meaningful (embedding, bias, gain)
};

// Deterministic tensor inventory for a configuration; no allocation.
std::vector<ParamSpec> enumerate_params(const ModelConfig& cfg);
int64_t param_count(const ModelConfig& cfg);

struct ParamEntry {
  ParamSpec spec;
  TensorPtr tensor;
};

// Named, stably ordered parameter tensors of one model.
struct ParamSet {
  std::vector<ParamEntry> entries;

  const ParamEntry& find(const std::string& name) const;  // throws on unknown name
  TensorPtr tensor(const std::string& name) const { return find(name).tensor; }
  size_t size() const { return entries.size(); }
};

// Allocates the exact tensor inventory for cfg (values zero, grads unset).
ParamSet build_model(const ModelConfig& cfg);

// Activation-statistics probes captured during a forward pass: name -> RMS of
// coordinates, computed with double accumulation.
struct ProbeRecord {
  std::vector<std::pair<std::string, double>> rms;
  double find(const std::string& name) const;
};

// Wires a ParamSet into forward graphs for the configuration. One instance
// serves one thread; the ParamSet must stay alive and unchanged during a
// forward/backward pass.
class TransformerModel {
 public:
  TransformerModel(const ModelConfig& cfg, ParamSet& params);

  // Residual produced by the attention block at `layer` for stream input x.
  TensorPtr mha_block(Graph& g, const TensorPtr& x, int64_t layer) const;
  // Residual produced by the MLP block at `layer`.
  TensorPtr mlp_block(Graph& g, const TensorPtr& x, int64_t layer) const;

  // Logits [C', V] for a token prefix (C' <= context).
  TensorPtr forward_logits(Graph& g, std::span<const uint16_t> tokens,
                           ProbeRecord* probes = nullptr) const;
  // Mean next-token cross entropy for a (C'+1)-token window.
  TensorPtr forward_loss(Graph& g, std::span<const uint16_t> tokens,
                         std::span<const uint8_t> valid = {}, ProbeRecord* probes = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  const RopeTable& rope_table() const { return rope_; }

 private:
  TensorPtr norm_gain(const std::string& name) const;
  TensorPtr maybe_bias(const std::string& name) const;

  const ModelConfig cfg_;
  ParamSet& params_;
  RopeTable rope_;
  double tau_inv_;
};

}  // namespace mulab
