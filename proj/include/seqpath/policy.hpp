#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqpath/autodiff.hpp"
#include "seqpath/checkpoint.hpp"
#include "seqpath/observation.hpp"

namespace seqpath {

struct PolicyConfig {
  int fov = kDefaultFov;
  int conv1 = 8;   // channels in the first VGG block
  int conv2 = 16;  // channels in the second VGG block and the extra conv
  int d = 64;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;

  /// Spatial side after both pooling stages.
  int pooled_side() const { return (fov / 2) / 2; }
  int flat_features() const { return conv2 * pooled_side() * pooled_side(); }
  void validate() const;
};

nlohmann::json to_json(const PolicyConfig& cfg);
PolicyConfig policy_config_from_json(const nlohmann::json& j);

/// Seeded initialisation of every parameter the network uses.
ParamSet init_params(const PolicyConfig& cfg, std::uint64_t seed);

/// Puts every parameter of a ParamSet on a tape, either as trainable
/// variables or as constants.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamSet& params, bool trainable);

  ad::Var operator()(const std::string& name) const;
  ad::Var at(size_t i) const { return vars_[i]; }
  size_t size() const { return vars_.size(); }
  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  const ParamSet* params_;
  std::vector<ad::Var> vars_;
};

/// Per-agent LSTM carries, each [n, d].
struct HiddenState {
  ad::Array h;
  ad::Array c;

  static HiddenState zeros(int n_agents, int d);
  int n_agents() const { return static_cast<int>(h.dim(0)); }
};

/// Stacks observations into a constant [N, 13, m, m] array.
ad::Array stack_observations(std::span<const ObservationTensor> obs);

struct Features {
  ad::Var z;  // [N, d]
  ad::Var h;
  ad::Var c;
};

/// Conv stack, fully connected stack and LSTM over a batch of observations.
Features extract_features(const BoundParams& p, const PolicyConfig& cfg, ad::Var obs, ad::Var h,
                          ad::Var c);

struct Encoded {
  ad::Var ohat;    // [G, n, d]
  ad::Var values;  // [G, n]
};

/// Unmasked self-attention over the agent axis of z[G, n, d].
Encoded encode(const BoundParams& p, const PolicyConfig& cfg, ad::Var z);

/// Per-agent values only, for target-network evaluation.
ad::Var value_head(const BoundParams& p, const PolicyConfig& cfg, ad::Var ohat);

inline constexpr int kStartToken = kNumActions;

/// Teacher-forced decoding. `actions` and the returned logits rows are in
/// agent order ([G * n] and [G * n, 5]); `orders` holds one decision order
/// per group (agent ids, G * n entries) or is empty for identity order.
ad::Var decode_logits(const BoundParams& p, const PolicyConfig& cfg, ad::Var ohat,
                      std::span<const int> actions, std::span<const int> orders = {});

/// Decodes one agent at a time for a single group, caching the keys and
/// values of earlier positions so each step touches only one new row.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const BoundParams& p, const PolicyConfig& cfg, ad::Var ohat_rows);

  /// Logits [1, 5] for the next position in decision order given the action
  /// chosen at the previous position (kStartToken first).
  ad::Var step(int previous_action);
  int position() const { return pos_; }

 private:
  const BoundParams& p_;
  const PolicyConfig& cfg_;
  ad::Var ohat_;  // [n, d] in decision order
  int pos_ = 0;
  std::vector<ad::Array> self_k_, self_v_, cross_k_, cross_v_;
};

enum class DecodeMode { Sample, Argmax };

struct JointSample {
  std::vector<int> actions;     // agent order
  std::vector<double> logprob;  // of the chosen action, agent order
  std::vector<double> values;
  /// Full log-distribution per agent given the realised prefix.
  std::vector<std::array<double, kNumActions>> log_dist;
  HiddenState hidden;
};

/// Extract, encode once, then decode the agents autoregressively in `order`
/// (identity when empty).
JointSample sample_joint(const ParamSet& params, const PolicyConfig& cfg,
                         std::span<const ObservationTensor> obs, const HiddenState& hidden,
                         DecodeMode mode, std::mt19937_64& rng, std::span<const int> order = {});

std::vector<int> identity_order(int n);

}  // namespace seqpath
