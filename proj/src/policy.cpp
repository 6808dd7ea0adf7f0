#include "seqpath/policy.hpp"

#include <cmath>
#include <numeric>

namespace seqpath {

using ad::Array;
using ad::Index;
using ad::Var;

void PolicyConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::BadConfig, what); };
  if (fov < 5 || fov % 2 == 0) bad("policy fov must be odd and >= 5");
  if (conv1 < 1 || conv2 < 1 || d < 1) bad("policy widths must be positive");
  if (heads < 1 || d % heads != 0) bad("embedding width must be divisible by the head count");
  if (enc_layers < 0 || dec_layers < 0) bad("layer counts must be non-negative");
}

nlohmann::json to_json(const PolicyConfig& cfg) {
  return {{"fov", cfg.fov},   {"conv1", cfg.conv1}, {"conv2", cfg.conv2},
          {"d", cfg.d},       {"heads", cfg.heads}, {"enc_layers", cfg.enc_layers},
          {"dec_layers", cfg.dec_layers}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig cfg;
  cfg.fov = j.value("fov", cfg.fov);
  cfg.conv1 = j.value("conv1", cfg.conv1);
  cfg.conv2 = j.value("conv2", cfg.conv2);
  cfg.d = j.value("d", cfg.d);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.enc_layers = j.value("enc_layers", cfg.enc_layers);
  cfg.dec_layers = j.value("dec_layers", cfg.dec_layers);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

namespace {

class Initializer {
 public:
  Initializer(ParamSet& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  void normal(const std::string& name, ad::Shape shape, double stddev) {
    Array a(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < a.size(); ++i) a.data[i] = dist(rng_);
    params_.add(name, std::move(a));
  }
  void constant(const std::string& name, ad::Shape shape, double v) {
    params_.add(name, Array::filled(std::move(shape), v));
  }
  void linear(const std::string& name, Index in, Index out, double gain = 1.0) {
    normal(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)));
    constant(name + ".b", {out}, 0.0);
  }
  void conv(const std::string& name, Index in, Index out) {
    normal(name + ".w", {out, in, 3, 3}, std::sqrt(2.0 / (9.0 * in)));
    constant(name + ".b", {out}, 0.0);
  }
  void norm(const std::string& name, Index d) {
    constant(name + ".g", {d}, 1.0);
    constant(name + ".b", {d}, 0.0);
  }

 private:
  ParamSet& params_;
  std::mt19937_64 rng_;
};

void init_attention(Initializer& init, const std::string& name, Index d) {
  for (const char* part : {".q", ".k", ".v", ".o"}) init.linear(name + part, d, d);
}

void init_mlp(Initializer& init, const std::string& name, Index d) {
  init.linear(name + ".fc1", d, 2 * d, std::sqrt(2.0));
  init.linear(name + ".fc2", 2 * d, d);
}

}  // namespace

ParamSet init_params(const PolicyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet params;
  Initializer init(params, seed);
  const Index d = cfg.d;

  int in = kObsChannels;
  for (int i = 0; i < 3; ++i, in = cfg.conv1) init.conv("ext.b1.conv" + std::to_string(i), in, cfg.conv1);
  for (int i = 0; i < 3; ++i, in = cfg.conv2) init.conv("ext.b2.conv" + std::to_string(i), in, cfg.conv2);
  init.conv("ext.conv_extra", cfg.conv2, cfg.conv2);
  const Index flat = cfg.flat_features();
  init.linear("ext.fc1", flat, d, std::sqrt(2.0));
  init.linear("ext.fc2", d, d);
  init.linear("ext.proj", flat, d);
  init.normal("ext.lstm.wx", {d, 4 * d}, 1.0 / std::sqrt(static_cast<double>(d)));
  init.normal("ext.lstm.wh", {d, 4 * d}, 1.0 / std::sqrt(static_cast<double>(d)));
  {
    Array b({4 * d});
    b.data.segment(d, d).setOnes();  // forget gate starts open
    params.add("ext.lstm.b", std::move(b));
  }

  for (int l = 0; l < cfg.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    init.norm(p + ".ln1", d);
    init_attention(init, p + ".attn", d);
    init.norm(p + ".ln2", d);
    init_mlp(init, p + ".mlp", d);
  }
  init.norm("enc.ln_f", d);
  init.linear("enc.value.fc1", d, d, std::sqrt(2.0));
  init.linear("enc.value.fc2", d, 1);

  init.normal("dec.embed", {kNumActions + 1, d}, 1.0);
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    for (const char* ln : {".ln1", ".ln2", ".ln3", ".ln4"}) init.norm(p + ln, d);
    init_attention(init, p + ".self", d);
    init_attention(init, p + ".cross", d);
    init_mlp(init, p + ".mlp", d);
  }
  init.norm("dec.ln_f", d);
  init.linear("dec.head.fc1", d, d, std::sqrt(2.0));
  init.linear("dec.head.fc2", d, kNumActions, 0.01);
  return params;
}

BoundParams::BoundParams(ad::Tape& tape, const ParamSet& params, bool trainable)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    vars_.push_back(trainable ? tape.variable(params[i]) : tape.constant(params[i]));
  }
}

Var BoundParams::operator()(const std::string& name) const {
  return vars_[params_->index_of(name)];
}

HiddenState HiddenState::zeros(int n_agents, int d) {
  return {Array({n_agents, d}), Array({n_agents, d})};
}

Array stack_observations(std::span<const ObservationTensor> obs) {
  if (obs.empty()) throw Error(ErrorCode::ShapeMismatch, "no observations");
  const Index m = obs[0].fov;
  const Index plane = kObsChannels * m * m;
  Array out({static_cast<Index>(obs.size()), kObsChannels, m, m});
  for (size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].fov != m || obs[i].data.size() != plane) {
      throw Error(ErrorCode::ShapeMismatch, "observations differ in field of view");
    }
    out.data.segment(static_cast<Index>(i) * plane, plane) = obs[i].data;
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

Var linear(const BoundParams& p, const std::string& name, Var x) {
  return ad::add_bias(ad::matmul(x, p(name + ".w")), p(name + ".b"));
}

Var norm(const BoundParams& p, const std::string& name, Var x) {
  return ad::layer_norm(x, p(name + ".g"), p(name + ".b"));
}

Var mlp(const BoundParams& p, const std::string& name, Var x) {
  return linear(p, name + ".fc2", ad::relu(linear(p, name + ".fc1", x)));
}

Var conv_relu(const BoundParams& p, const std::string& name, Var x) {
  return ad::relu(ad::conv2d(x, p(name + ".w"), p(name + ".b")));
}

Var attend(const BoundParams& p, const std::string& name, Var q_in, Var kv_in, int heads,
           bool causal) {
  Var q = linear(p, name + ".q", q_in);
  Var k = linear(p, name + ".k", kv_in);
  Var v = linear(p, name + ".v", kv_in);
  return linear(p, name + ".o", ad::attention(q, k, v, heads, causal));
}

}  // namespace

Features extract_features(const BoundParams& p, const PolicyConfig& cfg, Var obs, Var h, Var c) {
  const ad::Shape& s = obs.shape();
  if (s.size() != 4 || s[1] != kObsChannels || s[2] != cfg.fov || s[3] != cfg.fov) {
    throw Error(ErrorCode::ShapeMismatch, "observation batch " + ad::shape_string(s));
  }
  const Index n = s[0];
  Var x = obs;
  for (int i = 0; i < 3; ++i) x = conv_relu(p, "ext.b1.conv" + std::to_string(i), x);
  x = ad::maxpool2d(x);
  for (int i = 0; i < 3; ++i) x = conv_relu(p, "ext.b2.conv" + std::to_string(i), x);
  x = ad::maxpool2d(x);
  x = conv_relu(p, "ext.conv_extra", x);
  Var x0 = ad::reshape(x, {n, cfg.flat_features()});
  Var x1 = linear(p, "ext.fc2", ad::relu(linear(p, "ext.fc1", x0)));
  Var lstm_in = ad::add(linear(p, "ext.proj", x0), x1);
  auto [h2, c2] = ad::lstm_step(lstm_in, h, c, {p("ext.lstm.wx"), p("ext.lstm.wh"), p("ext.lstm.b")});
  return {h2, h2, c2};
}

Var value_head(const BoundParams& p, const PolicyConfig&, Var ohat) {
  const ad::Shape& s = ohat.shape();
  Var v = mlp(p, "enc.value", ohat);
  return ad::reshape(v, {s[0], s[1]});
}

Encoded encode(const BoundParams& p, const PolicyConfig& cfg, Var z) {
  const ad::Shape& s = z.shape();
  if (s.size() != 3 || s[2] != cfg.d || s[1] < 1) {
    throw Error(ErrorCode::ShapeMismatch, "encoder input " + ad::shape_string(s));
  }
  Var x = z;
  for (int l = 0; l < cfg.enc_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    Var h = norm(p, pre + ".ln1", x);
    x = ad::add(x, attend(p, pre + ".attn", h, h, cfg.heads, false));
    x = ad::add(x, mlp(p, pre + ".mlp", norm(p, pre + ".ln2", x)));
  }
  Var ohat = norm(p, "enc.ln_f", x);
  return {ohat, value_head(p, cfg, ohat)};
}

std::vector<int> identity_order(int n) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  return order;
}

Var decode_logits(const BoundParams& p, const PolicyConfig& cfg, Var ohat,
                  std::span<const int> actions, std::span<const int> orders) {
  const ad::Shape& s = ohat.shape();
  if (s.size() != 3 || s[2] != cfg.d) throw Error(ErrorCode::ShapeMismatch, "decoder input " + ad::shape_string(s));
  const Index g = s[0], n = s[1], d = s[2];
  if (static_cast<Index>(actions.size()) != g * n) {
    throw Error(ErrorCode::ShapeMismatch, "one action per agent and group is required");
  }
  if (!orders.empty() && static_cast<Index>(orders.size()) != g * n) {
    throw Error(ErrorCode::ShapeMismatch, "one decision order per group is required");
  }
  // Row ids mapping decision positions to agent rows and back.
  std::vector<int> to_agent(g * n), to_position(g * n), shifted(g * n);
  for (Index gi = 0; gi < g; ++gi) {
    std::vector<char> seen(n, 0);
    for (Index k = 0; k < n; ++k) {
      const int a = orders.empty() ? static_cast<int>(k) : orders[gi * n + k];
      if (a < 0 || a >= n || seen[a]) throw Error(ErrorCode::BadOrder, "decision order is not a permutation");
      seen[a] = 1;
      to_agent[gi * n + k] = static_cast<int>(gi * n + a);
      to_position[gi * n + a] = static_cast<int>(gi * n + k);
    }
    for (Index k = 0; k < n; ++k) {
      const int prev = k == 0 ? kStartToken : actions[to_agent[gi * n + k - 1]];
      if (prev < 0 || prev > kStartToken) throw Error(ErrorCode::BadActionValue, "action out of range");
      shifted[gi * n + k] = prev;
    }
  }

  Var rows = ad::embedding(ad::reshape(ohat, {g * n, d}), to_agent);
  Var o = ad::reshape(rows, {g, n, d});
  Var x = ad::reshape(ad::embedding(p("dec.embed"), shifted), {g, n, d});
  for (int l = 0; l < cfg.dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    Var h = norm(p, pre + ".ln1", x);
    Var y = ad::add(x, attend(p, pre + ".self", h, h, cfg.heads, true));
    Var u = ad::add(o, attend(p, pre + ".cross", norm(p, pre + ".ln2", o), norm(p, pre + ".ln3", y),
                              cfg.heads, true));
    x = ad::add(u, mlp(p, pre + ".mlp", norm(p, pre + ".ln4", u)));
  }
  Var logits = mlp(p, "dec.head", norm(p, "dec.ln_f", x));
  return ad::embedding(ad::reshape(logits, {g * n, kNumActions}), to_position);
}

// ---------------------------------------------------------------------------

IncrementalDecoder::IncrementalDecoder(const BoundParams& p, const PolicyConfig& cfg, Var ohat_rows)
    : p_(p), cfg_(cfg), ohat_(ohat_rows) {
  const ad::Shape& s = ohat_rows.shape();
  if (s.size() != 2 || s[1] != cfg.d) throw Error(ErrorCode::ShapeMismatch, "decoder rows " + ad::shape_string(s));
  const Index n = s[0];
  for (auto* cache : {&self_k_, &self_v_, &cross_k_, &cross_v_}) {
    cache->assign(cfg.dec_layers, Array({n, cfg.d}));
  }
}

Var IncrementalDecoder::step(int previous_action) {
  const Index n = ohat_.shape()[0];
  const Index d = cfg_.d;
  if (pos_ >= n) throw Error(ErrorCode::ShapeMismatch, "every position has been decoded");
  if (previous_action < 0 || previous_action > kStartToken) {
    throw Error(ErrorCode::BadActionValue, "action out of range");
  }
  ad::Tape& tape = p_.tape();
  const int id = previous_action;
  Var x = ad::reshape(ad::embedding(p_("dec.embed"), std::span<const int>(&id, 1)), {1, 1, d});
  Var o = ad::reshape(ad::slice(ohat_, 0, pos_, pos_ + 1), {1, 1, d});
  const Index len = pos_ + 1;

  // Appends a [1, 1, d] row to a cache and returns the filled prefix.
  auto extend = [&](Array& cache, Var row) {
    cache.data.segment(pos_ * d, d) = row.value().data;
    return tape.constant(Array({1, len, d}, cache.data.head(len * d)));
  };
  auto cached_attend = [&](const std::string& name, Var q_in, Var kv_in, Array& kc, Array& vc) {
    Var q = linear(p_, name + ".q", q_in);
    Var k = extend(kc, linear(p_, name + ".k", kv_in));
    Var v = extend(vc, linear(p_, name + ".v", kv_in));
    return linear(p_, name + ".o", ad::attention(q, k, v, cfg_.heads, false));
  };

  for (int l = 0; l < cfg_.dec_layers; ++l) {
    const std::string pre = "dec." + std::to_string(l);
    Var h = norm(p_, pre + ".ln1", x);
    Var y = ad::add(x, cached_attend(pre + ".self", h, h, self_k_[l], self_v_[l]));
    Var u = ad::add(o, cached_attend(pre + ".cross", norm(p_, pre + ".ln2", o),
                                     norm(p_, pre + ".ln3", y), cross_k_[l], cross_v_[l]));
    x = ad::add(u, mlp(p_, pre + ".mlp", norm(p_, pre + ".ln4", u)));
  }
  ++pos_;
  return ad::reshape(mlp(p_, "dec.head", norm(p_, "dec.ln_f", x)), {1, kNumActions});
}

JointSample sample_joint(const ParamSet& params, const PolicyConfig& cfg,
                         std::span<const ObservationTensor> obs, const HiddenState& hidden,
                         DecodeMode mode, std::mt19937_64& rng, std::span<const int> order) {
  const int n = static_cast<int>(obs.size());
  if (hidden.n_agents() != n) throw Error(ErrorCode::ShapeMismatch, "hidden state does not match agent count");
  std::vector<int> seq = order.empty() ? identity_order(n) : std::vector<int>(order.begin(), order.end());
  if (static_cast<int>(seq.size()) != n) throw Error(ErrorCode::BadOrder, "decision order length");

  ad::Tape tape;
  tape.set_grad_enabled(false);
  BoundParams p(tape, params, false);
  Features f = extract_features(p, cfg, tape.constant(stack_observations(obs)), tape.constant(hidden.h),
                                tape.constant(hidden.c));
  Encoded enc = encode(p, cfg, ad::reshape(f.z, {1, n, cfg.d}));
  Var rows = ad::embedding(ad::reshape(enc.ohat, {n, cfg.d}), seq);

  JointSample out;
  out.actions.assign(n, 0);
  out.logprob.assign(n, 0.0);
  out.log_dist.assign(n, {});
  out.values.assign(enc.values.value().data.data(), enc.values.value().data.data() + n);
  out.hidden = {f.h.value(), f.c.value()};

  IncrementalDecoder dec(p, cfg, rows);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  int previous = kStartToken;
  for (int k = 0; k < n; ++k) {
    const Eigen::VectorXd& lp = ad::log_softmax(dec.step(previous)).value().data;
    int a = 0;
    if (mode == DecodeMode::Argmax) {
      lp.maxCoeff(&a);
    } else {
      const double u = uniform(rng);
      double acc = 0.0;
      a = kNumActions - 1;
      for (int j = 0; j < kNumActions; ++j) {
        acc += std::exp(lp[j]);
        if (u < acc) {
          a = j;
          break;
        }
      }
    }
    const int agent = seq[k];
    out.actions[agent] = a;
    out.logprob[agent] = lp[a];
    for (int j = 0; j < kNumActions; ++j) out.log_dist[agent][j] = lp[j];
    previous = a;
  }
  return out;
}

}  // namespace seqpath
