#include "seqpath/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "seqpath/expert.hpp"

namespace seqpath {

using ad::Array;
using ad::Index;
using ad::Var;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::BadConfig, what); };
  if (!(gamma >= 0.0 && gamma <= 1.0)) bad("gamma must lie in [0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) bad("lambda must lie in [0, 1]");
  if (!(clip_eps > 0.0)) bad("clip must be positive");
  if (!(lr >= 0.0)) bad("lr must be non-negative");
  if (!(bc_weight >= 0.0)) bad("bc_weight must be non-negative");
  if (target_update < 1) bad("target_update must be >= 1");
  if (n_envs < 1 || rollout_steps < 1 || episode_length < 1) bad("envs, rollout_steps and episode_length must be >= 1");
  if (rl_batch < 1 || il_batch < 1 || il_buffer < 1) bad("batch sizes must be >= 1");
  if (ppo_epochs < 0 || il_updates < 0) bad("update counts must be >= 0");
  if (!(env.reward.mix_alpha >= 0.0 && env.reward.mix_alpha <= 1.0)) bad("mix_alpha must lie in [0, 1]");
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::BadConfig, key + ": expected a number, got '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
  const double x = parse_double(key, v);
  if (x != std::floor(x)) throw Error(ErrorCode::BadConfig, key + ": expected an integer");
  return static_cast<int>(x);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorCode::BadConfig, key + ": expected a boolean, got '" + v + "'");
}

const char* name_of(RewardMode m) {
  switch (m) {
    case RewardMode::Global: return "global";
    case RewardMode::Individual: return "individual";
    case RewardMode::Partial: return "partial";
  }
  return "?";
}

}  // namespace

void parse_train_config(std::string_view text, TrainConfig& cfg, PolicyConfig& policy) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::BadConfig, "line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string v = trim(std::string_view(body).substr(eq + 1));

    if (key == "gamma") cfg.gamma = parse_double(key, v);
    else if (key == "lambda" || key == "gae_lambda") cfg.gae_lambda = parse_double(key, v);
    else if (key == "clip" || key == "clip_eps") cfg.clip_eps = parse_double(key, v);
    else if (key == "lr") cfg.lr = parse_double(key, v);
    else if (key == "bc_weight") cfg.bc_weight = parse_double(key, v);
    else if (key == "target_update") cfg.target_update = parse_int(key, v);
    else if (key == "envs") cfg.n_envs = parse_int(key, v);
    else if (key == "rollout_steps") cfg.rollout_steps = parse_int(key, v);
    else if (key == "episode_length") cfg.episode_length = parse_int(key, v);
    else if (key == "rl_batch") cfg.rl_batch = parse_int(key, v);
    else if (key == "il_batch") cfg.il_batch = parse_int(key, v);
    else if (key == "il_buffer") cfg.il_buffer = parse_int(key, v);
    else if (key == "ppo_epochs") cfg.ppo_epochs = parse_int(key, v);
    else if (key == "il_updates") cfg.il_updates = parse_int(key, v);
    else if (key == "use_rl") cfg.use_rl = parse_bool(key, v);
    else if (key == "use_il") cfg.use_il = parse_bool(key, v);
    else if (key == "normalize_advantages") cfg.normalize_advantages = parse_bool(key, v);
    else if (key == "grad_clip") cfg.grad_clip = parse_double(key, v);
    else if (key == "shuffle_order") cfg.shuffle_order = parse_bool(key, v);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_double(key, v));
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_int(key, v);
    else if (key == "mix_alpha") cfg.env.reward.mix_alpha = parse_double(key, v);
    else if (key == "reward_mode") {
      if (v == "global") cfg.env.reward.mode = RewardMode::Global;
      else if (v == "individual") cfg.env.reward.mode = RewardMode::Individual;
      else if (v == "partial") cfg.env.reward.mode = RewardMode::Partial;
      else throw Error(ErrorCode::BadConfig, "reward_mode: " + v);
    } else if (key == "scenario") {
      if (v == "two_stage") cfg.env.reward.scenario = Scenario::TwoStage;
      else if (v == "drop_only") cfg.env.reward.scenario = Scenario::DropOnly;
      else throw Error(ErrorCode::BadConfig, "scenario: " + v);
    } else if (key == "task") {
      if (v == "lifelong") cfg.env.task = TaskMode::Lifelong;
      else if (v == "one_shot") cfg.env.task = TaskMode::OneShot;
      else throw Error(ErrorCode::BadConfig, "task: " + v);
    } else if (key == "policy.fov") policy.fov = parse_int(key, v);
    else if (key == "policy.conv1") policy.conv1 = parse_int(key, v);
    else if (key == "policy.conv2") policy.conv2 = parse_int(key, v);
    else if (key == "policy.d") policy.d = parse_int(key, v);
    else if (key == "policy.heads") policy.heads = parse_int(key, v);
    else if (key == "policy.enc_layers") policy.enc_layers = parse_int(key, v);
    else if (key == "policy.dec_layers") policy.dec_layers = parse_int(key, v);
    else throw Error(ErrorCode::BadConfig, "unknown key '" + key + "'");
  }
  cfg.validate();
  policy.validate();
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"gamma", cfg.gamma},
          {"gae_lambda", cfg.gae_lambda},
          {"clip_eps", cfg.clip_eps},
          {"lr", cfg.lr},
          {"bc_weight", cfg.bc_weight},
          {"target_update", cfg.target_update},
          {"envs", cfg.n_envs},
          {"rollout_steps", cfg.rollout_steps},
          {"episode_length", cfg.episode_length},
          {"rl_batch", cfg.rl_batch},
          {"il_batch", cfg.il_batch},
          {"il_buffer", cfg.il_buffer},
          {"ppo_epochs", cfg.ppo_epochs},
          {"il_updates", cfg.il_updates},
          {"use_rl", cfg.use_rl},
          {"use_il", cfg.use_il},
          {"normalize_advantages", cfg.normalize_advantages},
          {"grad_clip", cfg.grad_clip},
          {"shuffle_order", cfg.shuffle_order},
          {"seed", cfg.seed},
          {"reward_mode", name_of(cfg.env.reward.mode)},
          {"mix_alpha", cfg.env.reward.mix_alpha},
          {"scenario", cfg.env.reward.scenario == Scenario::TwoStage ? "two_stage" : "drop_only"},
          {"task", cfg.env.task == TaskMode::Lifelong ? "lifelong" : "one_shot"}};
}

// ---------------------------------------------------------------------------
// Losses

std::vector<double> compute_gae(std::span<const double> rewards, std::span<const double> values,
                                std::span<const char> dones, double bootstrap, double gamma,
                                double lambda) {
  const size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, "rewards, values and dones must have equal length");
  }
  std::vector<double> adv(n, 0.0);
  double running = 0.0;
  for (size_t k = n; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double next_value = k + 1 < n ? values[k + 1] : bootstrap;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    running = delta + gamma * lambda * live * running;
    adv[k] = running;
  }
  return adv;
}

Var encoder_loss(Var values, std::span<const double> rewards, std::span<const double> next_values,
                 std::span<const char> done, double gamma) {
  const ad::Shape& s = values.shape();
  if (s.size() != 2) throw Error(ErrorCode::ShapeMismatch, "values must be [G, n]");
  const Index g = s[0], n = s[1];
  if (static_cast<Index>(rewards.size()) != g * n || static_cast<Index>(next_values.size()) != g * n ||
      static_cast<Index>(done.size()) != g) {
    throw Error(ErrorCode::ShapeMismatch, "encoder loss inputs disagree with values");
  }
  Array target({g * n});
  for (Index gi = 0; gi < g; ++gi) {
    for (Index i = 0; i < n; ++i) {
      const Index k = gi * n + i;
      target.data[k] = rewards[k] + (done[gi] ? 0.0 : gamma * next_values[k]);
    }
  }
  ad::Tape& tape = values.tape();
  Var diff = ad::sub(tape.constant(std::move(target)), ad::reshape(values, {g * n}));
  return ad::mean(ad::mul(diff, diff));
}

Var decoder_loss(Var logprob, std::span<const double> old_logprob, std::span<const double> advantages,
                 double clip_eps) {
  const Index n = logprob.value().size();
  if (static_cast<Index>(old_logprob.size()) != n || static_cast<Index>(advantages.size()) != n) {
    throw Error(ErrorCode::ShapeMismatch, "decoder loss inputs disagree with log-probabilities");
  }
  ad::Tape& tape = logprob.tape();
  Array old({n}), adv({n});
  for (Index i = 0; i < n; ++i) {
    old.data[i] = old_logprob[i];
    adv.data[i] = advantages[i];
  }
  Var a = tape.constant(std::move(adv));
  Var ratio = ad::exp(ad::sub(ad::reshape(logprob, {n}), tape.constant(std::move(old))));
  Var unclipped = ad::mul(ratio, a);
  Var clipped = ad::mul(ad::clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), a);
  return ad::scale(ad::mean(ad::minimum(unclipped, clipped)), -1.0);
}

Var bc_loss(Var logits, std::span<const int> expert_actions) {
  return ad::scale(ad::mean(ad::pick(ad::log_softmax(logits), expert_actions)), -1.0);
}

// ---------------------------------------------------------------------------

void Adam::step(ParamSet& params, const std::vector<Array>& grads) {
  if (grads.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "one gradient per parameter");
  if (m_.empty()) {
    for (size_t i = 0; i < params.size(); ++i) {
      m_.push_back(Eigen::VectorXd::Zero(params[i].size()));
      v_.push_back(Eigen::VectorXd::Zero(params[i].size()));
    }
  }
  ++t_;
  if (lr_ == 0.0) return;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    const Eigen::VectorXd& g = grads[i].data;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseAbs2();
    params[i].data.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

// ---------------------------------------------------------------------------
// Learner

namespace {

struct GroupInput {
  const std::vector<ObservationTensor>* obs;
  const HiddenState* hidden;
};

// Extractor + encoder over G joint states with n agents each.
Encoded forward(const BoundParams& p, const PolicyConfig& cfg, std::span<const GroupInput> groups) {
  ad::Tape& tape = p.tape();
  const Index g = static_cast<Index>(groups.size());
  const Index n = static_cast<Index>(groups[0].obs->size());
  const Index d = cfg.d;
  std::vector<ObservationTensor> all;
  all.reserve(g * n);
  Array h({g * n, d}), c({g * n, d});
  for (Index gi = 0; gi < g; ++gi) {
    const GroupInput& in = groups[gi];
    if (static_cast<Index>(in.obs->size()) != n) throw Error(ErrorCode::ShapeMismatch, "ragged agent counts");
    all.insert(all.end(), in.obs->begin(), in.obs->end());
    h.data.segment(gi * n * d, n * d) = in.hidden->h.data;
    c.data.segment(gi * n * d, n * d) = in.hidden->c.data;
  }
  Features f = extract_features(p, cfg, tape.constant(stack_observations(all)),
                                tape.constant(std::move(h)), tape.constant(std::move(c)));
  return encode(p, cfg, ad::reshape(f.z, {g, n, d}));
}

std::vector<int> flat_orders(std::span<const std::vector<int>* const> orders, int n) {
  std::vector<int> out;
  for (const auto* o : orders) {
    if (o->empty()) {
      for (int i = 0; i < n; ++i) out.push_back(i);
    } else {
      out.insert(out.end(), o->begin(), o->end());
    }
  }
  return out;
}

}  // namespace

Learner::Learner(PolicyConfig policy, TrainConfig cfg, ParamSet params)
    : policy_(policy), cfg_(std::move(cfg)), params_(std::move(params)), target_(params_), adam_(cfg_.lr) {
  policy_.validate();
  cfg_.validate();
}

void Learner::sync_target() { target_ = params_; }

double Learner::apply(ad::Tape& tape, Var loss, const BoundParams& bound) {
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw Error(ErrorCode::Divergence, "non-finite loss");
  tape.backward(loss);
  std::vector<Array> grads;
  grads.reserve(bound.size());
  double sq = 0.0;
  for (size_t i = 0; i < bound.size(); ++i) {
    grads.push_back(tape.grad(bound.at(i)));
    sq += grads.back().data.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error(ErrorCode::Divergence, "non-finite gradient");
  if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) {
    for (Array& g : grads) g.data *= cfg_.grad_clip / norm;
  }
  adam_.step(params_, grads);
  ++updates_;
  if (updates_ % cfg_.target_update == 0) sync_target();
  return norm;
}

std::vector<double> Learner::target_next_values(const TrajectoryBatch& batch) const {
  const int n = batch.n_agents;
  std::vector<double> out(batch.records.size() * n, 0.0);
  std::vector<GroupInput> inputs;
  std::vector<size_t> slots;
  for (int e = 0; e < batch.n_envs; ++e) {
    for (int t = 0; t < batch.steps; ++t) {
      const StepRecord& r = batch.at(e, t);
      if (r.done) continue;
      if (t + 1 < batch.steps) {
        inputs.push_back({&batch.at(e, t + 1).obs, &batch.at(e, t + 1).hidden});
      } else if (batch.tails[e].valid) {
        inputs.push_back({&batch.tails[e].obs, &batch.tails[e].hidden});
      } else {
        continue;
      }
      slots.push_back(static_cast<size_t>(e * batch.steps + t));
    }
  }
  const size_t chunk = std::max<size_t>(1, cfg_.rl_batch / n);
  for (size_t b = 0; b < inputs.size(); b += chunk) {
    const size_t e = std::min(inputs.size(), b + chunk);
    ad::Tape tape;
    tape.set_grad_enabled(false);
    BoundParams p(tape, target_, false);
    Encoded enc = forward(p, policy_, std::span<const GroupInput>(inputs.data() + b, e - b));
    const Eigen::VectorXd& v = enc.values.value().data;
    for (size_t k = b; k < e; ++k) {
      for (int i = 0; i < n; ++i) out[slots[k] * n + i] = v[(k - b) * n + i];
    }
  }
  return out;
}

UpdateStats Learner::rl_update(const TrajectoryBatch& batch, std::mt19937_64& rng) {
  const int n = batch.n_agents;
  const size_t total = batch.records.size();
  UpdateStats stats;
  if (total == 0 || cfg_.ppo_epochs == 0) return stats;

  // Joint advantages from the behaviour-time values.
  std::vector<double> adv(total, 0.0);
  for (int e = 0; e < batch.n_envs; ++e) {
    std::vector<double> rew(batch.steps), val(batch.steps);
    std::vector<char> done(batch.steps);
    for (int t = 0; t < batch.steps; ++t) {
      const StepRecord& r = batch.at(e, t);
      rew[t] = std::accumulate(r.rewards.begin(), r.rewards.end(), 0.0) / n;
      val[t] = std::accumulate(r.values.begin(), r.values.end(), 0.0) / n;
      done[t] = r.done;
    }
    double bootstrap = 0.0;
    if (batch.tails[e].valid) {
      ad::Tape tape;
      tape.set_grad_enabled(false);
      BoundParams p(tape, params_, false);
      const GroupInput in{&batch.tails[e].obs, &batch.tails[e].hidden};
      bootstrap = forward(p, policy_, std::span<const GroupInput>(&in, 1)).values.value().data.mean();
    }
    const auto a = compute_gae(rew, val, done, bootstrap, cfg_.gamma, cfg_.gae_lambda);
    std::copy(a.begin(), a.end(), adv.begin() + static_cast<long>(e) * batch.steps);
  }
  if (cfg_.normalize_advantages && total > 1) {
    const double mu = std::accumulate(adv.begin(), adv.end(), 0.0) / total;
    double var = 0.0;
    for (double a : adv) var += (a - mu) * (a - mu);
    const double sd = std::sqrt(var / (total - 1));
    if (sd > 1e-8) {
      for (double& a : adv) a = (a - mu) / sd;
    }
  }

  std::vector<double> next_values = target_next_values(batch);
  long long synced_at = updates_ / cfg_.target_update;

  std::vector<size_t> idx(total);
  std::iota(idx.begin(), idx.end(), size_t{0});
  const size_t per_batch = std::max<size_t>(1, cfg_.rl_batch / n);
  int count = 0;
  for (int epoch = 0; epoch < cfg_.ppo_epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (size_t b = 0; b < total; b += per_batch) {
      const size_t e = std::min(total, b + per_batch);
      std::vector<GroupInput> inputs;
      std::vector<const std::vector<int>*> orders;
      std::vector<int> actions;
      std::vector<double> old_lp, a_rep, rewards, nexts;
      std::vector<char> done;
      for (size_t k = b; k < e; ++k) {
        const StepRecord& r = batch.records[idx[k]];
        inputs.push_back({&r.obs, &r.hidden});
        orders.push_back(&r.order);
        actions.insert(actions.end(), r.actions.begin(), r.actions.end());
        old_lp.insert(old_lp.end(), r.logprob.begin(), r.logprob.end());
        rewards.insert(rewards.end(), r.rewards.begin(), r.rewards.end());
        for (int i = 0; i < n; ++i) {
          a_rep.push_back(adv[idx[k]]);
          nexts.push_back(next_values[idx[k] * n + i]);
        }
        done.push_back(r.done);
      }
      ad::Tape tape;
      BoundParams p(tape, params_, true);
      Encoded enc = forward(p, policy_, inputs);
      Var logits = decode_logits(p, policy_, enc.ohat, actions, flat_orders(orders, n));
      Var lp = ad::pick(ad::log_softmax(logits), actions);
      Var l_enc = encoder_loss(enc.values, rewards, nexts, done, cfg_.gamma);
      Var l_dec = decoder_loss(lp, old_lp, a_rep, cfg_.clip_eps);
      stats.loss_encoder += l_enc.value().item();
      stats.loss_decoder += l_dec.value().item();
      stats.grad_norm += apply(tape, ad::add(l_enc, l_dec), p);
      ++count;
      if (updates_ / cfg_.target_update != synced_at) {
        synced_at = updates_ / cfg_.target_update;
        next_values = target_next_values(batch);
      }
    }
  }
  stats.loss_encoder /= count;
  stats.loss_decoder /= count;
  stats.grad_norm /= count;
  return stats;
}

UpdateStats Learner::bc_update(std::span<const ExpertSample* const> samples) {
  UpdateStats stats;
  if (samples.empty()) return stats;
  const int n = static_cast<int>(samples[0]->obs.size());
  std::vector<GroupInput> inputs;
  std::vector<const std::vector<int>*> orders;
  std::vector<int> actions;
  for (const ExpertSample* s : samples) {
    inputs.push_back({&s->obs, &s->hidden});
    orders.push_back(&s->order);
    actions.insert(actions.end(), s->actions.begin(), s->actions.end());
  }
  ad::Tape tape;
  BoundParams p(tape, params_, true);
  Encoded enc = forward(p, policy_, inputs);
  Var logits = decode_logits(p, policy_, enc.ohat, actions, flat_orders(orders, n));
  Var loss = bc_loss(logits, actions);
  stats.loss_bc = loss.value().item();
  int hits = 0;
  const auto lm = logits.value().matrix();
  for (Index r = 0; r < lm.rows(); ++r) {
    Index best = 0;
    lm.row(r).maxCoeff(&best);
    hits += best == actions[r];
  }
  stats.agreement = static_cast<double>(hits) / actions.size();
  stats.grad_norm = apply(tape, ad::scale(loss, cfg_.bc_weight), p);
  return stats;
}

double Learner::agreement(std::span<const ExpertSample* const> samples) const {
  if (samples.empty()) return 0.0;
  const int n = static_cast<int>(samples[0]->obs.size());
  int hits = 0, total = 0;
  const size_t chunk = std::max<size_t>(1, cfg_.il_batch / n);
  for (size_t b = 0; b < samples.size(); b += chunk) {
    const size_t e = std::min(samples.size(), b + chunk);
    std::vector<GroupInput> inputs;
    std::vector<const std::vector<int>*> orders;
    std::vector<int> actions;
    for (size_t k = b; k < e; ++k) {
      inputs.push_back({&samples[k]->obs, &samples[k]->hidden});
      orders.push_back(&samples[k]->order);
      actions.insert(actions.end(), samples[k]->actions.begin(), samples[k]->actions.end());
    }
    ad::Tape tape;
    tape.set_grad_enabled(false);
    BoundParams p(tape, params_, false);
    Encoded enc = forward(p, policy_, inputs);
    const auto lm = decode_logits(p, policy_, enc.ohat, actions, flat_orders(orders, n)).value().matrix();
    for (Index r = 0; r < lm.rows(); ++r) {
      Index best = 0;
      lm.row(r).maxCoeff(&best);
      hits += best == actions[r];
      ++total;
    }
  }
  return static_cast<double>(hits) / total;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

struct EnvSlot {
  SimState state;
  HiddenState hidden;
  std::vector<int> order;
  int episode_steps = 0;
};

void start_episode(EnvSlot& slot, const TrainSetup& setup, const TrainConfig& cfg, const PolicyConfig& policy,
                   std::mt19937_64& rng) {
  const std::uint64_t seed = rng();
  slot.state = reset(setup.map, setup.n_agents, setup.orders, seed, cfg.env);
  slot.hidden = HiddenState::zeros(setup.n_agents, policy.d);
  slot.order = identity_order(setup.n_agents);
  if (cfg.shuffle_order) std::shuffle(slot.order.begin(), slot.order.end(), rng);
  slot.episode_steps = 0;
}

void write_checkpoint(const std::string& dir, const std::string& file, const ParamSet& params,
                      const PolicyConfig& policy, const TrainConfig& cfg, int iteration) {
  std::filesystem::create_directories(dir);
  save_checkpoint((std::filesystem::path(dir) / file).string(), params,
                  {{"policy", to_json(policy)}, {"train", to_json(cfg)}, {"iteration", iteration}});
}

}  // namespace

TrainResult train(const TrainSetup& setup, const TrainConfig& cfg, const PolicyConfig& policy,
                  int iterations, const IterationHook& hook, const ParamSet* init) {
  cfg.validate();
  policy.validate();
  if (!setup.map) throw Error(ErrorCode::BadConfig, "training needs a map");
  const CorridorIndex corridors = find_corridors(*setup.map);
  Learner learner(policy, cfg, init ? *init : init_params(policy, cfg.seed));
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);

  std::ofstream metrics_file;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics_file.open(std::filesystem::path(cfg.out_dir) / "metrics.jsonl", std::ios::trunc);
    if (!metrics_file) throw Error(ErrorCode::Io, "cannot write metrics in " + cfg.out_dir);
  }

  std::vector<EnvSlot> envs(cfg.n_envs);
  for (auto& slot : envs) start_episode(slot, setup, cfg, policy, rng);
  std::deque<ExpertSample> il_buffer;
  TrainResult result;
  const int n = setup.n_agents;

  try {
    for (int it = 0; it < iterations; ++it) {
      const auto t0 = std::chrono::steady_clock::now();
      TrajectoryBatch batch;
      batch.n_envs = cfg.n_envs;
      batch.steps = cfg.rollout_steps;
      batch.n_agents = n;
      batch.records.reserve(static_cast<size_t>(cfg.n_envs) * cfg.rollout_steps);
      batch.tails.resize(cfg.n_envs);
      long long goals = 0, collisions = 0;
      double reward_sum = 0.0;

      for (int e = 0; e < cfg.n_envs; ++e) {
        EnvSlot& slot = envs[e];
        for (int t = 0; t < cfg.rollout_steps; ++t) {
          const PathSet paths = predicted_paths(slot.state);
          StepRecord rec;
          rec.obs = build_observations(slot.state, policy.fov, paths, corridors);
          rec.hidden = slot.hidden;
          rec.order = slot.order;
          JointSample s = sample_joint(learner.params(), policy, rec.obs, slot.hidden, DecodeMode::Sample, rng,
                                       slot.order);
          if (cfg.use_il) {
            il_buffer.push_back({rec.obs, rec.hidden, expert_actions(slot.state), slot.order});
            if (static_cast<int>(il_buffer.size()) > cfg.il_buffer) il_buffer.pop_front();
          }
          const StepOutcome out = step_in_place(slot.state, s.actions);
          rec.actions = s.actions;
          rec.logprob = s.logprob;
          rec.values = s.values;
          rec.rewards = out.rewards;
          goals += out.done_goals;
          collisions += out.collisions;
          for (double r : out.rewards) reward_sum += r;
          slot.hidden = std::move(s.hidden);
          rec.done = ++slot.episode_steps >= cfg.episode_length;
          const bool done = rec.done;
          batch.records.push_back(std::move(rec));
          if (done) start_episode(slot, setup, cfg, policy, rng);
        }
        if (!batch.records.back().done) {
          RolloutTail& tail = batch.tails[e];
          tail.valid = true;
          tail.obs = build_observations(slot.state, policy.fov, predicted_paths(slot.state), corridors);
          tail.hidden = slot.hidden;
        }
      }

      UpdateStats rl;
      if (cfg.use_rl) rl = learner.rl_update(batch, rng);

      UpdateStats il;
      int il_steps = 0;
      if (cfg.use_il && !il_buffer.empty()) {
        const size_t per_batch = std::max<size_t>(1, cfg.il_batch / n);
        std::uniform_int_distribution<size_t> pick(0, il_buffer.size() - 1);
        for (int u = 0; u < cfg.il_updates; ++u) {
          std::vector<const ExpertSample*> mb;
          for (size_t k = 0; k < std::min(per_batch, il_buffer.size()); ++k) mb.push_back(&il_buffer[pick(rng)]);
          UpdateStats s = learner.bc_update(mb);
          il.loss_bc += s.loss_bc;
          il.agreement += s.agreement;
          ++il_steps;
        }
        if (il_steps) {
          il.loss_bc /= il_steps;
          il.agreement /= il_steps;
        }
      }

      const double steps = static_cast<double>(cfg.n_envs) * cfg.rollout_steps;
      nlohmann::json m = {
          {"iteration", it},
          {"updates", learner.updates()},
          {"throughput", goals / steps},
          {"collision_rate", collisions / (steps * n)},
          {"mean_reward", reward_sum / (steps * n)},
          {"loss_encoder", rl.loss_encoder},
          {"loss_decoder", rl.loss_decoder},
          {"loss_bc", il.loss_bc},
          {"bc_agreement", il.agreement},
          {"il_buffer", il_buffer.size()},
          {"wall_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
      };
      if (hook) hook(it, learner.params(), m);
      if (metrics_file) metrics_file << m.dump() << '\n' << std::flush;
      result.metrics.push_back(std::move(m));
      if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) {
        write_checkpoint(cfg.out_dir, "iter_" + std::to_string(it + 1) + ".ckpt", learner.params(), policy, cfg,
                         it + 1);
      }
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Divergence && !cfg.out_dir.empty()) {
      write_checkpoint(cfg.out_dir, "diverged.ckpt", learner.params(), policy, cfg, -1);
    }
    throw;
  }
  if (!cfg.out_dir.empty()) write_checkpoint(cfg.out_dir, "final.ckpt", learner.params(), policy, cfg, iterations);
  result.params = learner.params();
  return result;
}

}  // namespace seqpath
