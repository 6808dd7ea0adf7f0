// Acceptance run: one PASS/FAIL line per criterion. Tolerances are fixed
// below. Exit status is 0 unless --strict is given and a criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "fixtures.hpp"
#include "seqpath/evaluate.hpp"
#include "seqpath/order_invariance.hpp"
#include "seqpath/trainer.hpp"

using namespace seqpath;
namespace ad = seqpath::ad;

namespace {

constexpr double kTableTol = 0.07;
constexpr double kInvarianceTol = 1e-12;
constexpr double kEquivarianceTol = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr double kLossTol = 1e-9;
constexpr double kSocBound = 1.25;
constexpr double kThroughputFactor = 2.0;
constexpr double kTrainBudgetSeconds = 30 * 60;
constexpr double kAgreementTarget = 0.95;
constexpr int kBcIterations = 200;
constexpr double kScalingBound = 2.5;
constexpr double kMapRatioBound = 1.5;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Verdict pfci_table() {
  struct Row {
    const char* map;
    double rho_e, rho_t, v_e;
  };
  const Row rows[] = {{"random", .0209, .7969, .0611},          {"mazes", .0200, .7034, .0737},
                      {"warehouse_wfi", .0054, .8419, .2190},   {"movingai", .0026, .7270, .5440},
                      {"puzzles", .2827, .6325, .0059},         {"warehouse_small", .0038, .3346, .7777},
                      {"warehouse_large", .0030, .2060, 1.6402}, {"warehouse_huge", .0020, .2233, 2.2189},
                      {"warehouse_huge2", .0018, .2478, 2.2567}, {"warehouse_huge3", .0015, .2920, 2.2610}};
  double worst = 0.0;
  const char* worst_map = "";
  for (const Row& r : rows) {
    const double v = effective_edge_sparsity(kDefaultPfciAlpha, r.rho_e, r.rho_t);
    const double dev = std::abs(v - r.v_e) / r.v_e;
    if (dev > worst) {
      worst = dev;
      worst_map = r.map;
    }
  }
  return {worst < kTableTol, fmt("10 rows, max relative deviation %.4f (%s), tolerance %.2f", worst, worst_map,
                                 kTableTol)};
}

Verdict pfci_oracle() {
  std::mt19937_64 rng(2024);
  int maps = 0, mismatches = 0;
  while (maps < 50) {
    const GridMap m = oracle::random_map(rng, 20, 0.1 + 0.05 * (maps % 8));
    const long long v = oracle::count_free(m);
    if (v < 2) continue;
    ++maps;
    const MapMetrics got = compute_pfci(m);
    const long long e = oracle::count_edges(m);
    const double rho_t = static_cast<double>(v) / (m.height() * m.width());
    const double rho_e = 2.0 * e / (static_cast<double>(v) * (v - 1.0));
    std::set<std::set<std::pair<int, int>>> mine;
    for (const Corridor& c : find_corridors(m).corridors) {
      std::set<std::pair<int, int>> s;
      for (Cell x : c.cells) s.insert({x.row, x.col});
      mine.insert(s);
    }
    const bool ok = got.node_count == v && got.edge_count == e && got.rho_e == rho_e &&
                    std::abs(got.rho_t - rho_t) <= 1e-15 && mine == oracle::corridor_sets(m) &&
                    got.l_corr == oracle::mean_corridor_length(m);
    mismatches += !ok;
  }
  return {mismatches == 0, fmt("%d random maps up to 20x20, %d mismatches against brute force", maps, mismatches)};
}

Verdict order_invariance() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  long long pairs = 0;
  for (int k = 0; k < 100; ++k) {
    const int n = 2 + k % 2;
    TabularJoint j;
    j.n = n;
    j.p.resize(n == 2 ? 25 : 125);
    double total = 0.0;
    for (double& x : j.p) total += x = (u(rng) < 0.2 ? 0.0 : u(rng));
    for (double& x : j.p) x /= total;
    std::vector<std::vector<int>> perms;
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    do perms.push_back(p);
    while (std::next_permutation(p.begin(), p.end()));
    for (const auto& a : perms) {
      for (const auto& b : perms) {
        worst = std::max(worst, verify_order_invariance(j, a, b));
        ++pairs;
      }
    }
  }
  return {worst < kInvarianceTol,
          fmt("100 joints, %lld order pairs, max deviation %.2e, tolerance %.0e", pairs, worst, kInvarianceTol)};
}

// ---------------------------------------------------------------------------

PolicyConfig small_policy() {
  PolicyConfig c;
  c.fov = 5;
  c.conv1 = 3;
  c.conv2 = 4;
  c.d = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 2;
  return c;
}

std::vector<ObservationTensor> observations(int n, int fov, std::uint64_t seed) {
  auto m = fixture::open_map(8, 8);
  const SimState s = reset(m, n, generate_orders(*m, 2 * n, seed), seed);
  return build_observations(s, fov, predicted_paths(s), find_corridors(*m));
}

Verdict architecture() {
  int equiv_fail = 0, causal_fail = 0, below = 0, moved = 0;
  double equiv_worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    PolicyConfig c = small_policy();
    c.enc_layers = 1 + k % 2;
    const ParamSet p = init_params(c, 100 + k);
    std::mt19937_64 rng(200 + k);
    std::normal_distribution<double> g;
    const int n = 2 + k % 5;
    ad::Array z({1, n, c.d});
    for (ad::Index i = 0; i < z.size(); ++i) z.data[i] = g(rng);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ad::Array zp = z;
    for (int i = 0; i < n; ++i) zp.data.segment(i * c.d, c.d) = z.data.segment(perm[i] * c.d, c.d);
    ad::Tape tape;
    BoundParams bp(tape, p, false);
    const Encoded a = encode(bp, c, tape.constant(z));
    const Encoded b = encode(bp, c, tape.constant(zp));
    double dev = 0.0;
    for (int i = 0; i < n; ++i) {
      dev = std::max(dev, std::abs(b.values.value().data[i] - a.values.value().data[perm[i]]));
      dev = std::max(dev, (b.ohat.value().data.segment(i * c.d, c.d) - a.ohat.value().data.segment(perm[i] * c.d, c.d))
                              .cwiseAbs()
                              .maxCoeff());
    }
    equiv_worst = std::max(equiv_worst, dev);
    equiv_fail += dev > kEquivarianceTol;

    // Dependency probe: changing the action decided at position j must leave
    // the logits of positions <= j bit-identical. Later positions normally
    // move; a head with every unit clamped by its ReLU can stay constant.
    std::vector<int> order = perm;
    std::vector<int> actions(n);
    for (int& x : actions) x = static_cast<int>(rng() % kNumActions);
    const ad::Array base = decode_logits(bp, c, a.ohat, actions, order).value();
    for (int j = 0; j < n; ++j) {
      std::vector<int> alt = actions;
      alt[order[j]] = (alt[order[j]] + 1 + static_cast<int>(rng() % 4)) % kNumActions;
      const ad::Array y = decode_logits(bp, c, a.ohat, alt, order).value();
      for (int k2 = 0; k2 < n; ++k2) {
        const int agent = order[k2];
        const bool same = y.data.segment(agent * kNumActions, kNumActions) ==
                          base.data.segment(agent * kNumActions, kNumActions);
        if (k2 <= j) {
          causal_fail += !same;
        } else {
          ++below;
          moved += !same;
        }
      }
    }
  }
  // The self-attention mask over decoder tokens: token r sees tokens j <= r,
  // and token r carries the action of position r - 1, so logits of position
  // r depend on actions strictly before r.
  bool mask_ok = true;
  const ad::RowMatrix mask = ad::causal_mask(6);
  for (int r = 0; r < 6; ++r)
    for (int j = 0; j < 6; ++j) mask_ok = mask_ok && mask(r, j) == (j <= r ? 1.0 : 0.0);
  const bool pass = equiv_fail == 0 && causal_fail == 0 && mask_ok;
  return {pass, fmt("equivariance max deviation %.1e over 20 cases; %d causality violations over 20 cases "
                    "(%d of %d earlier-decision perturbations moved later logits); token mask lower-triangular: %s",
                    equiv_worst, causal_fail, moved, below, mask_ok ? "yes" : "no")};
}

ad::Array random_array(ad::Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Array a(std::move(s));
  for (ad::Index i = 0; i < a.size(); ++i) a.data[i] = u(rng);
  return a;
}

ad::Var project(ad::Var y, std::uint64_t seed = 99) {
  return ad::sum(ad::mul(y, y.tape().constant(random_array(y.shape(), seed))));
}

// Central differences over a strided subset of every parameter whose name
// starts with `prefix`.
double param_grad_check(const ParamSet& p, const std::string& prefix,
                        const std::function<ad::Var(const BoundParams&)>& loss) {
  ad::Tape tape;
  BoundParams bp(tape, p, true);
  tape.backward(loss(bp));
  auto value = [&](const ParamSet& q) {
    ad::Tape t;
    BoundParams b(t, q, false);
    return loss(b).value().item();
  };
  double worst = 0.0;
  const double eps = 1e-5;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p.name(i).rfind(prefix, 0) != 0) continue;
    const ad::Array g = tape.grad(bp.at(i));
    const ad::Index stride = std::max<ad::Index>(1, p[i].size() / 4);
    for (ad::Index k = 0; k < p[i].size(); k += stride) {
      ParamSet plus = p, minus = p;
      plus[i].data[k] += eps;
      minus[i].data[k] -= eps;
      const double fd = (value(plus) - value(minus)) / (2 * eps);
      worst = std::max(worst, std::abs(g.data[k] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

Verdict gradients() {
  using ad::grad_check;
  std::vector<std::pair<std::string, double>> results;
  auto add = [&](const char* name, double e) { results.emplace_back(name, e); };
  const std::vector<ad::Array> two = {random_array({3, 4}, 1), random_array({3, 4}, 2)};
  const std::vector<ad::Array> one = {random_array({2, 5}, 3, -2.0, 2.0)};
  const std::vector<ad::Array> pos = {random_array({2, 5}, 4, 0.2, 2.0)};
  add("add", grad_check([](ad::Tape&, auto x) { return project(ad::add(x[0], x[1])); }, two));
  add("sub", grad_check([](ad::Tape&, auto x) { return project(ad::sub(x[0], x[1])); }, two));
  add("mul", grad_check([](ad::Tape&, auto x) { return project(ad::mul(x[0], x[1])); }, two));
  add("minimum", grad_check([](ad::Tape&, auto x) { return project(ad::minimum(x[0], x[1])); }, two));
  add("scale", grad_check([](ad::Tape&, auto x) { return project(ad::scale(x[0], 1.7)); }, one));
  add("add_scalar", grad_check([](ad::Tape&, auto x) { return project(ad::add_scalar(x[0], 0.3)); }, one));
  add("clip", grad_check([](ad::Tape&, auto x) { return project(ad::clip(x[0], -0.5, 0.5)); }, one));
  add("relu", grad_check([](ad::Tape&, auto x) { return project(ad::relu(x[0])); }, one));
  add("sigmoid", grad_check([](ad::Tape&, auto x) { return project(ad::sigmoid(x[0])); }, one));
  add("tanh", grad_check([](ad::Tape&, auto x) { return project(ad::tanh(x[0])); }, one));
  add("exp", grad_check([](ad::Tape&, auto x) { return project(ad::exp(x[0])); }, one));
  add("log", grad_check([](ad::Tape&, auto x) { return project(ad::log(x[0])); }, pos));
  add("sum", grad_check([](ad::Tape&, auto x) { return ad::sum(ad::mul(x[0], x[0])); }, one));
  add("mean", grad_check([](ad::Tape&, auto x) { return ad::mean(ad::mul(x[0], x[0])); }, one));
  add("softmax", grad_check([](ad::Tape&, auto x) { return project(ad::softmax(x[0])); }, one));
  add("log_softmax", grad_check([](ad::Tape&, auto x) { return project(ad::log_softmax(x[0])); }, one));
  add("reshape", grad_check([](ad::Tape&, auto x) { return project(ad::reshape(x[0], {5, 2})); }, one));
  add("slice", grad_check([](ad::Tape&, auto x) { return project(ad::slice(x[0], 1, 1, 4)); }, one));
  add("concat", grad_check([](ad::Tape&, auto x) { return project(ad::concat(x, 0)); }, two));
  const std::vector<int> ids = {1, 0, 1, 2};
  add("embedding", grad_check([&](ad::Tape&, auto x) { return project(ad::embedding(x[0], ids)); },
                              {random_array({3, 4}, 5)}));
  const std::vector<int> cols = {4, 1};
  add("pick", grad_check([&](ad::Tape&, auto x) { return project(ad::pick(x[0], cols)); }, one));
  add("add_bias", grad_check([](ad::Tape&, auto x) { return project(ad::add_bias(x[0], x[1])); },
                             {random_array({3, 4}, 6), random_array({4}, 7)}));
  add("matmul", grad_check([](ad::Tape&, auto x) { return project(ad::matmul(x[0], x[1])); },
                           {random_array({2, 3, 4}, 8), random_array({4, 5}, 9)}));
  add("layer_norm", grad_check([](ad::Tape&, auto x) { return project(ad::layer_norm(x[0], x[1], x[2])); },
                               {random_array({3, 6}, 10), random_array({6}, 11), random_array({6}, 12)}));
  add("conv2d", grad_check([](ad::Tape&, auto x) { return project(ad::conv2d(x[0], x[1], x[2])); },
                           {random_array({2, 2, 5, 5}, 13), random_array({3, 2, 3, 3}, 14), random_array({3}, 15)}));
  add("maxpool2d",
      grad_check([](ad::Tape&, auto x) { return project(ad::maxpool2d(x[0])); }, {random_array({1, 2, 4, 6}, 16)}));
  const std::vector<ad::Array> qkv = {random_array({2, 3, 4}, 17), random_array({2, 5, 4}, 18),
                                      random_array({2, 5, 4}, 19)};
  add("attention",
      grad_check([](ad::Tape&, auto x) { return project(ad::attention(x[0], x[1], x[2], 2, false)); }, qkv));
  const std::vector<ad::Array> qkv_sq = {random_array({2, 4, 4}, 20), random_array({2, 4, 4}, 21),
                                         random_array({2, 4, 4}, 22)};
  add("causal attention",
      grad_check([](ad::Tape&, auto x) { return project(ad::attention(x[0], x[1], x[2], 2, true)); }, qkv_sq));
  add("lstm_step", grad_check(
                       [](ad::Tape&, auto x) {
                         auto [h, c] = ad::lstm_step(x[0], x[1], x[2], {x[3], x[4], x[5]});
                         return ad::add(project(h, 1), project(c, 2));
                       },
                       {random_array({2, 3}, 23), random_array({2, 2}, 24), random_array({2, 2}, 25),
                        random_array({3, 8}, 26), random_array({2, 8}, 27), random_array({8}, 28)}));

  // Network modules, with respect to their own parameters.
  const PolicyConfig c = small_policy();
  ParamSet p = init_params(c, 31);
  p.at("dec.head.fc2.w").data *= 50.0;
  // Zero-initialised biases put ReLU inputs exactly on the kink wherever the
  // previous layer is all zero; jitter every parameter off it.
  for (size_t i = 0; i < p.size(); ++i) p[i].data += 0.05 * random_array(p[i].shape, 500 + i).data;
  const auto obs = observations(3, c.fov, 32);
  ad::Array h0 = random_array({3, c.d}, 33), c0 = random_array({3, c.d}, 34);
  const std::vector<int> actions = {3, 1, 0}, order = {1, 2, 0};
  // Structured observations also put exact ties into max pooling.
  ad::Array obs_in = stack_observations(obs);
  obs_in.data += 1e-3 * random_array(obs_in.shape, 35).data;
  auto feats = [&](const BoundParams& bp) {
    ad::Tape& t = bp.tape();
    return extract_features(bp, c, t.constant(obs_in), t.constant(h0), t.constant(c0));
  };
  add("extractor", param_grad_check(p, "ext.", [&](const BoundParams& bp) {
        Features f = feats(bp);
        return ad::add(project(f.z, 1), project(f.c, 2));
      }));
  add("encoder", param_grad_check(p, "enc.", [&](const BoundParams& bp) {
        Encoded e = encode(bp, c, ad::reshape(feats(bp).z, {1, 3, c.d}));
        return ad::add(project(e.ohat, 3), project(e.values, 4));
      }));
  add("decoder", param_grad_check(p, "dec.", [&](const BoundParams& bp) {
        Encoded e = encode(bp, c, ad::reshape(feats(bp).z, {1, 3, c.d}));
        return project(decode_logits(bp, c, e.ohat, actions, order), 5);
      }));

  // The three training losses.
  const std::vector<double> rewards = {0.5, -0.3, 1.0, 0.2}, next = {0.1, 0.4, -0.2, 0.3},
                            old = {-1.2, -0.7, -2.0, -1.5}, adv = {1.0, -0.5, 0.8, -1.3};
  const std::vector<char> done = {0, 1};
  const std::vector<int> expert = {0, 4, 2, 1};
  add("encoder loss", grad_check([&](ad::Tape&, auto x) { return encoder_loss(x[0], rewards, next, done, 0.95); },
                                 {random_array({2, 2}, 40)}));
  ad::Array lp = ad::Array({4});
  for (int i = 0; i < 4; ++i) lp.data[i] = old[i] + (i % 2 ? 0.05 : 0.6);
  add("decoder loss", grad_check([&](ad::Tape&, auto x) { return decoder_loss(x[0], old, adv, 0.2); }, {lp}));
  add("bc loss", grad_check([&](ad::Tape&, auto x) { return bc_loss(x[0], expert); }, {random_array({4, 5}, 41)}));

  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : results) {
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  }
  return {worst < kGradTol, fmt("%zu checks, max relative error %.2e (%s), tolerance %.0e", results.size(), worst,
                                worst_name.c_str(), kGradTol)};
}

Verdict loss_arithmetic() {
  ad::Tape tape;
  auto dec = [&](double r, double a) {
    const std::vector<double> old = {0.0}, adv = {a};
    return decoder_loss(tape.constant(ad::Array::scalar(std::log(r))), old, adv, 0.2).value().item();
  };
  auto bc = [&](std::vector<double> probs) {
    ad::Array logits({1, 5});
    for (int i = 0; i < 5; ++i) logits.data[i] = std::log(probs[i]);
    const std::vector<int> expert = {0};
    return bc_loss(tape.constant(logits), expert).value().item();
  };
  const double errs[] = {std::abs(dec(1.0, 2.0) + 2.0), std::abs(dec(2.0, 1.0) + 1.2), std::abs(dec(0.5, -1.0) - 0.8),
                         std::abs(bc({0.5, 0.125, 0.125, 0.125, 0.125}) - std::log(2.0)),
                         std::abs(bc({0.2, 0.2, 0.2, 0.2, 0.2}) - std::log(5.0))};
  const double worst = *std::max_element(std::begin(errs), std::end(errs));
  return {worst < kLossTol, fmt("clip cases -2, -1.2, +0.8 and bc ln 2, ln 5: max error %.1e, tolerance %.0e", worst,
                                kLossTol)};
}

// ---------------------------------------------------------------------------

Verdict simulator() {
  std::mt19937_64 rng(77);
  int episodes = 0;
  long long steps = 0, overlaps = 0, reward_mismatch = 0, mode_mismatch = 0;
  while (episodes < 1000) {
    auto m = std::make_shared<const GridMap>(oracle::random_map(rng, 12, 0.05 + 0.05 * (episodes % 6)));
    if (m->free_count() < 2) continue;
    ++episodes;
    const int n = std::uniform_int_distribution<int>(1, std::min(8, m->free_count()))(rng);
    EnvConfig cfg;
    cfg.reward.scenario = episodes % 2 ? Scenario::TwoStage : Scenario::DropOnly;
    cfg.reward.mode = static_cast<RewardMode>(episodes % 3);
    cfg.reward.mix_alpha = 0.3;
    cfg.task = episodes % 4 == 0 ? TaskMode::OneShot : TaskMode::Lifelong;
    SimState s = reset(m, n, generate_orders(*m, 2 * n, rng()), rng(), cfg);
    RandomPolicy policy(rng());
    for (int t = 0; t < 30; ++t) {
      const SimState before = s;
      const auto joint = policy.act(s);
      const StepOutcome out = step_in_place(s, joint);
      ++steps;
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        const AgentState& a = s.agents[i];
        const AgentState& b = before.agents[i];
        // Event labels rebuilt from positions alone.
        const Cell wanted = apply_action(b.pos, out.actions[i]);
        const Motion motion = out.actions[i] == 0 ? Motion::Stayed : a.pos == wanted ? Motion::Moved : Motion::Collided;
        Reach reach = Reach::None;
        if (b.work_state != WorkState::Idle && a.pos == b.goal) {
          reach = b.work_state == WorkState::Picking ? Reach::ReachedPickup : Reach::ReachedDrop;
        }
        const double expect = oracle::reward_from_events(motion, reach, cfg.reward);
        reward_mismatch += out.raw_rewards[i] != expect || motion != out.motion[i] || reach != out.reach[i];
        total += out.raw_rewards[i];
        overlaps += !m->is_free(a.pos) || manhattan(a.pos, b.pos) > 1;
        for (int j = i + 1; j < n; ++j) {
          overlaps += a.pos == s.agents[j].pos;
          overlaps += a.pos == before.agents[j].pos && s.agents[j].pos == b.pos && a.pos != b.pos;
        }
      }
      for (int i = 0; i < n; ++i) {
        double expect = out.raw_rewards[i];
        if (cfg.reward.mode == RewardMode::Global) expect = total;
        if (cfg.reward.mode == RewardMode::Partial) {
          expect = 0.3 * out.raw_rewards[i] + 0.7 * (total - out.raw_rewards[i]);
        }
        mode_mismatch += std::abs(out.rewards[i] - expect) > 1e-12;
      }
    }
  }
  const bool pass = overlaps == 0 && reward_mismatch == 0 && mode_mismatch == 0;
  return {pass, fmt("%d episodes, %lld steps: %lld overlaps, %lld event/reward mismatches, %lld reward-mode "
                    "mismatches",
                    episodes, steps, overlaps, reward_mismatch, mode_mismatch)};
}

Verdict expert() {
  std::mt19937_64 rng(88);
  long long collisions = 0;
  for (int k = 0; k < 1000; ++k) {
    SimState s = fixture::random_state(rng, 10, 8);
    for (int t = 0; t < 4; ++t) collisions += step_in_place(s, expert_actions(s)).collisions;
  }
  int singles = 0, length_mismatch = 0;
  while (singles < 200) {
    auto m = std::make_shared<const GridMap>(oracle::random_map(rng, 12, 0.25));
    const auto free = m->free_cells();
    if (free.size() < 2) continue;
    const Cell a = free[rng() % free.size()], g = free[rng() % free.size()];
    if (a == g || distance_map(*m, a)[m->index(g)] < 0) continue;
    ++singles;
    const auto run = fixture::run_expert(fixture::one_shot(m, {a}, {g}), 400);
    length_mismatch += run.soc != static_cast<int>(astar_single(*m, a, g).size());
  }
  auto open = fixture::open_map(4, 4);
  double worst = 0.0;
  long long instances = 0, optimal = 0, sweep_collisions = 0;
  for (int s1 = 0; s1 < 16; ++s1)
    for (int s2 = 0; s2 < 16; ++s2)
      for (int g1 = 0; g1 < 16; ++g1)
        for (int g2 = 0; g2 < 16; ++g2) {
          if (s1 == s2 || g1 == g2) continue;
          const Cell a{s1 / 4, s1 % 4}, b{s2 / 4, s2 % 4}, ga{g1 / 4, g1 % 4}, gb{g2 / 4, g2 % 4};
          const int opt = oracle::joint_soc(*open, a, ga, b, gb);
          const auto run = fixture::run_expert(fixture::one_shot(open, {a, b}, {ga, gb}), 64);
          ++instances;
          sweep_collisions += run.collisions;
          optimal += run.soc == opt;
          if (!run.all_arrived) {
            worst = 1e9;
          } else if (opt > 0) {
            worst = std::max(worst, static_cast<double>(run.soc) / opt);
          }
        }
  const bool pass = collisions == 0 && length_mismatch == 0 && sweep_collisions == 0 && worst <= kSocBound;
  return {pass, fmt("1000 fixtures: %lld collisions; %d single-agent runs: %d length mismatches; "
                    "%lld open 4x4 instances: worst SoC ratio %.3f (bound %.2f), %lld optimal, %lld collisions",
                    collisions, singles, length_mismatch, instances, worst, kSocBound, optimal, sweep_collisions)};
}

// ---------------------------------------------------------------------------

Verdict learning() {
  const auto t0 = std::chrono::steady_clock::now();
  auto m = fixture::open_map(8, 8, "open8");
  const auto orders = generate_orders(*m, 64, 1);
  EvalConfig ec;
  ec.n_agents = 2;
  ec.steps = 200;
  ec.seeds = {100, 101, 102, 103, 104};
  const double random_thr = evaluate(m, orders, RandomPolicy(0), ec).aggregate.at("throughput").mean;

  PolicyConfig pc;
  TrainConfig tc;
  tc.seed = 1;
  tc.lr = 1e-3;
  tc.rl_batch = 256;
  tc.il_batch = 128;
  const int iterations = 150, eval_every = 10;
  std::vector<double> evals;
  train({m, orders, 2}, tc, pc, iterations, [&](int it, const ParamSet& p, nlohmann::json&) {
    if ((it + 1) % eval_every) return;
    NetworkPolicy net(std::make_shared<const ParamSet>(p), pc, DecodeMode::Sample, 0);
    evals.push_back(evaluate(m, orders, net, ec).aggregate.at("throughput").mean);
  });
  const size_t window = std::min<size_t>(10, evals.size());
  const double learned = std::accumulate(evals.end() - window, evals.end(), 0.0) / window;
  const double rl_seconds = seconds_since(t0);

  // BC-only fit on a fixed single-agent corridor dataset.
  auto corridor = std::make_shared<const GridMap>(load_map(
      "############\n"
      "#..........#\n"
      "#.########.#\n"
      "#..........#\n"
      "############",
      "corridor"));
  SimState s = reset(corridor, 1, generate_orders(*corridor, 16, 3), 3);
  const CorridorIndex ci = find_corridors(*corridor);
  std::vector<ExpertSample> data;
  for (int t = 0; t < 96; ++t) {
    ExpertSample e;
    e.obs = build_observations(s, pc.fov, predicted_paths(s), ci);
    e.hidden = HiddenState::zeros(1, pc.d);
    e.actions = expert_actions(s);
    e.order = {0};
    step_in_place(s, e.actions);
    data.push_back(std::move(e));
  }
  std::vector<const ExpertSample*> ptrs;
  for (const auto& e : data) ptrs.push_back(&e);
  TrainConfig bc_cfg;
  bc_cfg.lr = 1e-3;
  bc_cfg.use_rl = false;
  bc_cfg.bc_weight = 1.0;
  Learner learner(pc, bc_cfg, init_params(pc, 5));
  int reached_at = -1;
  for (int it = 1; it <= kBcIterations; ++it) {
    learner.bc_update(ptrs);
    if (learner.agreement(ptrs) > kAgreementTarget) {
      reached_at = it;
      break;
    }
  }
  const double agreement = learner.agreement(ptrs);

  const bool rl_ok = learned >= kThroughputFactor * random_thr && rl_seconds <= kTrainBudgetSeconds;
  const bool bc_ok = reached_at > 0;
  return {rl_ok && bc_ok,
          fmt("RL+IL: random %.4f, learned %.4f (mean of last %zu evals, %.1fx, target %.1fx) in %.0f s; "
              "BC corridor: agreement %.3f at iteration %d (target > %.2f within %d)",
              random_thr, learned, window, random_thr > 0 ? learned / random_thr : 0.0, kThroughputFactor,
              rl_seconds, agreement, reached_at, kAgreementTarget, kBcIterations)};
}

// ---------------------------------------------------------------------------

std::shared_ptr<const GridMap> shelf_map(int side) {
  // Rows of 1-wide shelves separated by single aisles.
  std::vector<char> cells(side * side, 0);
  for (int r = 2; r < side - 2; r += 2)
    for (int c = 2; c < side - 2; ++c)
      if (c % 6 != 1) cells[r * side + c] = 1;
  return std::make_shared<const GridMap>(side, side, cells, "shelves");
}

// Median of several timing rounds of joint inference on fixed observations.
double inference_seconds(const std::shared_ptr<const GridMap>& m, int n, int rounds, int repeats) {
  const PolicyConfig pc;
  auto params = std::make_shared<const ParamSet>(init_params(pc, 9));
  const SimState s = reset(m, n, generate_orders(*m, 2 * n, 5), 5);
  const auto obs = build_observations(s, pc.fov, predicted_paths(s), find_corridors(*m));
  NetworkPolicy net(params, pc, DecodeMode::Sample, 1);
  (void)net.infer(obs);
  std::vector<double> times;
  for (int r = 0; r < rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int k = 0; k < repeats; ++k) (void)net.infer(obs);
    times.push_back(seconds_since(t0) / repeats);
  }
  std::nth_element(times.begin(), times.begin() + rounds / 2, times.end());
  return times[rounds / 2];
}

Verdict runtime_scaling() {
  auto open = fixture::open_map(24, 24, "open24");
  const int ns[] = {8, 16, 32, 64};
  double t[4];
  for (int i = 0; i < 4; ++i) t[i] = inference_seconds(open, ns[i], 5, 6);
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) worst = std::max(worst, t[i + 1] / t[i]);
  const double t_open = inference_seconds(open, 16, 5, 6);
  const double t_shelf = inference_seconds(shelf_map(24), 16, 5, 6);
  const double map_ratio = std::max(t_open, t_shelf) / std::min(t_open, t_shelf);

  // Full act() including observation building, reported for reference.
  const PolicyConfig pc;
  NetworkPolicy net(std::make_shared<const ParamSet>(init_params(pc, 9)), pc, DecodeMode::Sample, 1);
  const double act_open = measure_runtime(net, reset(open, 16, generate_orders(*open, 32, 5), 5), 6);
  const double act_shelf = measure_runtime(net, reset(shelf_map(24), 16, generate_orders(*shelf_map(24), 32, 5), 5), 6);

  const bool pass = worst <= kScalingBound && map_ratio < kMapRatioBound;
  return {pass, fmt("inference ms n=8/16/32/64: %.2f/%.2f/%.2f/%.2f, worst doubling ratio %.2f (bound %.1f); "
                    "open vs shelf map at n=16 ratio %.2f (bound %.1f); act() incl. observations %.2f vs %.2f ms",
                    1e3 * t[0], 1e3 * t[1], 1e3 * t[2], 1e3 * t[3], worst, kScalingBound, map_ratio, kMapRatioBound,
                    1e3 * act_open, 1e3 * act_shelf)};
}

}  // namespace

int main(int argc, char** argv) {
  bool strict = false;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--strict") == 0) {
      strict = true;
    } else {
      only.insert(std::atoi(argv[i]));
    }
  }
  const std::pair<const char*, Verdict (*)()> criteria[] = {
      {"pfci table consistency", pfci_table}, {"pfci oracle equivalence", pfci_oracle},
      {"order invariance", order_invariance}, {"architectural invariants", architecture},
      {"gradient suite", gradients},          {"loss arithmetic", loss_arithmetic},
      {"simulator soundness", simulator},     {"expert soundness and quality", expert},
      {"desk-scale learning signal", learning}, {"runtime scaling", runtime_scaling}};
  int failed = 0;
  for (int i = 0; i < 10; ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return strict && failed > 0 ? 1 : 0;
}
