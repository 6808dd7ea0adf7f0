#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "seqpath/trainer.hpp"

using namespace seqpath;
namespace ad = seqpath::ad;

namespace {

PolicyConfig tiny() {
  PolicyConfig c;
  c.fov = 5;
  c.conv1 = 2;
  c.conv2 = 3;
  c.d = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.n_envs = 2;
  t.rollout_steps = 6;
  t.episode_length = 10;
  t.rl_batch = 8;
  t.il_batch = 4;
  t.il_buffer = 16;
  t.ppo_epochs = 1;
  t.il_updates = 1;
  t.seed = 3;
  return t;
}

TrainSetup small_setup() {
  TrainSetup s;
  s.map = fixture::open_map(6, 6);
  s.orders = generate_orders(*s.map, 8, 5);
  s.n_agents = 2;
  return s;
}

std::vector<ExpertSample> expert_samples(const PolicyConfig& pc, int count, std::uint64_t seed) {
  auto m = fixture::open_map(6, 6);
  const CorridorIndex corr = find_corridors(*m);
  SimState s = reset(m, 2, generate_orders(*m, 6, seed), seed);
  std::vector<ExpertSample> out;
  for (int k = 0; k < count; ++k) {
    ExpertSample e;
    e.obs = build_observations(s, pc.fov, predicted_paths(s), corr);
    e.hidden = HiddenState::zeros(2, pc.d);
    e.actions = expert_actions(s);
    e.order = {k % 2, 1 - k % 2};
    step_in_place(s, e.actions);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<const ExpertSample*> pointers(const std::vector<ExpertSample>& xs) {
  std::vector<const ExpertSample*> p;
  for (const auto& x : xs) p.push_back(&x);
  return p;
}

ad::Array array_of(std::vector<double> v, ad::Shape shape) {
  return ad::Array(std::move(shape), Eigen::Map<Eigen::VectorXd>(v.data(), v.size()));
}

}  // namespace

TEST_CASE("GAE matches the direct-sum oracle") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int k = 0; k < 20; ++k) {
    const int n = 1 + k;
    std::vector<double> r(n), v(n);
    std::vector<char> d(n, 0);
    for (int t = 0; t < n; ++t) {
      r[t] = g(rng);
      v[t] = g(rng);
      d[t] = (rng() % 5) == 0;
    }
    const double boot = g(rng);
    const auto a = compute_gae(r, v, d, boot, 0.99, 0.95);
    const auto b = oracle::gae_direct(r, v, d, boot, 0.99, 0.95);
    for (int t = 0; t < n; ++t) CHECK(std::abs(a[t] - b[t]) < 1e-12);
  }
}

TEST_CASE("GAE special cases") {
  const std::vector<double> r = {1.0, -0.5, 2.0}, v = {0.3, 0.1, -0.4};
  const std::vector<char> d = {0, 0, 0};
  const auto g0 = compute_gae(r, v, d, 0.7, 0.0, 0.95);
  for (int t = 0; t < 3; ++t) CHECK(g0[t] == doctest::Approx(r[t] - v[t]));
  const auto l0 = compute_gae(r, v, d, 0.7, 0.9, 0.0);
  CHECK(l0[0] == doctest::Approx(1.0 + 0.9 * 0.1 - 0.3));
  CHECK(l0[1] == doctest::Approx(-0.5 + 0.9 * -0.4 - 0.1));
  CHECK(l0[2] == doctest::Approx(2.0 + 0.9 * 0.7 + 0.4));
  const std::vector<char> end = {0, 0, 1};
  CHECK(compute_gae(r, v, end, 100.0, 0.9, 0.0)[2] == doctest::Approx(2.0 + 0.4));
}

TEST_CASE("encoder loss examples") {
  ad::Tape tape;
  const std::vector<double> one = {1.0}, zero = {0.0};
  const std::vector<char> not_done = {0};
  ad::Var v0 = tape.constant(array_of({0.0}, {1, 1}));
  CHECK(encoder_loss(v0, one, zero, not_done, 0.0).value().item() == doctest::Approx(1.0));

  // Values equal to the exact discounted returns of a constant reward.
  const double gamma = 0.9, ret = 1.0 / (1.0 - gamma);
  ad::Var v = tape.constant(array_of({ret, ret}, {2, 1}));
  const std::vector<double> r = {1.0, 1.0}, next = {ret, ret};
  const std::vector<char> done = {0, 0};
  CHECK(encoder_loss(v, r, next, done, gamma).value().item() == doctest::Approx(0.0));
  // A terminal step drops the bootstrap.
  const std::vector<char> term = {1, 1};
  ad::Var v1 = tape.constant(array_of({1.0, 1.0}, {2, 1}));
  CHECK(encoder_loss(v1, r, next, term, gamma).value().item() == doctest::Approx(0.0));
}

TEST_CASE("decoder loss clip arithmetic") {
  ad::Tape tape;
  auto loss = [&](double r, double adv) {
    ad::Var lp = tape.constant(array_of({std::log(r)}, {1}));
    const std::vector<double> old = {0.0}, a = {adv};
    return decoder_loss(lp, old, a, 0.2).value().item();
  };
  CHECK(loss(1.0, 2.0) == doctest::Approx(-2.0));
  CHECK(loss(2.0, 1.0) == doctest::Approx(-1.2));
  CHECK(loss(0.5, -1.0) == doctest::Approx(0.8));

  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<double> lp(7), adv(7);
  for (int i = 0; i < 7; ++i) {
    lp[i] = g(rng);
    adv[i] = g(rng);
  }
  ad::Var same = tape.constant(array_of(lp, {7}));
  double mean_adv = 0.0;
  for (double a : adv) mean_adv += a / 7;
  CHECK(decoder_loss(same, lp, adv, 0.2).value().item() == -mean_adv);
}

TEST_CASE("behavioural cloning loss examples") {
  ad::Tape tape;
  const std::vector<int> expert = {0};
  const double half = std::log(0.5), rest = std::log(0.5 / 4);
  CHECK(bc_loss(tape.constant(array_of({half, rest, rest, rest, rest}, {1, 5})), expert).value().item() ==
        doctest::Approx(std::log(2.0)));
  CHECK(bc_loss(tape.constant(array_of({0, 0, 0, 0, 0}, {1, 5})), expert).value().item() ==
        doctest::Approx(std::log(5.0)));
  CHECK(bc_loss(tape.constant(array_of({40, 0, 0, 0, 0}, {1, 5})), expert).value().item() < 1e-12);
}

TEST_CASE("losses pass gradient checks") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  auto rnd = [&](int k) {
    std::vector<double> v(k);
    for (double& x : v) x = g(rng);
    return v;
  };
  const auto rewards = rnd(6), next = rnd(6), old = rnd(6), adv = rnd(6);
  const std::vector<char> done = {0, 1};
  const std::vector<int> expert = {1, 4, 0, 2, 3, 3};
  CHECK(ad::grad_check([&](ad::Tape&, auto x) { return encoder_loss(x[0], rewards, next, done, 0.9); },
                       {array_of(rnd(6), {2, 3})}) < 1e-4);
  // Keep ratios away from the clip corners so the check stays smooth.
  std::vector<double> lp = old;
  for (size_t i = 0; i < lp.size(); ++i) lp[i] += (i % 2 ? 0.05 : 0.5);
  CHECK(ad::grad_check([&](ad::Tape&, auto x) { return decoder_loss(x[0], old, adv, 0.2); },
                       {array_of(lp, {6})}) < 1e-4);
  CHECK(ad::grad_check([&](ad::Tape&, auto x) { return bc_loss(x[0], expert); }, {array_of(rnd(30), {6, 5})}) <
        1e-4);
}

TEST_CASE("zero learning rate leaves parameters bit identical") {
  const PolicyConfig pc = tiny();
  TrainConfig tc = small_train();
  tc.lr = 0.0;
  const ParamSet init = init_params(pc, tc.seed);
  const TrainResult r = train(small_setup(), tc, pc, 2);
  CHECK(r.params.identical(init));
  CHECK(r.metrics.size() == 2);
}

TEST_CASE("target network syncs exactly and stays frozen in between") {
  const PolicyConfig pc = tiny();
  TrainConfig tc = small_train();
  tc.target_update = 3;
  tc.lr = 1e-2;
  Learner learner(pc, tc, init_params(pc, 1));
  CHECK(learner.target().identical(learner.params()));
  const auto samples = expert_samples(pc, 4, 2);
  const auto ptrs = pointers(samples);
  const ParamSet frozen = learner.target();
  learner.bc_update(ptrs);
  learner.bc_update(ptrs);
  CHECK(learner.target().identical(frozen));
  CHECK_FALSE(learner.params().identical(frozen));
  learner.bc_update(ptrs);
  CHECK(learner.updates() == 3);
  CHECK(learner.target().identical(learner.params()));
}

TEST_CASE("behavioural cloning raises expert agreement") {
  PolicyConfig pc = tiny();
  pc.conv1 = 4;
  pc.conv2 = 8;
  pc.d = 16;
  TrainConfig tc = small_train();
  tc.lr = 3e-3;
  Learner learner(pc, tc, init_params(pc, 6));
  const auto samples = expert_samples(pc, 6, 7);
  const auto ptrs = pointers(samples);
  const double first = learner.bc_update(ptrs).loss_bc;
  double last = first;
  for (int k = 0; k < 250; ++k) last = learner.bc_update(ptrs).loss_bc;
  CHECK(last < first);
  CHECK(learner.agreement(ptrs) > 0.9);
}

TEST_CASE("training is reproducible apart from wall time") {
  const PolicyConfig pc = tiny();
  const TrainConfig tc = small_train();
  auto strip = [](std::vector<nlohmann::json> m) {
    for (auto& j : m) j.erase("wall_s");
    return m;
  };
  const TrainResult a = train(small_setup(), tc, pc, 2);
  const TrainResult b = train(small_setup(), tc, pc, 2);
  CHECK(strip(a.metrics) == strip(b.metrics));
  CHECK(a.params.identical(b.params));
  for (const char* key : {"iteration", "throughput", "collision_rate", "loss_encoder", "loss_decoder", "loss_bc"}) {
    CHECK(a.metrics.back().contains(key));
  }
}

TEST_CASE("training writes metrics and checkpoints") {
  const PolicyConfig pc = tiny();
  TrainConfig tc = small_train();
  const auto dir = std::filesystem::temp_directory_path() / "seqpath_train_test";
  std::filesystem::remove_all(dir);
  tc.out_dir = dir.string();
  tc.checkpoint_every = 1;
  int calls = 0;
  train(small_setup(), tc, pc, 2, [&](int, const ParamSet&, nlohmann::json&) { ++calls; });
  CHECK(calls == 2);
  CHECK(std::filesystem::exists(dir / "metrics.jsonl"));
  CHECK(std::filesystem::exists(dir / "final.ckpt"));
  CHECK(std::filesystem::exists(dir / "iter_1.ckpt"));
  nlohmann::json meta;
  load_checkpoint((dir / "final.ckpt").string(), &meta);
  CHECK(policy_config_from_json(meta["policy"]).d == pc.d);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train config parsing") {
  TrainConfig tc;
  PolicyConfig pc;
  parse_train_config(
      "# comment\n"
      "gamma = 0.5\n"
      "lr=0.001   # trailing\n"
      "use_il = false\n"
      "reward_mode = individual\n"
      "policy.d = 32\n",
      tc, pc);
  CHECK(tc.gamma == 0.5);
  CHECK(tc.lr == 0.001);
  CHECK_FALSE(tc.use_il);
  CHECK(pc.d == 32);
  CHECK(to_json(tc)["gamma"] == 0.5);
  CHECK_THROWS_AS(parse_train_config("nonsense = 1\n", tc, pc), Error);
  CHECK_THROWS_AS(parse_train_config("gamma\n", tc, pc), Error);
  CHECK_THROWS_AS(parse_train_config("gamma = abc\n", tc, pc), Error);
  tc = TrainConfig{};
  tc.gamma = 1.5;
  CHECK_THROWS_AS(tc.validate(), Error);
}
