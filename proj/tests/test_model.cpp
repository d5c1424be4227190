#include <doctest.h>

#include <set>

#include "marvis/errors.hpp"
#include "marvis/model.hpp"
#include "marvis/objective.hpp"
#include "marvis/ops.hpp"
#include "support/gradcheck.hpp"

using namespace marvis;
using marvis::testing::TensorD;

namespace {

Tensor<float> random_input(int n, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float>::Array v(static_cast<Eigen::Index>(n) * 2 * h * w);
  for (auto& x : v) x = u(rng);
  return Tensor<float>::from_values({n, 2, h, w}, v);
}

}  // namespace

TEST_CASE("parameter counts") {
  CHECK(count_parameters(ModelConfig{}) == 1550664);
  CHECK(count_parameters(ModelConfig::tiny()) == 64224);
  CHECK(count_parameters(ModelConfig{}) >= 1100000);
  CHECK(count_parameters(ModelConfig{}) <= 2000000);
  CHECK(count_parameters(ModelConfig::tiny()) < 100000);

  ModelConfig doubled = ModelConfig::tiny();
  for (auto& c : doubled.stage_channels) c *= 2;
  CHECK(count_parameters(doubled) > count_parameters(ModelConfig::tiny()));

  const MarvisModel<float> m(ModelConfig::tiny());
  std::int64_t manual = 0;
  for (const auto& e : m.entries())
    if (e.trainable) manual += e.tensor.numel();
  CHECK(m.parameter_count() == manual);
  CHECK(manual == count_parameters(ModelConfig::tiny()));
}

TEST_CASE("parameter names follow the stage scheme") {
  const MarvisModel<float> m(ModelConfig::tiny());
  std::set<std::string> names, prefixes;
  for (const auto& e : m.entries()) {
    CHECK(names.insert(e.name).second);
    prefixes.insert(e.name.substr(0, e.name.find('.')));
  }
  CHECK(prefixes == std::set<std::string>{"enc1", "enc2", "enc3", "enc4", "enc5", "dec1", "dec2", "dec3", "dec4",
                                          "dec5", "head"});
  CHECK(names.count("enc2.cbam.spatial.weight"));
  CHECK(names.count("enc4.cbam.fc1.weight"));
  CHECK_FALSE(names.count("enc1.cbam.fc1.weight"));
  CHECK_FALSE(names.count("enc5.cbam.fc1.weight"));
  CHECK(names.count("enc5.tok.norm.weight"));
  CHECK(names.count("dec4.tok.dwconv.weight"));
  CHECK(names.count("enc1.conv1.bn.running_var"));
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.stage_channels[1] = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.stage_channels[0] = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.token_mlp_ratio = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  const nlohmann::json j = ModelConfig::tiny();
  const ModelConfig back = j.get<ModelConfig>();
  CHECK(back.stage_channels == ModelConfig::tiny().stage_channels);
}

TEST_CASE("shift offsets") {
  CHECK(shift_offsets(150) == std::vector<int>{-2, -1, 0, 1, 2});
  CHECK(shift_offsets(16) == std::vector<int>{-2, -1, 1, 2});
  CHECK(shift_offsets(9) == std::vector<int>{-1, 0, 1});
  CHECK(shift_offsets(14) == std::vector<int>{-1, 1});
  CHECK(shift_offsets(7) == std::vector<int>{0});
}

TEST_CASE("kaiming initialization bounds and determinism") {
  ParamInit a(3), b(3);
  const auto va = a.kaiming(1000, 24), vb = b.kaiming(1000, 24);
  CHECK(va == vb);
  const double bound = std::sqrt(6.0 / 24);
  for (double v : va) CHECK(std::abs(v) <= bound);
  CHECK(*std::max_element(va.begin(), va.end()) > 0.9 * bound);
}

TEST_CASE("forward shapes and range") {
  MarvisModel<float> m(ModelConfig::tiny());
  for (const auto [h, w] : std::vector<std::pair<int, int>>{{64, 64}, {96, 96}, {32, 64}}) {
    const Tensor<float> y = m.forward(random_input(1, h, w, 1));
    CHECK(y.shape() == Shape{1, 1, h, w});
    CHECK(y.values().minCoeff() > 0.0f);
    CHECK(y.values().maxCoeff() < 1.0f);
  }
  CHECK_THROWS_AS(m.forward(random_input(1, 48, 64, 1)), ShapeError);
  CHECK_THROWS_AS(m.forward(random_input(1, 16, 16, 1)), ShapeError);
  CHECK_THROWS_AS(m.forward(Tensor<float>::zeros({1, 3, 32, 32})), ShapeError);

  const Tensor<float> frame = Tensor<float>::full({1, 1, 32, 32}, 0.3f);
  const Tensor<float> lme = Tensor<float>::full({1, 1, 32, 32}, 0.1f);
  CHECK(m.forward(frame, lme).shape() == Shape{1, 1, 32, 32});
}

TEST_CASE("full-width model runs") {
  MarvisModel<float> m(ModelConfig{});
  m.set_training(false);
  NoGradGuard guard;
  const Tensor<float> y = m.forward(random_input(1, 64, 64, 2));
  CHECK(y.shape() == Shape{1, 1, 64, 64});
  CHECK(y.values().allFinite());
}

TEST_CASE("finite outputs across seeds") {
  NoGradGuard guard;
  for (std::uint64_t s = 0; s < 100; ++s) {
    ModelConfig c = ModelConfig::tiny();
    c.seed = s;
    MarvisModel<float> m(c);
    m.set_training(s % 2 == 0);
    const Tensor<float> y = m.forward(random_input(1, 32, 32, s));
    CHECK(y.values().allFinite());
  }
}

TEST_CASE("batch equivariance in eval mode") {
  MarvisModel<float> m(ModelConfig::tiny());
  m.set_training(false);
  NoGradGuard guard;
  const Tensor<float> a = random_input(1, 32, 32, 5), b = random_input(1, 32, 32, 6);
  const auto cat = [](const Tensor<float>& p, const Tensor<float>& q) {
    Tensor<float>::Array v(p.numel() + q.numel());
    v << p.values(), q.values();
    return Tensor<float>::from_values({2, 2, 32, 32}, v);
  };
  const Tensor<float> ab = m.forward(cat(a, b)), ba = m.forward(cat(b, a));
  const Eigen::Index n = 32 * 32;
  CHECK((ab.values().head(n) == ba.values().tail(n)).all());
  CHECK((ab.values().tail(n) == ba.values().head(n)).all());
  CHECK(((ab.values().head(n) - m.forward(a).values()).abs() < 1e-6f).all());
}

TEST_CASE("forward is deterministic per seed") {
  NoGradGuard guard;
  MarvisModel<float> a(ModelConfig::tiny()), b(ModelConfig::tiny());
  const Tensor<float> x = random_input(2, 32, 32, 9);
  CHECK((a.forward(x).values() == b.forward(x).values()).all());
  ModelConfig other = ModelConfig::tiny();
  other.seed = 1;
  MarvisModel<float> c(other);
  CHECK_FALSE((a.forward(x).values() == c.forward(x).values()).all());
}

TEST_CASE("tokenized block contract") {
  std::mt19937_64 rng(1);
  auto make = [&](int e, bool zero) {
    TokMlpWeights<double> w;
    auto t = [&](const Shape& s) { return zero ? TensorD::zeros(s) : marvis::testing::random_tensor(s, rng, -0.3, 0.3); };
    w.proj_w_w = t({e, e, 3, 3});
    w.proj_w_b = t({e});
    w.mlp_w = {t({e, e}), t({e})};
    w.dw_w = t({e, 1, 3, 3});
    w.dw_b = t({e});
    w.proj_h_w = t({e, e, 3, 3});
    w.proj_h_b = t({e});
    w.mlp_h = {t({e, e}), t({e})};
    w.ln_g = TensorD::full({e}, 1.0);
    w.ln_b = TensorD::zeros({e});
    return w;
  };
  const TensorD x = marvis::testing::random_tensor({1, 32, 8, 8}, rng);
  CHECK(tokenized_mlp(x, make(32, false)).shape() == Shape{1, 32, 8, 8});
  const TensorD z = tokenized_mlp(TensorD::zeros({1, 8, 4, 4}), make(8, true));
  CHECK((z.values() == 0.0).all());
  CHECK_THROWS_AS(tokenized_mlp(x, make(8, false)), ShapeError);
}

TEST_CASE("cbam scales identical channels alike") {
  std::mt19937_64 rng(2);
  // Identical fc2 rows make the channel weights of identical channels equal.
  TensorD fc2_row = marvis::testing::random_tensor({1, 2}, rng);
  TensorD::Array fc2(16);
  for (int c = 0; c < 8; ++c) fc2.segment(c * 2, 2) = fc2_row.values();
  const CbamWeights<double> w{marvis::testing::random_tensor({2, 8}, rng), marvis::testing::random_tensor({2}, rng),
                              TensorD::from_values({8, 2}, fc2), TensorD::full({8}, 0.1),
                              marvis::testing::random_tensor({1, 2, 7, 7}, rng)};
  const TensorD x = TensorD::full({1, 8, 5, 5}, 0.7);
  const TensorD y = cbam(x, w);
  REQUIRE(y.shape() == x.shape());
  for (int c = 1; c < 8; ++c)
    for (int p = 0; p < 25; ++p) CHECK(y.values()[c * 25 + p] == doctest::Approx(y.values()[p]).epsilon(1e-12));

  for (const Shape& s : std::vector<Shape>{{2, 8, 3, 4}, {1, 16, 6, 2}}) {
    const CbamWeights<double> v{marvis::testing::random_tensor({s[1] / 8, s[1]}, rng),
                                marvis::testing::random_tensor({s[1] / 8}, rng),
                                marvis::testing::random_tensor({s[1], s[1] / 8}, rng),
                                marvis::testing::random_tensor({s[1]}, rng),
                                marvis::testing::random_tensor({1, 2, 7, 7}, rng)};
    CHECK(cbam(marvis::testing::random_tensor(s, rng), v).shape() == s);
  }
}

TEST_CASE("state dict round trip and mismatch") {
  ModelConfig c = ModelConfig::tiny();
  MarvisModel<float> a(c);
  c.seed = 42;
  MarvisModel<float> b(c);
  NoGradGuard guard;
  const Tensor<float> x = random_input(1, 32, 32, 3);
  a.set_training(false);
  b.set_training(false);
  CHECK_FALSE((a.forward(x).values() == b.forward(x).values()).all());
  b.load_state_dict(a.state_dict());
  CHECK((a.forward(x).values() == b.forward(x).values()).all());

  NamedArrays state = a.state_dict();
  state[0].shape = {1};
  state[0].values = {0};
  try {
    b.load_state_dict(state);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find(state[0].name) != std::string::npos);
  }
  state = a.state_dict();
  state.pop_back();
  CHECK_THROWS_AS(b.load_state_dict(state), ShapeError);

  MarvisModel<float> wide(ModelConfig{});
  CHECK_THROWS_AS(wide.load_state_dict(a.state_dict()), ShapeError);
}

TEST_CASE("composite loss gradients through the tiny model (sampled)") {
  MarvisModel<double> m(ModelConfig::tiny());
  std::mt19937_64 rng(11);
  const TensorD x = marvis::testing::random_tensor({1, 2, 32, 32}, rng, 0, 1);
  TensorD::Array tv(32 * 32), ev = TensorD::Array::Zero(32 * 32);
  for (Eigen::Index i = 0; i < tv.size(); ++i) tv[i] = (i / 32) >= 16 ? 1.0 : 0.0;
  ev[100] = 0.5;
  ev[700] = 1.0;
  const TensorD target = TensorD::from_values({1, 1, 32, 32}, tv);
  const TensorD egc = TensorD::from_values({1, 1, 32, 32}, ev);
  auto loss = [&](const std::vector<TensorD>&) { return composite_loss(m.forward(x), target, egc, LossWeights{}); };
  // Steps much above 1e-7 cross ReLU kinks downstream of widely fanned-out parameters.
  const auto r = marvis::testing::gradcheck(loss, m.parameters(), 1e-7, 1e-3, 2);
  CAPTURE(r.worst_input);
  CAPTURE(r.analytic);
  CAPTURE(r.numeric);
  CHECK(r.max_rel_error < 1e-3);
}
