#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "marvis/errors.hpp"
#include "marvis/ops.hpp"
#include "marvis/toyscene.hpp"
#include "marvis/trainer.hpp"
#include "support/tmpdir.hpp"

using namespace marvis;
using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace {

// Three 64x64 sequences of three frames: two train sequences (four samples)
// and one validation sequence.
DatasetManifest small_dataset(const fs::path& dir, bool stereo = true) {
  SceneConfig base;
  base.width = base.height = 64;
  base.frames = 3;
  std::vector<SceneSequence> seqs;
  for (std::uint64_t s = 0; s < 3; ++s) seqs.push_back(render_sequence(SceneConfig::randomized(base, 100 + s)));
  DatasetManifest m = export_dataset(seqs, dir, 3, {2, 1, 0});
  if (!stereo)
    for (auto& e : m.entries) {
      e.stereo_right_path.reset();
      e.calib_id.reset();
    }
  return m;
}

TrainConfig tiny_config(int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.model = ModelConfig::tiny();
  cfg.seed = 5;
  return cfg;
}

std::vector<Eigen::Index> trainable_rows(const NamedArrays& s) {
  std::vector<Eigen::Index> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i].name.find("running_") == std::string::npos) out.push_back(static_cast<Eigen::Index>(i));
  return out;
}

}  // namespace

TEST_CASE("adamw: zero grad and zero decay leave parameters unchanged") {
  TensorF p = TensorF::from_values({3}, (TensorF::Array(3) << 1.5f, -2.f, 0.25f).finished(), true);
  const TensorF::Array before = p.values();
  AdamState<float> st;
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  for (int i = 0; i < 5; ++i) adamw_step<float>({p}, st, cfg);
  CHECK((p.values() == before).all());
  CHECK((st.m[0] == 0).all());
  CHECK((st.v[0] == 0).all());
  CHECK(st.step == 5);
}

TEST_CASE("adamw: first step moves by lr against the gradient sign") {
  for (double g : {2.5, -0.03, 40.0}) {
    TensorD p = TensorD::scalar(1.0, true);
    p.node()->grad = TensorD::Array::Constant(1, g);
    AdamState<double> st;
    AdamWConfig cfg;
    cfg.weight_decay = 0;
    adamw_step<double>({p}, st, cfg);
    const double delta = p.item() - 1.0;
    CHECK(std::abs(delta + cfg.lr * (g > 0 ? 1 : -1)) < 1e-6);
  }
}

TEST_CASE("adamw: decoupled weight decay") {
  TensorD p = TensorD::scalar(2.0, true);
  AdamState<double> st;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  adamw_step<double>({p}, st, cfg);  // no grad: only the decay acts
  CHECK(p.item() == doctest::Approx(2.0 * (1 - 0.1 * 0.5)).epsilon(1e-14));
}

TEST_CASE("adamw: minimizes a quadratic") {
  TensorD p = TensorD::scalar(0.0, true);
  AdamState<double> st;
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0;
  for (int i = 0; i < 100; ++i) {
    p.zero_grad();
    const TensorD d = add(p, TensorD::scalar(-3.0));
    backward(mul(d, d));
    adamw_step<double>({p}, st, cfg);
  }
  CHECK(std::abs(p.item() - 3.0) < 0.1);
}

TEST_CASE("adamw: state shape mismatch throws") {
  TensorD a = TensorD::zeros({2}, true), b = TensorD::zeros({3}, true);
  AdamState<double> st;
  adamw_step<double>({a}, st, AdamWConfig{});
  CHECK_THROWS_AS(adamw_step<double>({b}, st, AdamWConfig{}), ShapeError);
  CHECK_THROWS_AS(adamw_step<double>({a, b}, st, AdamWConfig{}), ShapeError);
}

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr = 0;
  CHECK_NOTHROW(c.validate());  // a null update is allowed for checks
  c.lr = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_decay = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.lr_decay = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig d = tiny_config(3);
  d.weights.lambda_e = 0.25;
  d.use_egc = false;
  const nlohmann::json j = d;
  const TrainConfig back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.model.stage_channels == ModelConfig::tiny().stage_channels);
}

TEST_CASE("reflect_pad mirrors without repeating the edge") {
  PlaneF in(2, 3);
  in << 1, 2, 3, 4, 5, 6;
  const PlaneF out = reflect_pad(in, 4, 6);
  PlaneF expect(4, 6);
  expect << 1, 2, 3, 2, 1, 2,  //
      4, 5, 6, 5, 4, 5,        //
      1, 2, 3, 2, 1, 2,        //
      4, 5, 6, 5, 4, 5;
  CHECK((out == expect).all());
  CHECK((reflect_pad(in, 2, 3) == in).all());
  CHECK_THROWS_AS(reflect_pad(in, 1, 3), ShapeError);
  CHECK(sidecar_path("runs/a/best.mrvs") == fs::path("runs/a/best.json"));
}

TEST_CASE("predict keeps odd frame sizes and is deterministic") {
  MarvisModel<float> model(ModelConfig::tiny());
  const Predictor pred(ModelConfig::tiny(), LmeConfig{}, model.state_dict());
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> u(0, 1);
  GrayImage frame(100, 90);
  FloatMap lme(100, 90);
  for (int y = 0; y < 90; ++y)
    for (int x = 0; x < 100; ++x) {
      frame(x, y) = u(rng);
      lme(x, y) = u(rng);
    }
  const InferResult a = pred.predict(frame, lme), b = pred.predict(frame, lme);
  CHECK(a.prob.width() == 100);
  CHECK(a.prob.height() == 90);
  CHECK(a.mask.width() == 100);
  CHECK(a.mask.height() == 90);
  CHECK((a.prob.values == b.prob.values).all());
  CHECK((a.mask.labels == b.mask.labels).all());
  CHECK((a.mask.labels == (a.prob.values >= 0.5f).cast<std::uint8_t>()).all());
}

TEST_CASE("prepare_sample produces normalized inputs") {
  testing::TempDir dir("trainer");
  const DatasetManifest m = small_dataset(dir.path());
  const TrainConfig cfg = tiny_config(1);
  const PreparedSample s = prepare_sample(m, m.entries[0], cfg, true);
  CHECK(s.frame.rows() == 64);
  CHECK(s.lme.minCoeff() >= 0);
  CHECK(s.lme.maxCoeff() <= 1);
  REQUIRE(s.egc.has_value());
  CHECK(s.egc->minCoeff() >= 0);
  CHECK(s.egc->maxCoeff() <= 1);
  CHECK_FALSE(prepare_sample(m, m.entries[0], cfg, false).egc.has_value());
}

TEST_CASE("lr = 0 leaves trainable parameters unchanged") {
  testing::TempDir dir("trainer");
  const DatasetManifest m = small_dataset(dir / "data");
  TrainConfig cfg = tiny_config(2);
  cfg.lr = 0;
  const TrainResult r = train(m, cfg, dir / "run");
  MarvisModel<float> init(cfg.model);
  const NamedArrays before = init.state_dict(), after = load_checkpoint(r.last_checkpoint);
  REQUIRE(before.size() == after.size());
  for (Eigen::Index i : trainable_rows(before)) CHECK(before[i] == after[i]);
}

TEST_CASE("training is reproducible and writes its artifacts") {
  testing::TempDir dir("trainer");
  const DatasetManifest m = small_dataset(dir / "data");
  const TrainConfig cfg = tiny_config(3);
  const TrainResult a = train(m, cfg, dir / "a"), b = train(m, cfg, dir / "b");
  REQUIRE(a.history.size() == 3);
  for (int e = 0; e < 3; ++e) {
    CHECK(a.history[e].loss == b.history[e].loss);
    CHECK(a.history[e].val_iou == b.history[e].val_iou);
    CHECK(a.history[e].lr == doctest::Approx(1e-3 * std::pow(0.9, e)));
    CHECK(std::isfinite(a.history[e].loss));
    CHECK(a.history[e].egc > 0);
  }
  CHECK(io_detail::read_file(a.last_checkpoint) == io_detail::read_file(b.last_checkpoint));
  for (const char* f : {"log.jsonl", "best.mrvs", "best.json", "last.mrvs", "last.json"})
    CHECK(fs::exists(dir / "a" / f));
  std::ifstream log(dir / "a" / "log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("val_iou"));
    CHECK(j.contains("bce"));
    ++lines;
  }
  CHECK(lines == 3);

  // The checkpoint sidecar is enough to rebuild a predictor.
  const Predictor p(a.best_checkpoint);
  const PreparedSample s = prepare_sample(m, m.entries[0], cfg, false);
  CHECK(p.predict(GrayImage(s.frame), FloatMap(s.lme)).prob.width() == 64);
}

TEST_CASE("disabling EGC only removes the EGC term") {
  testing::TempDir dir("trainer");
  const DatasetManifest m = small_dataset(dir / "data");
  TrainConfig on = tiny_config(2), off = tiny_config(2);
  on.weights.lambda_e = 0;
  off.use_egc = false;
  const TrainResult a = train(m, on, dir / "a"), b = train(m, off, dir / "b");
  for (int e = 0; e < 2; ++e) {
    CHECK(a.history[e].bce == b.history[e].bce);
    CHECK(a.history[e].dice == b.history[e].dice);
  }
  // Without stereo data the flag has no effect either.
  testing::TempDir mono("trainer");
  const DatasetManifest ms = small_dataset(mono / "data", false);
  TrainConfig with = tiny_config(2), without = tiny_config(2);
  without.use_egc = false;
  const TrainResult c = train(ms, with, mono / "c"), d = train(ms, without, mono / "d");
  for (int e = 0; e < 2; ++e) {
    CHECK(c.history[e].bce == d.history[e].bce);
    CHECK(c.history[e].dice == d.history[e].dice);
    CHECK(c.history[e].egc == 0);
  }
}

TEST_CASE("empty splits are rejected") {
  testing::TempDir dir("trainer");
  DatasetManifest m = small_dataset(dir / "data");
  for (auto& e : m.entries) e.split = Split::kTrain;
  CHECK_THROWS_AS(train(m, tiny_config(1), dir / "run"), ConfigError);
  for (auto& e : m.entries) e.split = Split::kVal;
  CHECK_THROWS_AS(train(m, tiny_config(1), dir / "run"), ConfigError);
}

TEST_CASE("overfit smoke test") {
  testing::TempDir dir("trainer");
  const DatasetManifest m = small_dataset(dir / "data");
  TrainConfig cfg = tiny_config(200);
  cfg.batch_size = 4;
  cfg.lr = 5e-3;
  cfg.lr_decay = 0.99;
  const TrainResult r = train(m, cfg, dir / "run");

  // Loss falls over the first ten epochs after 3-epoch smoothing.
  std::vector<double> smooth;
  for (int e = 1; e + 1 < 11; ++e)
    smooth.push_back((r.history[e - 1].loss + r.history[e].loss + r.history[e + 1].loss) / 3);
  for (std::size_t i = 1; i < smooth.size(); ++i) CHECK(smooth[i] < smooth[i - 1]);

  const Predictor p(r.last_checkpoint);
  EvalReport total;
  for (std::size_t i : m.indices(Split::kTrain)) {
    const PreparedSample s = prepare_sample(m, m.entries[i], cfg, false);
    total += evaluate(p.predict(GrayImage(s.frame), FloatMap(s.lme)).prob, BinaryMask(s.mask));
  }
  total.finalize();
  MESSAGE("train IoU " << total.iou);
  CHECK(total.iou >= 0.95);
}
