#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "oracle_utils.hpp"
#include "stp/training.hpp"

using namespace stp;

namespace {

ModelConfig micro_cfg() {
  ModelConfig cfg;
  cfg.encoder.image_size = 16;
  cfg.encoder.patch = 4;
  cfg.encoder.dim = 32;
  cfg.encoder.depth = 1;
  cfg.encoder.heads = 2;
  cfg.encoder.mlp_ratio = 2;
  cfg.decoder.dim = 16;
  cfg.decoder.depth = 1;
  cfg.decoder.heads = 2;
  cfg.decoder.mlp_ratio = 2;
  return cfg;
}

TrainConfig micro_train_cfg() {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.total_steps = 6;
  cfg.warmup_steps = 2;
  cfg.base_lr = 1e-3;
  cfg.seed = 5;
  return cfg;
}

std::vector<VideoClip> micro_clips() {
  SynthManifest manifest;
  manifest.seed = 77;
  manifest.clips = 3;
  manifest.params.size = 16;
  manifest.params.length = 24;
  manifest.params.sprites_min = 1;
  manifest.params.sprites_max = 1;
  manifest.params.radius_min = 2.0;
  manifest.params.radius_max = 3.0;
  return generate_dataset(manifest);
}

DataPipelineConfig micro_pipeline() {
  DataPipelineConfig cfg;
  cfg.interval = IntervalPolicy::parse("8");
  cfg.crop = false;
  cfg.out_size = 16;
  return cfg;
}

DecodedPrediction<double> fake_pred(Tensor<double> rows, std::vector<int> masked) {
  DecodedPrediction<double> p;
  p.predictions = std::move(rows);
  p.masked = std::move(masked);
  return p;
}

}  // namespace

TEST_CASE("stp_loss: zero at exact predictions, hand case, weight linearity") {
  auto tgt_c = Tensor<double>::from_data({1, 4}, {0.1, 0.4, -0.2, 0.7});
  auto tgt_f = Tensor<double>::from_data({1, 4}, {0.0, 0.0, 0.5, -0.5});
  auto loss0 = stp_loss(fake_pred(tgt_c, {0}), fake_pred(tgt_f, {1}), tgt_c, tgt_f, 1.0, 1.0);
  CHECK(loss0.total.value() == doctest::Approx(0.0));

  // pred - target = ones on the current row, zeros on the future row -> 1
  auto pred_c = Tensor<double>::from_data({1, 4}, {1.1, 1.4, 0.8, 1.7});
  auto loss1 = stp_loss(fake_pred(pred_c, {0}), fake_pred(tgt_f, {1}), tgt_c, tgt_f, 1.0, 1.0);
  CHECK(loss1.total.value() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(loss1.spatial == doctest::Approx(1.0));
  CHECK(loss1.temporal == doctest::Approx(0.0));

  Rng rng(31);
  auto pc = oracle::random_tensor<double>({3, 4}, rng, 1.0, false);
  auto pf = oracle::random_tensor<double>({2, 4}, rng, 1.0, false);
  auto tc = oracle::random_tensor<double>({3, 4}, rng, 1.0, false);
  auto tf = oracle::random_tensor<double>({2, 4}, rng, 1.0, false);
  for (int trial = 0; trial < 5; ++trial) {
    const double ls = rng.uniform(0.0, 2.0), lt = rng.uniform(0.0, 2.0);
    auto weighted = stp_loss(fake_pred(pc, {0, 1, 2}), fake_pred(pf, {0, 1}), tc, tf, ls, lt);
    CHECK(weighted.total.value() ==
          doctest::Approx(ls * weighted.spatial + lt * weighted.temporal).epsilon(1e-12));
  }
}

TEST_CASE("stp_loss: empty prediction sets contribute zero") {
  auto empty = Tensor<double>::zeros({0, 4});
  auto tgt_f = Tensor<double>::from_data({1, 4}, {1.0, 2.0, 3.0, 4.0});
  auto pred_f = Tensor<double>::zeros({1, 4});
  auto loss = stp_loss(fake_pred(empty, {}), fake_pred(pred_f, {0}), empty, tgt_f, 1.0, 1.0);
  CHECK(loss.spatial == 0.0);
  CHECK(loss.total.value() == doctest::Approx(7.5));  // mean(1,4,9,16)
}

TEST_CASE("stp_loss rejects mismatched row counts") {
  auto pred = Tensor<double>::zeros({2, 4});
  auto tgt = Tensor<double>::zeros({3, 4});
  auto ok = Tensor<double>::zeros({1, 4});
  CHECK_THROWS_AS(stp_loss(fake_pred(pred, {0, 1}), fake_pred(ok, {0}), tgt, ok, 1.0, 1.0),
                  ShapeError);
}

TEST_CASE("lr schedule anchors: warmup endpoints, cosine midpoint, final zero") {
  TrainConfig cfg;
  cfg.base_lr = 1.5e-4;
  cfg.total_steps = 1000;
  cfg.warmup_steps = 100;
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(50, cfg) == doctest::Approx(0.75e-4).epsilon(1e-12));
  CHECK(lr_at(100, cfg) == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK(std::abs(lr_at(550, cfg) - 0.75e-4) < 1e-9);  // cosine midpoint
  CHECK(lr_at(1000, cfg) < 1e-19);
  // monotone decay after warmup
  for (int s = 100; s < 1000; s += 50) CHECK(lr_at(s, cfg) >= lr_at(s + 50, cfg));
}

TEST_CASE("adamw: zero-gradient fixed points and decoupled decay") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  ParamList<float> params{{"w", Tensor<float>::from_data({2}, {0.5f, -1.25f}, true), true}};
  AdamW<float> opt(params, cfg);
  opt.step(params, 1e-2);  // no grad buffers -> zero gradient
  CHECK(params[0].tensor.at(0) == 0.5f);
  CHECK(params[0].tensor.at(1) == -1.25f);

  TrainConfig decay_cfg;
  decay_cfg.weight_decay = 0.05;
  ParamList<float> p2{{"w", Tensor<float>::from_data({1}, {0.8f}, true), true}};
  AdamW<float> opt2(p2, decay_cfg);
  const double lr = 2e-3;
  opt2.step(p2, lr);
  CHECK(p2[0].tensor.at(0) == doctest::Approx(0.8 * (1.0 - lr * 0.05)).epsilon(1e-6));

  // decay=false parameters are exempt
  ParamList<float> p3{{"ln.gamma", Tensor<float>::from_data({1}, {1.0f}, true), false}};
  AdamW<float> opt3(p3, decay_cfg);
  opt3.step(p3, lr);
  CHECK(p3[0].tensor.at(0) == 1.0f);
}

TEST_CASE("adamw single step matches the hand formula to 1e-7") {
  TrainConfig cfg;  // beta = (0.9, 0.95), eps 1e-8, decay 0.05
  ParamList<float> params{{"w", Tensor<float>::from_data({1}, {0.5f}, true), true}};
  params[0].tensor.node()->grad.assign(1, 0.3f);
  AdamW<float> opt(params, cfg);
  const double lr = 1e-2;
  opt.step(params, lr);

  // hand-computed update from the same f32-rounded inputs
  const double g = 0.3f;
  const double m = 0.1 * g;
  const double v = 0.05 * g * g;
  const double m_hat = static_cast<double>(static_cast<float>(m)) / (1.0 - 0.9);
  const double v_hat = static_cast<double>(static_cast<float>(v)) / (1.0 - 0.95);
  double w = 0.5;
  w -= lr * 0.05 * w;
  w -= lr * m_hat / (std::sqrt(v_hat) + 1e-8);
  CHECK(std::abs(static_cast<double>(params[0].tensor.at(0)) - w) < 1e-7);
}

TEST_CASE("masked_targets picks normalized rows at masked indices") {
  Rng rng(41);
  auto img = oracle::random_tensor<float>({3, 16, 16}, rng, 1.0, false);
  MaskingMap map;
  map.n_tokens = 16;
  map.ratio = 0.5;
  map.masked = {1, 5, 9};
  map.visible = {0, 2, 3, 4, 6, 7, 8, 10, 11, 12, 13, 14, 15};
  auto targets = masked_targets(img, 4, map);
  auto full = normalize_targets(patchify(img, 4));
  REQUIRE(targets.shape() == Shape{3, 48});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 48; ++c)
      CHECK(targets.at(r * 48 + c) == full.at(map.masked[static_cast<size_t>(r)] * 48 + c));
}

TEST_CASE("train_step produces finite decreasing-ish loss and is deterministic") {
  auto clips = micro_clips();
  const auto stats = compute_channel_stats(clips);
  const auto pipeline = micro_pipeline();

  auto run_trace = [&](int threads) {
    Rng init = Rng(5).derive({stream_tag::kInit});
    StpModel<float> model(micro_cfg(), init);
    TrainConfig tc = micro_train_cfg();
    tc.threads = threads;
    Trainer<float> trainer(model, tc);
    return train_loop(trainer, clips, pipeline, stats, tc.total_steps);
  };
  auto a = run_trace(1);
  auto b = run_trace(1);
  auto c = run_trace(2);
  REQUIRE(a.size() == 6);
  for (const auto& s : a) CHECK(std::isfinite(s.total));
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].total == b[i].total);  // same seed -> identical trace
    CHECK(a[i].total == c[i].total);  // thread count cannot change results
    CHECK(a[i].spatial == c[i].spatial);
    CHECK(a[i].temporal == c[i].temporal);
  }
}

TEST_CASE("train_step aborts with a diagnostic when the loss cannot stay finite") {
  auto clips = micro_clips();
  const auto stats = compute_channel_stats(clips);
  Rng init = Rng(5).derive({stream_tag::kInit});
  StpModel<float> model(micro_cfg(), init);
  Trainer<float> trainer(model, micro_train_cfg());
  // poison one weight so the forward pass overflows f32
  for (const auto& p : model.params()) {
    if (p.name == "encoder.patch_proj.w") {
      Tensor<float> t = p.tensor;
      t.mutable_data()[0] = 3e38f;
    }
  }
  auto batch = make_batch<float>(clips, micro_pipeline(), stats, 5, 0, 2);
  CHECK_THROWS_AS(trainer.train_step(batch), ValueError);
}

TEST_CASE("checkpoint round-trip is byte-identical; corrupt files are rejected") {
  auto clips = micro_clips();
  const auto stats = compute_channel_stats(clips);
  Rng init = Rng(9).derive({stream_tag::kInit});
  StpModel<float> model(micro_cfg(), init);
  Trainer<float> trainer(model, micro_train_cfg(), /*config_digest=*/42);
  train_loop(trainer, clips, micro_pipeline(), stats, 2);

  const std::string path1 = "ckpt_roundtrip_a.stpc";
  const std::string path2 = "ckpt_roundtrip_b.stpc";
  trainer.save_checkpoint(path1);
  Checkpoint loaded = Checkpoint::load(path1);
  CHECK(loaded.config_digest == 42);
  loaded.save(path2);
  std::ifstream f1(path1, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  std::string corrupt = b1;
  corrupt[0] = 'X';
  std::ofstream bad("ckpt_corrupt.stpc", std::ios::binary);
  bad << corrupt;
  bad.close();
  CHECK_THROWS_WITH_AS(Checkpoint::load("ckpt_corrupt.stpc"), doctest::Contains("magic"), IoError);

  // digest mismatch on restore
  Rng init2 = Rng(9).derive({stream_tag::kInit});
  StpModel<float> other(micro_cfg(), init2);
  Trainer<float> other_trainer(other, micro_train_cfg(), /*config_digest=*/43);
  CHECK_THROWS_AS(other_trainer.load_checkpoint(path1), ConfigError);
  CHECK_NOTHROW(other_trainer.load_checkpoint(path1, /*force_digest=*/true));

  std::filesystem::remove(path1);
  std::filesystem::remove(path2);
  std::filesystem::remove("ckpt_corrupt.stpc");
}

TEST_CASE("resume-equivalence: interrupted training reproduces the loss trace exactly") {
  auto clips = micro_clips();
  const auto stats = compute_channel_stats(clips);
  const auto pipeline = micro_pipeline();
  TrainConfig tc = micro_train_cfg();  // 6 steps

  Rng init = Rng(11).derive({stream_tag::kInit});
  StpModel<float> model_a(micro_cfg(), init);
  Trainer<float> trainer_a(model_a, tc, 7);
  auto full_trace = train_loop(trainer_a, clips, pipeline, stats, 6);

  Rng init_b = Rng(11).derive({stream_tag::kInit});
  StpModel<float> model_b(micro_cfg(), init_b);
  Trainer<float> trainer_b(model_b, tc, 7);
  auto head = train_loop(trainer_b, clips, pipeline, stats, 3);
  trainer_b.save_checkpoint("ckpt_resume.stpc");

  Rng init_c = Rng(123).derive({stream_tag::kInit});  // different init, then restored
  StpModel<float> model_c(micro_cfg(), init_c);
  Trainer<float> trainer_c(model_c, tc, 7);
  trainer_c.load_checkpoint("ckpt_resume.stpc");
  CHECK(trainer_c.step_count() == 3);
  auto tail = train_loop(trainer_c, clips, pipeline, stats, 6);

  REQUIRE(head.size() + tail.size() == full_trace.size());
  for (size_t i = 0; i < head.size(); ++i) CHECK(head[i].total == full_trace[i].total);
  for (size_t i = 0; i < tail.size(); ++i) CHECK(tail[i].total == full_trace[3 + i].total);

  // parameters agree bit-for-bit at the end
  for (size_t pi = 0; pi < model_a.params().size(); ++pi) {
    const auto& pa = model_a.params()[pi].tensor;
    const auto& pc = model_c.params()[pi].tensor;
    for (int64_t i = 0; i < pa.size(); ++i) CHECK(pa.at(i) == pc.at(i));
  }
  std::filesystem::remove("ckpt_resume.stpc");
}

TEST_CASE("warmup > total steps is rejected") {
  TrainConfig cfg;
  cfg.total_steps = 10;
  cfg.warmup_steps = 20;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
