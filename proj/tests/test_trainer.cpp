#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mulvit/checkpoint.hpp"
#include "mulvit/rng.hpp"
#include "mulvit/trainer.hpp"

using namespace mulvit;

namespace {

/// Small specs: 16x16 single-channel frames, four 8x8 patches per view.
ModelSpec tiny_spec(Variant v) {
  ModelSpec s;
  s.variant = v;
  s.cameras = is_multiview(v) ? 2 : 1;
  s.encoder.image_height = 16;
  s.encoder.image_width = 16;
  s.encoder.patch_size = 8;
  s.encoder.channels = 1;
  s.encoder.embed_dim = 16;
  s.encoder.depth = 1;
  s.encoder.heads = 2;
  s.encoder.ffn_ratio = 2;
  s.encoder.dropout = 0.1;
  s.fusion_depth = 1;
  s.fusion_heads = 2;
  s.fusion_ffn_ratio = 2;
  s.twdnn_blocks = 1;
  s.twdnn_hidden = 16;
  s.head_hidden = 8;
  return s;
}

/// In-memory dataset whose label is an affine function of frame brightness,
/// so a model can actually learn it; `label_noise` adds irreducible spread.
LoadedDataset make_dataset(size_t n, int64_t cameras, uint64_t seed, double label_noise = 0.0) {
  const ModelSpec s = tiny_spec(Variant::MulVitTf);
  LoadedDataset ds;
  ds.cameras = cameras;
  ds.channels = s.encoder.channels;
  ds.height = s.encoder.image_height;
  ds.width = s.encoder.image_width;
  Rng rng(seed);
  for (size_t i = 0; i < n; ++i) {
    LoadedSample smp;
    smp.timestamp_us = 1'000'000 + static_cast<int64_t>(i) * 50'000;
    const double brightness = rng.uniform();
    for (int64_t c = 0; c < cameras; ++c) {
      auto img = TensorT<float>::full({ds.channels, ds.height, ds.width},
                                      static_cast<float>(brightness));
      float* p = img.data();
      for (int64_t k = 0; k < img.numel(); ++k)
        p[k] += static_cast<float>(0.02 * rng.normal());
      smp.views.push_back(img);
    }
    smp.label_dbm = -60.0 + 20.0 * brightness + label_noise * rng.normal();
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

/// Distinguishable random inputs with unrelated labels: pure memorization.
LoadedDataset make_random_dataset(size_t n, int64_t cameras, uint64_t seed) {
  const ModelSpec s = tiny_spec(Variant::MulVitTf);
  LoadedDataset ds;
  ds.cameras = cameras;
  ds.channels = s.encoder.channels;
  ds.height = s.encoder.image_height;
  ds.width = s.encoder.image_width;
  Rng rng(seed);
  for (size_t i = 0; i < n; ++i) {
    LoadedSample smp;
    smp.timestamp_us = 1'000'000 + static_cast<int64_t>(i) * 50'000;
    for (int64_t c = 0; c < cameras; ++c) {
      auto img = TensorT<float>::zeros({ds.channels, ds.height, ds.width});
      float* p = img.data();
      for (int64_t k = 0; k < img.numel(); ++k) p[k] = static_cast<float>(rng.uniform());
      smp.views.push_back(img);
    }
    smp.label_dbm = -68.0 + 16.0 * rng.uniform();
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

enum class Group { Backbone, NonBackbone, All };

uint64_t hash_params(ModelParamsT<float>& p, Group which) {
  uint64_t h = 0xcbf29ce484222325ull;
  for_each_param(p, [&](const std::string& name, TensorT<float>& t) {
    const bool bb = is_backbone_param(name);
    if (which == Group::Backbone && !bb) return;
    if (which == Group::NonBackbone && bb) return;
    h = fnv1a64(t.values().data(), t.values().size() * sizeof(float), h);
  });
  return h;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());

  auto bad = [](auto&& mutate) {
    TrainConfig c2;
    mutate(c2);
    CHECK_THROWS_AS(c2.validate(), ConfigError);
  };
  bad([](TrainConfig& c2) { c2.phase1_epochs = -1; });
  bad([](TrainConfig& c2) { c2.base_lr = 0.0; });
  bad([](TrainConfig& c2) { c2.eta_min = 2e-4; });  // above base_lr
  bad([](TrainConfig& c2) { c2.weight_decay = -0.1; });
  bad([](TrainConfig& c2) { c2.dropout = 1.0; });
  bad([](TrainConfig& c2) { c2.batch_size = 0; });
  bad([](TrainConfig& c2) { c2.beta2 = 1.0; });
  bad([](TrainConfig& c2) { c2.adam_eps = 0.0; });
  bad([](TrainConfig& c2) { c2.val_fraction = 0.3; });  // fractions no longer sum to 1
  bad([](TrainConfig& c2) { c2.split_mode = "randomized"; });
  bad([](TrainConfig& c2) { c2.camera_index = -1; });
  bad([](TrainConfig& c2) { c2.stop_at_train_rmse_db = -1.0; });
}

TEST_CASE("normalizer statistics and round trip") {
  Normalizer n = fit_normalizer({-50.0, -60.0, -70.0});
  CHECK(n.mean == doctest::Approx(-60.0).epsilon(1e-15));
  // Population standard deviation: sqrt(((10)^2 + 0 + (-10)^2) / 3).
  CHECK(n.std == doctest::Approx(std::sqrt(200.0 / 3.0)).epsilon(1e-15));
  CHECK(n.fitted_on == "train");
  CHECK(n.norm(-60.0) == doctest::Approx(0.0));

  Rng rng(3);
  std::vector<double> labels;
  for (int i = 0; i < 200; ++i) labels.push_back(-55.0 + 8.0 * rng.normal());
  Normalizer m = fit_normalizer(labels);
  for (double y : labels) {
    CHECK(m.denorm(m.norm(y)) == doctest::Approx(y).epsilon(1e-6));
  }

  CHECK_THROWS_AS(fit_normalizer({}), DataError);
  CHECK_THROWS_AS(fit_normalizer({-40.0, -40.0, -40.0}), DataError);
}

TEST_CASE("split sizes, contiguity, and determinism") {
  // Val and test get exactly floor(f*n); the remainder goes to train.
  for (size_t n : {size_t{10}, size_t{23}, size_t{100}, size_t{999}, size_t{10000}}) {
    auto tags = split_assignments(n, 0.8, 0.1, 0.1, "chronological_blocks", 1);
    const auto n_val = static_cast<size_t>(std::count(tags.begin(), tags.end(), "val"));
    const auto n_test = static_cast<size_t>(std::count(tags.begin(), tags.end(), "test"));
    const auto n_train = static_cast<size_t>(std::count(tags.begin(), tags.end(), "train"));
    CHECK(n_val == static_cast<size_t>(std::floor(0.1 * static_cast<double>(n))));
    CHECK(n_test == static_cast<size_t>(std::floor(0.1 * static_cast<double>(n))));
    CHECK(n_train + n_val + n_test == n);  // exhaustive (and disjoint: one tag each)
    CHECK(n_train >= static_cast<size_t>(std::floor(0.8 * static_cast<double>(n))));

    // Chronological blocks: train then val then test, each contiguous.
    for (size_t i = 0; i < n_train; ++i) CHECK(tags[i] == "train");
    for (size_t i = n_train; i < n_train + n_val; ++i) CHECK(tags[i] == "val");
    for (size_t i = n_train + n_val; i < n; ++i) CHECK(tags[i] == "test");
  }
  {
    auto tags = split_assignments(10000, 0.8, 0.1, 0.1, "chronological_blocks", 1);
    CHECK(std::count(tags.begin(), tags.end(), "train") == 8000);
    CHECK(std::count(tags.begin(), tags.end(), "val") == 1000);
    CHECK(std::count(tags.begin(), tags.end(), "test") == 1000);
  }
  {
    auto tags = split_assignments(10, 0.8, 0.1, 0.1, "chronological_blocks", 1);
    CHECK(std::count(tags.begin(), tags.end(), "train") == 8);
    CHECK(std::count(tags.begin(), tags.end(), "val") == 1);
    CHECK(std::count(tags.begin(), tags.end(), "test") == 1);
  }

  // Shuffled mode: same seed reproduces, different seed differs, sizes hold.
  auto s1 = split_assignments(100, 0.8, 0.1, 0.1, "shuffled", 42);
  auto s2 = split_assignments(100, 0.8, 0.1, 0.1, "shuffled", 42);
  auto s3 = split_assignments(100, 0.8, 0.1, 0.1, "shuffled", 43);
  CHECK(s1 == s2);
  CHECK(s1 != s3);
  CHECK(std::count(s1.begin(), s1.end(), "val") == 10);
  // Not a pure block split (astronomically unlikely to match under shuffle).
  auto chron = split_assignments(100, 0.8, 0.1, 0.1, "chronological_blocks", 42);
  CHECK(s1 != chron);

  // All-train split is fine; an accidentally empty nonzero split is not.
  auto all_train = split_assignments(12, 1.0, 0.0, 0.0, "chronological_blocks", 1);
  CHECK(std::count(all_train.begin(), all_train.end(), "train") == 12);
  CHECK_THROWS_AS(split_assignments(10, 0.98, 0.01, 0.01, "chronological_blocks", 1), ConfigError);
  CHECK_THROWS_AS(split_assignments(9, 0.8, 0.1, 0.1, "chronological_blocks", 1), DataError);
  CHECK_THROWS_AS(split_assignments(100, 0.5, 0.5, 0.5, "chronological_blocks", 1), ConfigError);
  CHECK_THROWS_AS(split_assignments(100, 0.8, 0.1, 0.1, "bogus", 1), ConfigError);
}

TEST_CASE("cosine schedule endpoints and shape") {
  CHECK(cosine_lr(0, 100, 1e-4, 1e-6) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(cosine_lr(100, 100, 1e-4, 1e-6) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(cosine_lr(50, 100, 1e-4, 1e-6) == doctest::Approx((1e-4 + 1e-6) / 2).epsilon(1e-12));

  // Monotone non-increasing over a cycle, always within [eta_min, base].
  double prev = cosine_lr(0, 317, 3e-3, 1e-5);
  for (int64_t s = 1; s <= 317; ++s) {
    const double lr = cosine_lr(s, 317, 3e-3, 1e-5);
    CHECK(lr <= prev);
    CHECK(lr >= 1e-5 - 1e-18);
    CHECK(lr <= 3e-3 + 1e-18);
    prev = lr;
  }

  CHECK_THROWS_AS(cosine_lr(-1, 100, 1e-4, 1e-6), ParameterError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-4, 1e-6), ParameterError);
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-4, 1e-6), ParameterError);
}

TEST_CASE("adamw single-step update matches hand computation") {
  auto t = TensorT<float>::from_data({1}, {0.5f});
  t.set_requires_grad(true);
  t.grad_buffer()[0] = 0.3f;
  AdamW opt({{"p", &t, 1.0, false}}, 0.9, 0.999, 1e-8, 0.0);
  opt.step(1e-2);

  // Mirror of the update, with the moments rounded through float storage at
  // exactly the points the optimizer stores them. The match is then bitwise.
  const double g = static_cast<double>(0.3f);
  const float m1 = static_cast<float>((1.0 - 0.9) * g);
  const float v1 = static_cast<float>((1.0 - 0.999) * g * g);
  const double mhat = static_cast<double>(m1) / (1.0 - std::pow(0.9, 1.0));
  const double vhat = static_cast<double>(v1) / (1.0 - std::pow(0.999, 1.0));
  const float expect1 = static_cast<float>(static_cast<double>(0.5f) -
                                           1e-2 * mhat / (std::sqrt(vhat) + 1e-8));
  CHECK(t.values()[0] == expect1);
  CHECK(opt.step_count() == 1);

  // Second step with a new gradient: the update must continue from the
  // float-stored moments, not from a higher-precision shadow.
  t.grad_buffer()[0] = -0.1f;
  opt.step(1e-2);
  const double g2 = static_cast<double>(-0.1f);
  const float m2 = static_cast<float>(0.9 * static_cast<double>(m1) + 0.1 * g2);
  const float v2 = static_cast<float>(0.999 * static_cast<double>(v1) + 0.001 * g2 * g2);
  const double mhat2 = static_cast<double>(m2) / (1.0 - std::pow(0.9, 2.0));
  const double vhat2 = static_cast<double>(v2) / (1.0 - std::pow(0.999, 2.0));
  const float expect2 = static_cast<float>(static_cast<double>(expect1) -
                                           1e-2 * mhat2 / (std::sqrt(vhat2) + 1e-8));
  CHECK(t.values()[0] == expect2);
  CHECK(opt.step_count() == 2);
}

TEST_CASE("adamw restore continues a run bitwise") {
  auto grad_at = [](int step, size_t j) {
    return 0.05f * static_cast<float>(std::sin(0.7 * step + 1.3 * static_cast<double>(j)));
  };
  auto run_steps = [&](AdamW& opt, TensorT<float>& p, int from, int to) {
    for (int s = from; s < to; ++s) {
      for (size_t j = 0; j < p.values().size(); ++j) p.grad_buffer()[j] = grad_at(s, j);
      opt.step(3e-3);
    }
  };

  // Uninterrupted reference: 9 deterministic steps.
  auto a = TensorT<float>::from_data({2, 2}, {0.4f, -0.2f, 1.1f, 0.03f});
  a.set_requires_grad(true);
  AdamW opt_a({{"w", &a, 1.0, true}}, 0.9, 0.999, 1e-8, 0.05);
  run_steps(opt_a, a, 0, 9);

  // Interrupted at step 4, moments + step count carried over, then resumed.
  auto b = TensorT<float>::from_data({2, 2}, {0.4f, -0.2f, 1.1f, 0.03f});
  b.set_requires_grad(true);
  AdamW opt_b({{"w", &b, 1.0, true}}, 0.9, 0.999, 1e-8, 0.05);
  run_steps(opt_b, b, 0, 4);
  const auto saved_m = opt_b.m();
  const auto saved_v = opt_b.v();
  const auto saved_t = opt_b.step_count();

  auto c = TensorT<float>::from_data({2, 2}, b.values());
  c.set_requires_grad(true);
  AdamW opt_c({{"w", &c, 1.0, true}}, 0.9, 0.999, 1e-8, 0.05);
  opt_c.restore(saved_m, saved_v, saved_t);
  run_steps(opt_c, c, 4, 9);

  CHECK(c.values() == a.values());  // bitwise
  CHECK(opt_c.step_count() == opt_a.step_count());
  CHECK(opt_c.m() == opt_a.m());
  CHECK(opt_c.v() == opt_a.v());

  // Restore validation: wrong slot count, wrong element count, bad step count.
  AdamW opt_bad({{"w", &c, 1.0, true}}, 0.9, 0.999, 1e-8, 0.05);
  CHECK_THROWS_AS(opt_bad.restore({}, {}, 1), ContractError);
  CHECK_THROWS_AS(opt_bad.restore({{0.f, 0.f, 0.f}}, {{0.f, 0.f, 0.f}}, 1), ContractError);
  CHECK_THROWS_AS(opt_bad.restore(saved_m, saved_v, -1), ContractError);
}

TEST_CASE("adamw decoupled decay and zero-gradient behavior") {
  // No decay, zero grads: parameters are bitwise untouched.
  auto a = TensorT<float>::from_data({3}, {0.25f, -1.5f, 2.0f});
  a.set_requires_grad(true);
  AdamW opt_nodecay({{"a", &a, 1.0, false}}, 0.9, 0.999, 1e-8, 0.1);
  for (int s = 0; s < 5; ++s) opt_nodecay.step(1e-3);
  CHECK(a.values() == std::vector<float>{0.25f, -1.5f, 2.0f});

  // Decay slot, zero grads: a pure shrink by (1 - lr*wd) each step.
  auto b = TensorT<float>::from_data({2}, {0.8f, -0.4f});
  b.set_requires_grad(true);
  AdamW opt_decay({{"b", &b, 1.0, true}}, 0.9, 0.999, 1e-8, 0.1);
  float e0 = 0.8f, e1 = -0.4f;
  for (int s = 0; s < 7; ++s) {
    opt_decay.step(1e-2);
    e0 = static_cast<float>(static_cast<double>(e0) * (1.0 - 1e-2 * 0.1));
    e1 = static_cast<float>(static_cast<double>(e1) * (1.0 - 1e-2 * 0.1));
    CHECK(b.values()[0] == e0);
    CHECK(b.values()[1] == e1);
  }

  // Learning-rate scale: identical slots at scale 1 and 0.1 move in ratio 0.1.
  auto c1 = TensorT<float>::from_data({1}, {1.0f});
  auto c2 = TensorT<float>::from_data({1}, {1.0f});
  c1.set_requires_grad(true);
  c2.set_requires_grad(true);
  c1.grad_buffer()[0] = 0.7f;
  c2.grad_buffer()[0] = 0.7f;
  AdamW opt_scaled({{"c1", &c1, 1.0, false}, {"c2", &c2, 0.1, false}}, 0.9, 0.999, 1e-8, 0.0);
  opt_scaled.step(1e-3);
  const double d1 = 1.0 - static_cast<double>(c1.values()[0]);
  const double d2 = 1.0 - static_cast<double>(c2.values()[0]);
  // float32 parameter storage quantizes the small update to ~1 ulp of 1.0
  CHECK(d2 / d1 == doctest::Approx(0.1).epsilon(2e-3));

  // Gradient scaling (1/batch) changes the effective gradient: with g=1 the
  // bias-corrected first step is lr * 1/(sqrt(1) + eps).
  auto d = TensorT<float>::from_data({1}, {1.0f});
  d.set_requires_grad(true);
  d.grad_buffer()[0] = 4.0f;
  AdamW opt_gs({{"d", &d, 1.0, false}}, 0.9, 0.999, 1e-8, 0.0);
  opt_gs.step(1e-3, 0.25);  // effective grad 1.0
  CHECK(d.values()[0] == doctest::Approx(1.0f - 1e-3f).epsilon(1e-6));

  // Non-finite gradient aborts with the parameter named.
  auto e = TensorT<float>::from_data({1}, {1.0f});
  e.set_requires_grad(true);
  e.grad_buffer()[0] = std::numeric_limits<float>::quiet_NaN();
  AdamW opt_nan({{"head.fc1.weight", &e, 1.0, false}}, 0.9, 0.999, 1e-8, 0.0);
  CHECK_THROWS_WITH_AS(opt_nan.step(1e-3), doctest::Contains("head.fc1.weight"), TrainingError);
}

TEST_CASE("select_views routes cameras") {
  auto ds = make_dataset(1, 2, 9);
  const auto& s = ds.samples[0];

  auto tf = tiny_spec(Variant::MulVitTf);
  auto views = select_views(s, tf, 0);
  REQUIRE(views.size() == 2);
  CHECK(views[0].same_storage(s.views[0]));
  CHECK(views[1].same_storage(s.views[1]));

  auto sv = tiny_spec(Variant::SinVitD);
  CHECK(select_views(s, sv, 0)[0].same_storage(s.views[0]));
  CHECK(select_views(s, sv, 1)[0].same_storage(s.views[1]));
  CHECK_THROWS_AS(select_views(s, sv, 2), SpecError);

  auto three = tf;
  three.cameras = 3;
  CHECK_THROWS_AS(select_views(s, three, 0), SpecError);
}

TEST_CASE("phase 1 freezes the backbone bitwise") {
  auto spec = tiny_spec(Variant::MulVitTf);
  auto ds = make_dataset(20, 2, 11);
  TrainConfig cfg;
  cfg.phase1_epochs = 2;
  cfg.phase2_epochs = 0;
  cfg.batch_size = 8;
  cfg.seed = 5;

  auto initial = init_params<float>(spec, cfg.seed);
  const uint64_t backbone0 = hash_params(initial, Group::Backbone);
  const uint64_t rest0 = hash_params(initial, Group::NonBackbone);

  uint64_t backbone_at_phase1_end = 0;
  TrainHooks hooks;
  hooks.on_phase_end = [&](int phase, ModelParamsT<float>& p) {
    if (phase == 1) backbone_at_phase1_end = hash_params(p, Group::Backbone);
  };
  auto res = train(spec, ds, cfg, hooks);

  CHECK(backbone_at_phase1_end == backbone0);
  CHECK(hash_params(res.final_params, Group::Backbone) == backbone0);
  CHECK(hash_params(res.final_params, Group::NonBackbone) != rest0);
  CHECK(res.steps == 2 * 2);  // 16 train samples / batch 8, 2 epochs
  CHECK(res.history.size() == 2);
  // Parameters come back fully trainable and grad-free.
  for_each_param(res.final_params, [](const std::string&, TensorT<float>& t) {
    CHECK(t.requires_grad());
    CHECK(!t.has_grad());
  });
}

TEST_CASE("phase 2 backbone group runs at a tenth of the head lr") {
  auto spec = tiny_spec(Variant::MulVitTf);
  auto ds = make_dataset(20, 2, 12);
  TrainConfig cfg;
  cfg.phase1_epochs = 1;
  cfg.phase2_epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 6;

  std::vector<StepProbe> probe;
  TrainHooks hooks;
  hooks.step_probe = &probe;
  auto res = train(spec, ds, cfg, hooks);

  const uint64_t initial_backbone =
      [&] {
        auto p = init_params<float>(spec, cfg.seed);
        return hash_params(p, Group::Backbone);
      }();
  CHECK(hash_params(res.final_params, Group::Backbone) != initial_backbone);

  REQUIRE(probe.size() == 2 + 4);  // 2 steps/epoch: 1 phase-1 epoch + 2 phase-2 epochs
  bool saw_phase2_start = false;
  for (const auto& p : probe) {
    if (p.phase == 1) {
      CHECK(p.backbone_lr == 0.0);  // no backbone group at all
    } else {
      CHECK(p.backbone_lr == 0.1 * p.lr);
      if (p.step == 0) {
        saw_phase2_start = true;
        CHECK(p.lr == doctest::Approx(cfg.base_lr).epsilon(1e-15));  // fresh cosine cycle
      }
    }
  }
  CHECK(saw_phase2_start);
  CHECK(res.history.size() == 3);
  CHECK(res.history[0].phase == 1);
  CHECK(res.history[1].phase == 2);
  CHECK(res.history[1].lr == doctest::Approx(cfg.base_lr).epsilon(1e-15));
}

TEST_CASE("training is deterministic in the seed") {
  auto spec = tiny_spec(Variant::MulVitTwdnn);
  auto ds = make_dataset(16, 2, 13);
  TrainConfig cfg;
  cfg.phase1_epochs = 1;
  cfg.phase2_epochs = 1;
  cfg.batch_size = 4;
  cfg.train_fraction = 1.0;
  cfg.val_fraction = 0.0;
  cfg.test_fraction = 0.0;
  cfg.seed = 21;

  auto r1 = train(spec, ds, cfg);
  auto r2 = train(spec, ds, cfg);
  CHECK(hash_params(r1.final_params, Group::All) == hash_params(r2.final_params, Group::All));
  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t i = 0; i < r1.history.size(); ++i)
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);

  TrainConfig other = cfg;
  other.seed = 22;
  auto r3 = train(spec, ds, other);
  CHECK(hash_params(r1.final_params, Group::All) != hash_params(r3.final_params, Group::All));
}

TEST_CASE("normalizer is fitted on the train split only") {
  auto ds = make_dataset(20, 2, 14);
  // Hand-tag the splits and push val/test labels far away; if their labels
  // leaked into the normalizer the statistics would shift by tens of dB.
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    ds.samples[i].split = i < 10 ? "train" : (i < 15 ? "val" : "test");
    if (i >= 10) ds.samples[i].label_dbm += 50.0;
  }
  double mean_train = 0.0;
  for (size_t i = 0; i < 10; ++i) mean_train += ds.samples[i].label_dbm;
  mean_train /= 10.0;
  double var_train = 0.0;
  for (size_t i = 0; i < 10; ++i) {
    const double d = ds.samples[i].label_dbm - mean_train;
    var_train += d * d;
  }
  double mean_all = 0.0;
  for (const auto& s : ds.samples) mean_all += s.label_dbm;
  mean_all /= static_cast<double>(ds.samples.size());

  auto spec = tiny_spec(Variant::MulVitTf);
  TrainConfig cfg;
  cfg.phase1_epochs = 1;
  cfg.phase2_epochs = 0;
  cfg.batch_size = 8;
  auto res = train(spec, ds, cfg);

  CHECK(res.normalizer.mean == doctest::Approx(mean_train).epsilon(1e-12));
  CHECK(res.normalizer.std == doctest::Approx(std::sqrt(var_train / 10.0)).epsilon(1e-12));
  CHECK(res.normalizer.fitted_on == "train");
  // Statistics recomputed over val/test (or everything) were *not* used.
  CHECK(std::fabs(res.normalizer.mean - mean_all) > 5.0);
}

TEST_CASE("training learns a brightness-coded label") {
  auto spec = tiny_spec(Variant::SinVitD);
  auto ds = make_dataset(40, 1, 15);
  TrainConfig cfg;
  cfg.phase1_epochs = 0;
  cfg.phase2_epochs = 60;
  cfg.base_lr = 5e-3;
  cfg.dropout = 0.0;
  cfg.weight_decay = 0.01;
  cfg.batch_size = 8;
  cfg.train_fraction = 0.8;
  cfg.val_fraction = 0.2;
  cfg.test_fraction = 0.0;
  cfg.seed = 16;

  auto res = train(spec, ds, cfg);
  REQUIRE(res.history.size() == 60);
  const double first = res.history.front().train_loss;
  const double last = res.history.back().train_loss;
  CHECK(last < first);
  CHECK(last < 0.5 * first);
  // Validation tracked; the retained best matches the history minimum.
  CHECK(std::isfinite(res.history.back().val_loss));
  CHECK(res.best_epoch >= 1);
  const auto best_it = std::min_element(
      res.history.begin(), res.history.end(),
      [](const EpochRecord& a, const EpochRecord& b) { return a.val_loss < b.val_loss; });
  CHECK(res.best_val_rmse_db ==
        doctest::Approx(res.normalizer.std * std::sqrt(best_it->val_loss)).epsilon(1e-12));
  CHECK(res.best_epoch == best_it->epoch);
}

TEST_CASE("memorization probe stops early under the rmse knob") {
  auto spec = tiny_spec(Variant::SinVitD);
  auto ds = make_random_dataset(12, 1, 17);
  TrainConfig cfg;
  cfg.phase1_epochs = 0;
  cfg.phase2_epochs = 600;
  cfg.base_lr = 5e-3;
  cfg.eta_min = 1e-4;
  cfg.dropout = 0.0;
  cfg.weight_decay = 0.0;
  cfg.batch_size = 4;
  cfg.train_fraction = 1.0;
  cfg.val_fraction = 0.0;
  cfg.test_fraction = 0.0;
  cfg.stop_at_train_rmse_db = 0.5;
  cfg.seed = 18;
  split_dataset(ds, cfg);  // tag in place so evaluation below can see "train"

  auto res = train(spec, ds, cfg);
  CHECK(res.early_stopped);
  CHECK(!res.aborted);
  CHECK(res.normalizer.std * std::sqrt(res.history.back().train_loss) < 0.5);
  CHECK(res.steps < 600 * 3);

  // No val split: the retained checkpoint is the final state.
  CHECK(std::isnan(res.best_val_rmse_db));
  for (const auto& r : res.history) CHECK(std::isnan(r.val_loss));
  CHECK(hash_params(res.params, Group::All) == hash_params(res.final_params, Group::All));

  // The memorized model also evaluates cleanly in dBm.
  auto ev = evaluate(spec, res.params, ds, "train", res.normalizer, 0);
  CHECK(ev.report.rmse_db < 0.6);
}

TEST_CASE("non-finite loss aborts with the last good state") {
  auto spec = tiny_spec(Variant::MulVitTf);
  auto ds = make_dataset(16, 2, 19);
  ds.samples[3].views[0].values()[7] = std::numeric_limits<float>::infinity();
  TrainConfig cfg;
  cfg.phase1_epochs = 1;
  cfg.phase2_epochs = 0;
  cfg.batch_size = 4;
  cfg.train_fraction = 1.0;
  cfg.val_fraction = 0.0;
  cfg.test_fraction = 0.0;

  auto res = train(spec, ds, cfg);
  CHECK(res.aborted);
  CHECK(res.abort_reason.find("non-finite loss") != std::string::npos);
  bool all_finite = true;
  for_each_param(res.params, [&](const std::string&, TensorT<float>& t) {
    for (float v : t.values()) all_finite = all_finite && std::isfinite(v);
  });
  CHECK(all_finite);
}

TEST_CASE("evaluate: constant predictor at the train mean") {
  auto spec = tiny_spec(Variant::MulVitTf);
  auto ds = make_dataset(20, 2, 23);
  for (size_t i = 0; i < ds.samples.size(); ++i)
    ds.samples[i].split = i < 16 ? "train" : "test";

  std::vector<double> train_labels;
  for (size_t i = 0; i < 16; ++i) train_labels.push_back(ds.samples[i].label_dbm);
  Normalizer norm = fit_normalizer(train_labels);

  // All-zero parameters propagate zeros end to end, so the denormalized
  // prediction is exactly the train mean.
  auto zero = alloc_params<float>(spec);
  auto ev = evaluate(spec, zero, ds, "test", norm, 0);
  REQUIRE(ev.pred_dbm.size() == 4);
  for (double p : ev.pred_dbm) CHECK(p == norm.mean);

  CHECK(!ev.report.pearson_r.has_value());  // constant predictions
  REQUIRE(ev.report.r_squared.has_value());
  CHECK(*ev.report.r_squared <= 1e-12);

  CHECK_THROWS_AS(evaluate(spec, zero, ds, "val", norm, 0), DataError);
  CHECK_THROWS_AS(evaluate(spec, zero, ds, "bogus", norm, 0), ParameterError);
}

TEST_CASE("history csv layout") {
  std::vector<EpochRecord> h;
  h.push_back({1, 1, 1e-4, 0.9, std::numeric_limits<double>::quiet_NaN()});
  h.push_back({2, 2, 5e-5, 0.25, 0.5});
  const std::string path = temp_path("mulvit_history_test.csv");
  write_history_csv(path, h, "{\"seed\":1}");

  auto lines = read_lines(path);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "# config: {\"seed\":1}");
  CHECK(lines[1] == "epoch,phase,lr,train_loss,val_loss");
  CHECK(lines[2].substr(0, 4) == "1,1,");
  CHECK(lines[2].back() == ',');  // NaN val -> empty field
  CHECK(lines[3].find(",0.5") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint round-trips bitwise") {
  auto spec = tiny_spec(Variant::MulVitTf);
  Checkpoint ck;
  ck.spec = spec;
  ck.config.seed = 99;
  ck.config.phase2_epochs = 7;
  ck.normalizer.mean = -58.25;
  ck.normalizer.std = 6.5;
  ck.gelu_form = GeluForm::TanhApprox;
  ck.ln_eps = 1e-6;
  ck.epochs_completed = 9;
  ck.best_epoch = 4;
  ck.best_val_rmse_db = 2.125;
  ck.steps = 123;
  ck.params = init_params<float>(spec, 7);

  const std::string path = temp_path("mulvit_ck_test.bin");
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);

  CHECK(back.spec.variant == spec.variant);
  CHECK(back.spec.cameras == spec.cameras);
  CHECK(back.spec.encoder.embed_dim == spec.encoder.embed_dim);
  CHECK(back.spec.encoder.dropout == spec.encoder.dropout);
  CHECK(back.config.seed == 99);
  CHECK(back.config.phase2_epochs == 7);
  CHECK(back.normalizer.mean == -58.25);
  CHECK(back.normalizer.std == 6.5);
  CHECK(back.normalizer.fitted_on == "train");
  CHECK(back.gelu_form == GeluForm::TanhApprox);
  CHECK(back.ln_eps == 1e-6);
  CHECK(back.epochs_completed == 9);
  CHECK(back.best_epoch == 4);
  CHECK(back.best_val_rmse_db == 2.125);
  CHECK(back.steps == 123);
  CHECK(hash_params(back.params, Group::All) == hash_params(ck.params, Group::All));

  // Forward outputs are bitwise identical through a save/load cycle.
  auto ds = make_dataset(3, 2, 29);
  ForwardCtxT<float> ctx;
  for (const auto& s : ds.samples) {
    auto a = models::forward(s.views, spec, ck.params, ctx);
    auto b = models::forward(s.views, spec, back.params, ctx);
    CHECK(a.item() == b.item());
  }

  // A NaN best value survives as "absent".
  ck.best_val_rmse_db = std::numeric_limits<double>::quiet_NaN();
  save_checkpoint(path, ck);
  CHECK(std::isnan(load_checkpoint(path).best_val_rmse_db));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects damaged files") {
  auto spec = tiny_spec(Variant::SinVitW);
  Checkpoint ck;
  ck.spec = spec;
  ck.params = init_params<float>(spec, 3);
  const std::string path = temp_path("mulvit_ck_damage.bin");
  save_checkpoint(path, ck);

  CHECK_THROWS_AS(load_checkpoint(temp_path("mulvit_ck_missing.bin")), IoError);

  auto clobber = [&](size_t offset, char value, auto&& expected_check) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string bytes = buf.str();
    REQUIRE(offset < bytes.size());
    bytes[offset] = value;
    const std::string bad = temp_path("mulvit_ck_bad.bin");
    std::ofstream out(bad, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    expected_check(bad);
    std::filesystem::remove(bad);
  };
  clobber(0, 'X', [](const std::string& p) { CHECK_THROWS_AS(load_checkpoint(p), DataError); });
  clobber(4, 9, [](const std::string& p) { CHECK_THROWS_AS(load_checkpoint(p), DataError); });

  // Truncation and trailing junk are both detected.
  {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string bytes = buf.str();
    const std::string trunc = temp_path("mulvit_ck_trunc.bin");
    std::ofstream out(trunc, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 10));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(trunc), DataError);
    std::filesystem::remove(trunc);

    const std::string padded = temp_path("mulvit_ck_padded.bin");
    std::ofstream out2(padded, std::ios::binary);
    out2.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out2.put('!');
    out2.close();
    CHECK_THROWS_AS(load_checkpoint(padded), DataError);
    std::filesystem::remove(padded);
  }
  std::filesystem::remove(path);
}

TEST_CASE("run config json round trip and overrides") {
  auto spec = tiny_spec(Variant::MulVitTwdnn);
  TrainConfig cfg;
  cfg.seed = 77;
  cfg.base_lr = 2e-4;
  const std::string text = run_config_to_json_text(spec, cfg);

  ModelSpec spec2 = preset("mulvit-tf");
  TrainConfig cfg2;
  run_config_from_json_text(text, spec2, cfg2);
  CHECK(spec2.variant == Variant::MulVitTwdnn);
  CHECK(spec2.encoder.embed_dim == spec.encoder.embed_dim);
  CHECK(spec2.twdnn_hidden == spec.twdnn_hidden);
  CHECK(cfg2.seed == 77);
  CHECK(cfg2.base_lr == 2e-4);

  // Partial override touches only the named keys.
  ModelSpec spec3 = preset("mulvit-tf");
  TrainConfig cfg3;
  run_config_from_json_text(R"({"train":{"seed":9,"batch_size":4}})", spec3, cfg3);
  CHECK(cfg3.seed == 9);
  CHECK(cfg3.batch_size == 4);
  CHECK(cfg3.base_lr == 1e-4);
  CHECK(spec3.encoder.embed_dim == preset("mulvit-tf").encoder.embed_dim);

  ModelSpec s4;
  TrainConfig c4;
  CHECK_THROWS_AS(run_config_from_json_text("{not json", s4, c4), DataError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"trainer":{}})", s4, c4), DataError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"train":{"sed":1}})", s4, c4), DataError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"model":{"embed":32}})", s4, c4), DataError);
  CHECK_THROWS_AS(run_config_from_json_text(R"({"train":{"seed":"one"}})", s4, c4), DataError);

  CHECK(gelu_form_from_name("tanh_approx") == GeluForm::TanhApprox);
  CHECK(gelu_form_from_name("exact_cdf") == GeluForm::ExactCdf);
  CHECK_THROWS_AS(gelu_form_from_name("gaussian"), DataError);
  CHECK(gelu_form_name(GeluForm::ExactCdf) == "exact_cdf");
}

TEST_CASE("checkpoint carries optimizer state") {
  auto spec = tiny_spec(Variant::MulVitTf);
  Checkpoint ck;
  ck.spec = spec;
  ck.params = init_params<float>(spec, 11);
  ck.phase = 2;
  ck.epoch_in_phase = 3;
  ck.opt_step_count = 21;
  ck.epochs_completed = 5;
  ck.steps = 35;

  auto slots = make_param_slots(ck.params, ck.phase, 1.0);
  Rng rng(404);
  for (const auto& slot : slots) {
    std::vector<float> m(slot.tensor->values().size()), v(m.size());
    for (auto& x : m) x = static_cast<float>(rng.normal());
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    ck.opt_m.push_back(std::move(m));
    ck.opt_v.push_back(std::move(v));
  }
  REQUIRE(ck.has_optimizer_state());

  const std::string path = temp_path("mulvit_ck_opt.bin");
  save_checkpoint(path, ck);
  auto back = load_checkpoint(path);
  CHECK(back.phase == 2);
  CHECK(back.epoch_in_phase == 3);
  CHECK(back.opt_step_count == 21);
  CHECK(back.has_optimizer_state());
  CHECK(back.opt_m == ck.opt_m);  // bitwise
  CHECK(back.opt_v == ck.opt_v);
  std::filesystem::remove(path);

  // A moment list that does not match the phase's slot count is rejected.
  Checkpoint bad = ck;
  bad.opt_m.pop_back();
  bad.opt_v.pop_back();
  CHECK_THROWS_AS(save_checkpoint(path, bad), ContractError);

  // to_train_state deep-copies; make_checkpoint can drop the moments.
  auto st = to_train_state(ck);
  CHECK(st.phase == 2);
  CHECK(st.opt_step_count == 21);
  CHECK(st.opt_m == ck.opt_m);
  CHECK_FALSE(st.params.head.fc1_w.same_storage(ck.params.head.fc1_w));

  TrainConfig cfg;
  auto slim = make_checkpoint(spec, cfg, st, Normalizer{}, false);
  CHECK_FALSE(slim.has_optimizer_state());
  CHECK(slim.opt_step_count == 0);
  CHECK(slim.epoch_in_phase == 3);
  auto full = make_checkpoint(spec, cfg, st, Normalizer{}, true);
  CHECK(full.has_optimizer_state());
  CHECK(full.opt_m == st.opt_m);
  CHECK_FALSE(full.params.head.fc1_w.same_storage(st.params.head.fc1_w));
}

TEST_CASE("training resumes exactly where it stopped") {
  auto spec = tiny_spec(Variant::MulVitTf);
  auto ds = make_dataset(20, 2, 31);
  TrainConfig cfg;
  cfg.phase1_epochs = 2;
  cfg.phase2_epochs = 2;
  cfg.base_lr = 1e-3;
  cfg.batch_size = 8;
  cfg.dropout = 0.1;  // exercises the per-sample dropout streams
  cfg.train_fraction = 0.8;
  cfg.val_fraction = 0.2;
  cfg.test_fraction = 0.0;
  cfg.seed = 5;

  auto uninterrupted = train(spec, ds, cfg);  // non-const: hash_params walks it
  REQUIRE(uninterrupted.history.size() == 4);

  auto check_equivalence = [&](int64_t stop_after) {
    CAPTURE(stop_after);
    TrainHooks hooks;
    hooks.stop_after_epochs = stop_after;
    auto part1 = train(spec, ds, cfg, hooks);
    REQUIRE(part1.history.size() == static_cast<size_t>(stop_after));
    CHECK_FALSE(part1.early_stopped);
    CHECK_FALSE(part1.aborted);

    // Round-trip the snapshot through an on-disk checkpoint.
    auto ck = make_checkpoint(spec, cfg, part1.state, part1.normalizer, true);
    const std::string path = temp_path("mulvit_resume_" + std::to_string(stop_after) + ".bin");
    save_checkpoint(path, ck);
    auto restored = to_train_state(load_checkpoint(path));
    std::filesystem::remove(path);

    auto part2 = train(spec, ds, cfg, {}, &restored);
    CHECK(part2.history.size() == 4 - static_cast<size_t>(stop_after));

    // The resumed run is bitwise the uninterrupted one.
    CHECK(hash_params(part2.final_params, Group::All) ==
          hash_params(uninterrupted.final_params, Group::All));
    CHECK(part2.state.opt_m == uninterrupted.state.opt_m);
    CHECK(part2.state.opt_v == uninterrupted.state.opt_v);
    CHECK(part2.state.opt_step_count == uninterrupted.state.opt_step_count);
    CHECK(part2.steps == uninterrupted.steps);
    CHECK(part2.state.epochs_completed == 4);

    // Histories concatenate to the uninterrupted history, field for field.
    std::vector<EpochRecord> joined = part1.history;
    joined.insert(joined.end(), part2.history.begin(), part2.history.end());
    REQUIRE(joined.size() == uninterrupted.history.size());
    for (size_t i = 0; i < joined.size(); ++i) {
      CHECK(joined[i].epoch == uninterrupted.history[i].epoch);
      CHECK(joined[i].phase == uninterrupted.history[i].phase);
      CHECK(joined[i].lr == uninterrupted.history[i].lr);
      CHECK(joined[i].train_loss == uninterrupted.history[i].train_loss);
      if (std::isnan(uninterrupted.history[i].val_loss))
        CHECK(std::isnan(joined[i].val_loss));
      else
        CHECK(joined[i].val_loss == uninterrupted.history[i].val_loss);
    }

    // Best-checkpoint bookkeeping agrees with the uninterrupted run.
    CHECK(part2.best_epoch == uninterrupted.best_epoch);
    CHECK(part2.best_val_rmse_db == uninterrupted.best_val_rmse_db);
    if (part2.best_updated)
      CHECK(hash_params(part2.params, Group::All) ==
            hash_params(uninterrupted.params, Group::All));
    else
      CHECK(hash_params(part2.params, Group::All) ==
            hash_params(part2.final_params, Group::All));
  };

  check_equivalence(1);  // mid-phase-1: optimizer moments must be restored
  check_equivalence(2);  // phase boundary: phase 2 starts a fresh optimizer
  check_equivalence(3);  // mid-phase-2: the scaled backbone group resumes too
}
