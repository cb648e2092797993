#include <doctest.h>
#include <omp.h>

#include <cmath>
#include <numeric>

#include "cdr/error.hpp"
#include "cdr/synthbench.hpp"
#include "cdr/trainer.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace cdr;
using testutil::TempDir;

namespace {

ScorerConfig small_config() {
  ScorerConfig c;
  c.patch_size = 16;
  c.conv_blocks = {{4, 3, 2}, {6, 3, 2}};
  c.hidden = 8;
  return c;
}

ScorerParams jittered(const ScorerConfig& c, std::uint64_t seed) {
  auto p = init_params(c, seed);
  Rng rng(seed + 1000);
  for (auto& v : p.values) v += 0.05 * rng.normal();
  return p;
}

DatasetManifest in_memory(int n, int size, std::uint64_t seed) {
  DatasetManifest m;
  m.name = "mem";
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const std::string id = "m" + std::to_string(i);
    m.records.push_back(std::make_shared<const ImageRecord>(testutil::random_image(size, size, seed + i, id)));
    m.labels[id] = rng.uniform();
  }
  return rescale_mos(std::move(m));
}

}  // namespace

TEST_CASE("l1_loss") {
  const std::vector<double> a{0.1, 0.4, 0.9};
  auto same = l1_loss(a, a);
  CHECK(same.loss == 0.0);
  for (double g : same.grad) CHECK(g == 0.0);

  const std::vector<double> p{0.2, 0.8};
  const std::vector<double> l{0.5, 0.5};
  CHECK(l1_loss(p, l).loss == doctest::Approx(0.3).epsilon(1e-15));

  const std::vector<double> one{1.0};
  const std::vector<double> zero{0.0};
  const auto u = l1_loss(one, zero);
  CHECK(u.loss == 1.0);
  CHECK(u.grad[0] == 1.0);

  CHECK_THROWS_AS(l1_loss(std::vector<double>{}, std::vector<double>{}), DataError);
}

TEST_CASE("fidelity loss") {
  const std::vector<double> q{0.1, 0.5, 0.93};
  CHECK(fidelity_loss(q, q).loss == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(fidelity_pair_loss(1.0, 1e-12) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(fidelity_pair_loss(0.25, 0.75) == doctest::Approx(1.0 - 2.0 * std::sqrt(0.1875)).epsilon(1e-15));
  CHECK(fidelity_pair_loss(0.25, 0.75) == doctest::Approx(0.133975).epsilon(1e-6));

  // Gradient with respect to the model probability.
  const std::vector<double> labels{0.3, 0.8};
  std::vector<double> probs{0.6, 0.4};
  const auto lg = fidelity_loss(labels, probs);
  const auto coords = std::vector<std::size_t>{0, 1};
  const double err = testutil::max_fd_error(probs, lg.grad, coords, [&] { return fidelity_loss(labels, probs).loss; }, 1e-6);
  CHECK(err < 1e-6);

  CHECK_THROWS_AS(fidelity_loss(std::vector<double>{0.5}, std::vector<double>{1.0}), NumericalError);
  CHECK_THROWS_AS(fidelity_loss(std::vector<double>{}, std::vector<double>{}), DataError);
}

TEST_CASE("model_pair_probability") {
  CHECK(model_pair_probability(0.3, 0.3) == 0.5);
  CHECK(model_pair_probability(1.5, 0.5) == doctest::Approx(0.7310585786).epsilon(1e-10));
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double x = 20.0 * rng.normal();
    const double y = 20.0 * rng.normal();
    CHECK(model_pair_probability(x, y) + model_pair_probability(y, x) == doctest::Approx(1.0).epsilon(1e-15));
  }
  CHECK(model_pair_probability(800.0, 0.0) == 1.0);
  CHECK(model_pair_probability(0.0, 800.0) >= 0.0);
}

TEST_CASE("lr_at schedule") {
  TrainConfig c;
  c.epochs = 10;
  c.warmup_epochs = 2;
  const std::int64_t spe = 7;
  CHECK(lr_at(0, spe, c) == c.warmup_start_lr);
  CHECK(lr_at(2 * spe, spe, c) == c.base_lr);
  CHECK(lr_at(10 * spe - 1, spe, c) == doctest::Approx(c.min_lr).epsilon(1e-12));

  // Continuous at the boundary, monotone afterwards, increasing before.
  const double step = (c.base_lr - c.warmup_start_lr) / (2 * spe);
  CHECK(lr_at(2 * spe, spe, c) - lr_at(2 * spe - 1, spe, c) == doctest::Approx(step).epsilon(1e-9));
  for (std::int64_t s = 1; s < 2 * spe; ++s) CHECK(lr_at(s, spe, c) > lr_at(s - 1, spe, c));
  for (std::int64_t s = 2 * spe + 1; s < 10 * spe; ++s) CHECK(lr_at(s, spe, c) <= lr_at(s - 1, spe, c));

  c.warmup_epochs = 0;
  CHECK(lr_at(0, spe, c) == c.base_lr);
}

TEST_CASE("TrainConfig validation") {
  TrainConfig c;
  c.warmup_epochs = c.epochs;
  CHECK_THROWS_AS(c.validate(), DataError);
  c = TrainConfig{};
  c.base_lr = -1e-3;
  CHECK_THROWS_AS(c.validate(), DataError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), DataError);
  CHECK(TrainConfig::published().base_lr == 2e-5);
  CHECK(TrainConfig::published().weight_decay == 5e-4);
}

TEST_CASE("adamw_step") {
  SUBCASE("zero gradient, no decay is a fixed point") {
    std::vector<double> p{0.5, -1.25, 3.0};
    const auto before = p;
    OptimState s(3);
    adamw_step(p, std::vector<double>(3, 0.0), s, 1e-3, 0.0);
    CHECK(p == before);
    CHECK(s.t == 1);
  }
  SUBCASE("zero gradient with decay scales exactly") {
    std::vector<double> p{0.5, -1.25, 3.0, 1e-7};
    const auto before = p;
    OptimState s(4);
    const double lr = 1e-2;
    adamw_step(p, std::vector<double>(4, 0.0), s, lr, 5e-4);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == before[i] * (1.0 - lr * 5e-4));
  }
  SUBCASE("first step with unit gradient moves by about lr") {
    std::vector<double> p{2.0};
    OptimState s(1);
    adamw_step(p, std::vector<double>{1.0}, s, 1e-3, 0.0);
    // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps).
    CHECK(2.0 - p[0] == doctest::Approx(1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("non-finite gradient aborts") {
    std::vector<double> p{1.0, 2.0};
    OptimState s(2);
    CHECK_THROWS_WITH_AS(adamw_step(p, std::vector<double>{0.0, std::nan("")}, s, 1e-3, 0.0),
                         doctest::Contains("parameter 1"), NumericalError);
  }
}

TEST_CASE("batch L1 gradient") {
  const auto params = jittered(small_config(), 3);
  std::vector<Patch> patches;
  std::vector<double> labels;
  Rng rng(9);
  for (int i = 0; i < 6; ++i) {
    patches.push_back(testutil::random_patch(16, 40 + i));
    labels.push_back(rng.uniform());
  }
  const auto lg = batch_l1_gradient(params, patches, labels);
  const auto ref = serial::batch_l1_gradient(params, patches, labels);
  CHECK(lg.loss == ref.loss);
  CHECK(lg.grad == ref.grad);

  auto p = params;
  std::vector<std::size_t> coords(p.values.size());
  std::iota(coords.begin(), coords.end(), 0);
  const double err = testutil::max_fd_error(p.values, lg.grad, coords, [&] {
    std::vector<double> preds;
    for (const auto& patch : patches) preds.push_back(score_patch(p, patch));
    return l1_loss(preds, labels).loss;
  });
  CHECK(err < 1e-4);
}

TEST_CASE("batch pair gradient through both streams") {
  const auto params = jittered(small_config(), 4);
  std::vector<Patch> store;
  for (int i = 0; i < 8; ++i) store.push_back(testutil::random_patch(16, 60 + i));
  std::vector<PairRef> pairs;
  for (int i = 0; i < 4; ++i) pairs.push_back({&store[2 * i], &store[2 * i + 1], 0.2 + 0.15 * i});

  SUBCASE("matches the serial reference at several thread counts") {
    const auto ref = serial::batch_pair_gradient(params, pairs);
    const int saved = omp_get_max_threads();
    for (int t : {1, 2, 4}) {
      omp_set_num_threads(t);
      const auto lg = batch_pair_gradient(params, pairs);
      CHECK(lg.loss == ref.loss);
      CHECK(lg.grad == ref.grad);
    }
    omp_set_num_threads(saved);
  }
  SUBCASE("one pair against finite differences over every parameter") {
    auto p = params;
    const std::vector<PairRef> one{pairs[1]};
    const auto lg = batch_pair_gradient(p, one);
    std::vector<std::size_t> coords(p.values.size());
    std::iota(coords.begin(), coords.end(), 0);
    const double err = testutil::max_fd_error(p.values, lg.grad, coords, [&] {
      const double q = model_pair_probability(score_patch(p, *one[0].x), score_patch(p, *one[0].y));
      return fidelity_pair_loss(one[0].label, q);
    });
    CHECK(err < 1e-4);
  }
  SUBCASE("swapping the pair and its label keeps the loss") {
    std::vector<PairRef> swapped;
    for (const auto& pr : pairs) swapped.push_back({pr.y, pr.x, 1.0 - pr.label});
    CHECK(batch_pair_gradient(params, swapped).loss ==
          doctest::Approx(batch_pair_gradient(params, pairs).loss).epsilon(1e-14));
  }
  SUBCASE("constant scorer with labels at one half") {
    auto p = params;
    for (const auto& slot : p.layout.slots) {
      if (slot.name == "fc2.weight") std::fill_n(p.values.begin() + slot.offset, slot.size, 0.0);
    }
    std::vector<PairRef> halves;
    for (const auto& pr : pairs) halves.push_back({pr.x, pr.y, 0.5});
    const auto lg = batch_pair_gradient(p, halves);
    CHECK(lg.loss == doctest::Approx(0.0).epsilon(1e-15));
    for (double g : lg.grad) CHECK(std::abs(g) < 1e-15);
  }
}

TEST_CASE("train_single") {
  const auto manifest = in_memory(20, 20, 1);
  const Split split = split_dataset(manifest, 2);
  TrainConfig tc;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.seed = 3;

  SUBCASE("zero learning rate leaves the initialisation") {
    tc.base_lr = tc.min_lr = tc.warmup_start_lr = 0.0;
    tc.epochs = 1;
    tc.warmup_epochs = 0;
    const auto r = train_single(manifest, split, small_config(), tc);
    CHECK(r.params.values == init_params(small_config(), derive_seed(tc.seed, "init")).values);
  }
  SUBCASE("same seed twice is bit-identical, different seed is not") {
    const auto a = train_single(manifest, split, small_config(), tc);
    const auto b = train_single(manifest, split, small_config(), tc);
    CHECK(a.params.values == b.params.values);
    CHECK(a.epoch_losses == b.epoch_losses);
    tc.seed = 4;
    CHECK(train_single(manifest, split, small_config(), tc).params.values != a.params.values);
  }
  SUBCASE("thread count does not change the result") {
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const auto a = train_single(manifest, split, small_config(), tc);
    omp_set_num_threads(3);
    const auto b = train_single(manifest, split, small_config(), tc);
    omp_set_num_threads(saved);
    CHECK(a.params.values == b.params.values);
  }
  SUBCASE("logger sees every epoch") {
    std::vector<int> seen;
    train_single(manifest, split, small_config(), tc, [&](int e, double, double) { seen.push_back(e); });
    CHECK(seen == std::vector<int>{1, 2});
  }
  SUBCASE("labels must be rescaled") {
    DatasetManifest raw = manifest;
    raw.rescaled.clear();
    CHECK_THROWS_AS(train_single(raw, split, small_config(), tc), DataError);
  }
}

TEST_CASE("train_single lowers the training loss on a synthetic dataset") {
  TempDir dir;
  const BiasedDatasetConfig dc{"blurry", 200, {DegradationKind::gaussian_blur}, LabelRemap::identity, 5, 24};
  const auto g = gen_biased_dataset(dc, dir.path);
  const DatasetManifest m = rescale_mos(g.manifest);
  const Split split = split_dataset(m, 6);
  ScorerConfig sc = small_config();
  TrainConfig tc;  // desk defaults, shorter budget
  tc.epochs = 8;
  tc.seed = 7;

  auto train_loss = [&](const ScorerParams& p) {
    std::vector<double> preds;
    std::vector<double> labels;
    for (const auto& id : split.train_ids) {
      Rng rng(derive_seed(1, id));
      preds.push_back(predict_image(p, m.record(id), 5, 16, rng));
      labels.push_back(m.rescaled.at(id));
    }
    return l1_loss(preds, labels).loss;
  };
  const double before = train_loss(init_params(sc, derive_seed(tc.seed, "init")));
  const auto r = train_single(m, split, sc, tc);
  const double after = train_loss(r.params);
  CHECK(after < before);
  CHECK(r.epoch_losses.back() < r.epoch_losses.front());
}

TEST_CASE("train_pairwise") {
  std::map<std::string, Patch> store;
  for (int i = 0; i < 10; ++i) store["p" + std::to_string(i)] = testutil::random_patch(16, 300 + i);
  std::vector<PairRow> rows;
  Rng rng(8);
  for (int i = 0; i < 30; ++i) {
    const int x = static_cast<int>(rng.below(10));
    const int y = (x + 1 + static_cast<int>(rng.below(9))) % 10;
    rows.push_back({"p" + std::to_string(x), "p" + std::to_string(y), 0.05 + 0.9 * rng.uniform()});
  }
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.seed = 11;

  SUBCASE("zero learning rate leaves the initialisation") {
    tc.base_lr = tc.min_lr = tc.warmup_start_lr = 0.0;
    const auto r = train_pairwise(rows, store, small_config(), tc);
    CHECK(r.params.values == init_params(small_config(), derive_seed(tc.seed, "init")).values);
  }
  SUBCASE("deterministic") {
    const auto a = train_pairwise(rows, store, small_config(), tc);
    const auto b = train_pairwise(rows, store, small_config(), tc);
    CHECK(a.params.values == b.params.values);
  }
  SUBCASE("bad rows") {
    auto bad = rows;
    bad[0].label = 1.0;
    CHECK_THROWS_AS(train_pairwise(bad, store, small_config(), tc), DataError);
    bad = rows;
    bad[0].y_id = "missing";
    CHECK_THROWS_AS(train_pairwise(bad, store, small_config(), tc), DataError);
  }
}
