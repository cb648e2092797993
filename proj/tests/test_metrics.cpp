#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdr/error.hpp"
#include "cdr/metrics.hpp"
#include "cdr/rng.hpp"
#include "test_util.hpp"

using namespace cdr;

namespace {

// Two-pass textbook Pearson, kept deliberately naive.
double pearson_two_pass(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> normals(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

const LogisticParams kBeta{{1.0, 4.0, 0.5, 0.1, 0.2}};

}  // namespace

TEST_CASE("average ranks handle ties") {
  CHECK(average_ranks(std::vector<double>{10, 30, 20}) == std::vector<double>{1, 3, 2});
  CHECK(average_ranks(std::vector<double>{5, 5, 1, 5}) == std::vector<double>{3, 3, 1, 3});
  CHECK(average_ranks(std::vector<double>{2, 2}) == std::vector<double>{1.5, 1.5});
}

TEST_CASE("srcc") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  CHECK(srcc(x, std::vector<double>{2, 4, 8, 16, 32}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(srcc(x, std::vector<double>{9, 7, 5, 3, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(srcc(std::vector<double>{1, 2, 3}, std::vector<double>{2, 1, 3}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(srcc_closed_form(std::vector<double>{1, 2, 3}, std::vector<double>{2, 1, 3}) == doctest::Approx(0.5));

  // Agrees with the closed form when there are no ties.
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = normals(60, seed);
    const auto b = normals(60, seed + 500);
    CHECK(std::abs(srcc(a, b) - srcc_closed_form(a, b)) < 1e-12);
  }

  // Invariant under strictly increasing transforms of either side.
  const auto a = normals(80, 1);
  const auto b = normals(80, 2);
  std::vector<double> ea(a.size()), cb(b.size());
  std::transform(a.begin(), a.end(), ea.begin(), [](double v) { return std::exp(v); });
  std::transform(b.begin(), b.end(), cb.begin(), [](double v) { return v * v * v + 2 * v; });
  CHECK(srcc(ea, cb) == doctest::Approx(srcc(a, b)).epsilon(1e-12));

  CHECK_THROWS_AS(srcc(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DataError);
  CHECK_THROWS_AS(srcc(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), DataError);
}

TEST_CASE("pearson") {
  const std::vector<double> x{1, 2, 3, 4};
  std::vector<double> y(4), z(4);
  std::transform(x.begin(), x.end(), y.begin(), [](double v) { return 2 * v + 3; });
  std::transform(x.begin(), x.end(), z.begin(), [](double v) { return -v; });
  CHECK(pearson(x, y) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(x, z) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2}) == doctest::Approx(0.5).epsilon(1e-15));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = normals(100, seed);
    const auto b = normals(100, seed + 77);
    CHECK(std::abs(pearson(a, b) - pearson_two_pass(a, b)) < 1e-12);
  }
  CHECK_THROWS_WITH_AS(pearson(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}),
                       doctest::Contains("zero variance"), DataError);
}

TEST_CASE("logistic_map closed forms") {
  CHECK(logistic_map(0.5, kBeta) == doctest::Approx(0.1 * 0.5 + 0.2).epsilon(1e-15));
  LogisticParams affine{{0.0, 3.0, 1.0, 0.7, -0.2}};
  CHECK(logistic_map(2.0, affine) == doctest::Approx(0.7 * 2.0 - 0.2).epsilon(1e-15));
  CHECK(logistic_map(0.0, LogisticParams{{2.0, 1.0, 0.0, 0.0, 0.0}}) == 0.0);
}

TEST_CASE("fit_logistic recovers an exact logistic") {
  Rng rng(4);
  std::vector<double> s(200), mos(200);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    mos[i] = logistic_map(s[i], kBeta);
  }
  FitTrace trace;
  const LogisticParams fit = fit_logistic(s, mos, &trace);
  double sse = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) sse += std::pow(logistic_map(s[i], fit) - mos[i], 2);
  CHECK(std::sqrt(sse / s.size()) < 1e-6);
  CHECK(plcc(s, mos).plcc > 1.0 - 1e-9);
  // Accepted steps never increase the error.
  for (std::size_t i = 1; i < trace.accepted_sse.size(); ++i) CHECK(trace.accepted_sse[i] <= trace.accepted_sse[i - 1]);
}

TEST_CASE("plcc") {
  const auto p = normals(150, 8);
  std::vector<double> mos(p.size());
  std::transform(p.begin(), p.end(), mos.begin(), [](double v) { return 3 * v + 1; });
  CHECK(plcc(p, mos).plcc == doctest::Approx(1.0).epsilon(1e-12));

  // Affine changes of the predictions are absorbed by the fit.
  auto noisy = mos;
  Rng rng(2);
  for (auto& v : noisy) v = std::tanh(v / 3) + 0.2 * rng.normal();
  std::vector<double> moved(p.size());
  std::transform(p.begin(), p.end(), moved.begin(), [](double v) { return 2 * v + 1; });
  CHECK(std::abs(plcc(p, noisy).plcc - plcc(moved, noisy).plcc) < 1e-6);

  CHECK_THROWS_AS(plcc(std::vector<double>(10, 0.3), normals(10, 1)), DataError);
}

TEST_CASE("post-fit plcc ignores affine changes of the predictions") {
  // Small noisy samples whose best logistic sits on a flat ridge, where the
  // fit stops on the iteration cap rather than on convergence.
  cdr::Rng rng(17);
  for (int t = 0; t < 40; ++t) {
    const std::size_t n = 7 + rng.below(40);
    std::vector<double> x(n), mos(n), moved(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      mos[i] = 1.0 / (1.0 + std::exp(-2.0 * x[i])) + 0.05 * rng.normal();
      moved[i] = 2.0 * x[i] + 1.0;
    }
    CHECK(std::abs(plcc(x, mos).plcc - plcc(moved, mos).plcc) < 1e-9);
  }
}

TEST_CASE("plcc of unrelated data stays small") {
  const auto p = normals(1000, 31);
  auto mos = normals(1000, 32);
  CHECK(std::abs(plcc(p, mos).plcc) < 0.15);
}

TEST_CASE("evaluate_predictions fills the report") {
  const auto p = normals(40, 3);
  std::vector<double> t(p.size());
  std::transform(p.begin(), p.end(), t.begin(), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  const EvalReport r = evaluate_predictions(p, t);
  CHECK(r.n == 40);
  CHECK(r.srcc == doctest::Approx(1.0));
  CHECK(r.plcc > 0.999);
  CHECK(r.raw_pearson < r.plcc);
  const EvalReport back = EvalReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(back.srcc == r.srcc);
  CHECK(back.betas.beta == r.betas.beta);
}

namespace {
DatasetManifest labelled(int n) {
  DatasetManifest m;
  m.name = "rs";
  Rng rng(12);
  for (int i = 0; i < n; ++i) {
    const std::string id = "r" + std::to_string(i);
    m.records.push_back(std::make_shared<const ImageRecord>(testutil::constant_image(2, 2, 0.0, id)));
    m.labels[id] = rng.uniform();
  }
  return rescale_mos(std::move(m));
}
}  // namespace

TEST_CASE("repeated_split_eval") {
  const auto m = labelled(50);
  auto perfect = [](const DatasetManifest& d, const Split& s) {
    std::vector<double> out;
    for (const auto& id : s.test_ids) out.push_back(d.rescaled.at(id));
    return out;
  };

  SUBCASE("one split is its own median") {
    const auto r = repeated_split_eval(m, perfect, 1, 5);
    REQUIRE(r.runs.size() == 1);
    CHECK(r.median.srcc == r.runs[0].srcc);
    CHECK(r.median.plcc == r.runs[0].plcc);
  }
  SUBCASE("deterministic") {
    const auto a = repeated_split_eval(m, perfect, 3, 5);
    const auto b = repeated_split_eval(m, perfect, 3, 5);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.runs[i].seed == b.runs[i].seed);
    CHECK(a.median.srcc == b.median.srcc);
  }
  SUBCASE("median of three") {
    // Run 0 agrees, run 1 disagrees, run 2 is partly scrambled: the median is run 2.
    int call = 0;
    auto staged = [&](const DatasetManifest& d, const Split& s) {
      std::vector<double> out;
      for (const auto& id : s.test_ids) out.push_back(d.rescaled.at(id));
      if (call == 1) {
        for (auto& v : out) v = -v;
      } else if (call == 2) {
        std::swap(out[0], out[5]);
        std::swap(out[2], out[7]);
      }
      ++call;
      return out;
    };
    const auto r = repeated_split_eval(m, staged, 3, 9);
    CHECK(r.runs[0].srcc == doctest::Approx(1.0));
    CHECK(r.runs[1].srcc == doctest::Approx(-1.0));
    CHECK(r.median.srcc == r.runs[2].srcc);
    CHECK(r.median.srcc < 1.0);
  }
}

TEST_CASE("cross_dataset_matrix") {
  const auto a = labelled(30);
  const DatasetManifest b = labelled(25);
  const MatrixDataset da{"rs", &a, a.rescaled};
  const MatrixModel seeded{"seeded", "rs", [](const ImageRecord&, std::uint64_t seed) {
                             return static_cast<double>(seed % 1000);
                           }};

  SUBCASE("1 x 1 equals a direct evaluation") {
    const std::vector<MatrixModel> models{seeded};
    const std::vector<MatrixDataset> sets{da};
    const CrossMatrix cm = cross_dataset_matrix(models, sets, 3);
    std::vector<double> preds;
    std::vector<double> targets;
    for (const auto& r : a.records) {
      preds.push_back(static_cast<double>(derive_seed(3, r->id) % 1000));
      targets.push_back(a.rescaled.at(r->id));
    }
    const EvalReport direct = evaluate_predictions(preds, targets);
    CHECK(cm.cells[0][0].srcc == direct.srcc);
    CHECK(cm.cells[0][0].plcc == direct.plcc);
    CHECK(cm.cells[0][0].trained_on == "rs");
  }
  SUBCASE("oracle row and bookkeeping") {
    // Ids collide between the two sets, so give b distinct ids.
    DatasetManifest b2;
    b2.name = "other";
    for (const auto& r : b.records) {
      auto copy = *r;
      copy.id = "o" + r->id;
      b2.records.push_back(std::make_shared<const ImageRecord>(copy));
      b2.labels[copy.id] = b.labels.at(r->id);
    }
    b2 = rescale_mos(std::move(b2));
    const MatrixDataset db2{"other", &b2, b2.rescaled};
    const MatrixModel truth{"oracle", "", [&](const ImageRecord& r, std::uint64_t) {
                              return a.rescaled.contains(r.id) ? a.rescaled.at(r.id) : b2.rescaled.at(r.id);
                            }};
    const std::vector<MatrixModel> models{seeded, truth};
    const std::vector<MatrixDataset> sets{da, db2};
    const CrossMatrix cm = cross_dataset_matrix(models, sets, 3);
    REQUIRE(cm.cells.size() == 2);
    REQUIRE(cm.cells[0].size() == 2);
    for (const auto& cell : cm.cells[1]) CHECK(cell.srcc == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cm.mean_srcc(1) == doctest::Approx(1.0));
    CHECK(cm.mean_srcc(0, "rs") == cm.cells[0][1].srcc);

    const std::string csv = cm.to_csv();
    CHECK(csv.rfind("model,trained_on,rs_SRCC,rs_PLCC,other_SRCC,other_PLCC\n", 0) == 0);
    CHECK(csv.find("oracle,,1.000000,1.000000,1.000000,1.000000") != std::string::npos);

    const CrossMatrix back = CrossMatrix::from_json(nlohmann::json::parse(cm.to_json().dump()));
    CHECK(back.datasets == cm.datasets);
    CHECK(back.cells[0][1].srcc == cm.cells[0][1].srcc);
  }
}
