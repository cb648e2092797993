#include "cdr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cdr/error.hpp"
#include "cdr/io.hpp"

namespace cdr {

namespace {

constexpr int kMaxIterations = 200;
constexpr double kRelativeTolerance = 1e-10;
constexpr double kInitialDamping = 1e-3;

void check_pair(std::span<const double> x, std::span<const double> y, std::size_t min_n) {
  if (x.size() != y.size()) throw DataError("correlation inputs differ in length");
  if (x.size() < min_n) throw DataError("need at least " + std::to_string(min_n) + " samples");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw DataError("non-finite value in correlation input");
  }
}

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Solves the 5x5 system a x = b by Gaussian elimination with partial pivoting.
bool solve5(std::array<std::array<double, 5>, 5> a, std::array<double, 5> b, std::array<double, 5>& x) {
  for (int col = 0; col < 5; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 5; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    }
    if (!(std::abs(a[pivot][col]) > 0.0)) return false;
    std::swap(a[col], a[pivot]);
    std::swap(b[col], b[pivot]);
    for (int r = col + 1; r < 5; ++r) {
      const double f = a[r][col] / a[col][col];
      for (int c = col; c < 5; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  for (int r = 4; r >= 0; --r) {
    double acc = b[r];
    for (int c = r + 1; c < 5; ++c) acc -= a[r][c] * x[c];
    x[r] = acc / a[r][r];
  }
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

// 1 / (1 + exp(z)) without overflow.
double inv_one_plus_exp(double z) {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(z));
}

double sse(std::span<const double> x, std::span<const double> y, const LogisticParams& p) {
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = logistic_map(x[i], p) - y[i];
    total += r * r;
  }
  return total;
}

LogisticParams affine_fit(std::span<const double> x, std::span<const double> y, double b2, double b3) {
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  LogisticParams p;
  const double slope = sxy / sxx;
  p.beta = {0.0, b2, b3, slope, my - slope * mx};
  return p;
}

}  // namespace

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model;
  j["trained_on"] = trained_on;
  j["dataset"] = dataset;
  j["n"] = n;
  j["srcc"] = srcc;
  j["plcc"] = plcc;
  j["raw_pearson"] = raw_pearson;
  j["betas"] = betas.beta;
  j["seed"] = seed;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.model = j.at("model").get<std::string>();
  r.trained_on = j.at("trained_on").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.n = j.at("n").get<std::size_t>();
  r.srcc = j.at("srcc").get<double>();
  r.plcc = j.at("plcc").get<double>();
  r.raw_pearson = j.at("raw_pearson").get<double>();
  r.betas.beta = j.at("betas").get<std::array<double, 5>>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    // Positions i..j-1 share the mean of ranks i+1..j.
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 3);
  const double mx = mean(x);
  const double my = mean(y);
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  auto constant = [](std::span<const double> v) {
    return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
  };
  if (!(sxx > 0.0) || !(syy > 0.0) || constant(x) || constant(y)) {
    throw DataError("zero variance: correlation undefined");
  }
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

double srcc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 3);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

double srcc_closed_form(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y, 3);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  double d2 = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  const double n = static_cast<double>(rx.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

double logistic_map(double s, const LogisticParams& p) {
  const auto& b = p.beta;
  return b[0] * (0.5 - inv_one_plus_exp(b[1] * (s - b[2]))) + b[3] * s + b[4];
}

LogisticParams fit_logistic(std::span<const double> x, std::span<const double> y, FitTrace* trace) {
  check_pair(x, y, 5);
  const double mx = mean(x);
  double var = 0.0;
  for (double v : x) var += (v - mx) * (v - mx);
  var /= static_cast<double>(x.size());
  const auto [xlo, xhi] = std::minmax_element(x.begin(), x.end());
  // Rounding in the mean can leave a constant input with a tiny positive variance.
  if (*xlo == *xhi || !(var > 0.0)) throw DataError("zero variance in predictions: cannot fit logistic map");
  const double sd = std::sqrt(var);
  const auto [ylo, yhi] = std::minmax_element(y.begin(), y.end());
  double raw = 0.0;
  try {
    raw = pearson(x, y);
  } catch (const DataError&) {
    raw = 0.0;
  }
  const double sign = raw < 0.0 ? -1.0 : 1.0;

  // The fit runs on standardized predictions, so an affine change of the
  // predictions leaves the iterates unchanged. The warm start below is the
  // usual one expressed in those coordinates.
  std::vector<double> zs(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) zs[i] = (x[i] - mx) / sd;
  const std::span<const double> z(zs);
  LogisticParams p;
  p.beta = {*yhi - *ylo, sign * 4.0, 0.0, 0.0, mean(y)};
  double current = sse(z, y, p);
  FitTrace local;
  FitTrace& t = trace ? *trace : local;
  t = FitTrace{};
  t.accepted_sse.push_back(current);

  double lambda = kInitialDamping;
  std::vector<std::array<double, 5>> jac(x.size());
  std::vector<double> resid(x.size());
  for (int iter = 0; iter < kMaxIterations; ++iter) {
    t.iterations = iter + 1;
    const auto& b = p.beta;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double s = inv_one_plus_exp(b[1] * (z[i] - b[2]));
      const double dz = b[0] * s * (1.0 - s);  // d f / d z, z = b2 (x - b3)
      jac[i] = {0.5 - s, dz * (z[i] - b[2]), -dz * b[1], z[i], 1.0};
      resid[i] = logistic_map(z[i], p) - y[i];
    }
    std::array<std::array<double, 5>, 5> jtj{};
    std::array<double, 5> jtr{};
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (int a = 0; a < 5; ++a) {
        jtr[a] += jac[i][a] * resid[i];
        for (int c = 0; c < 5; ++c) jtj[a][c] += jac[i][a] * jac[i][c];
      }
    }
    bool accepted = false;
    while (!accepted && lambda < 1e16) {
      auto damped = jtj;
      for (int a = 0; a < 5; ++a) damped[a][a] += lambda * std::max(jtj[a][a], 1e-12);
      std::array<double, 5> step{};
      std::array<double, 5> rhs{};
      for (int a = 0; a < 5; ++a) rhs[a] = -jtr[a];
      if (solve5(damped, rhs, step)) {
        LogisticParams candidate = p;
        for (int a = 0; a < 5; ++a) candidate.beta[a] += step[a];
        const double next = sse(z, y, candidate);
        if (std::isfinite(next) && next < current) {
          const double improvement = (current - next) / std::max(current, 1e-300);
          p = candidate;
          current = next;
          lambda = std::max(lambda / 10.0, 1e-12);
          t.accepted_sse.push_back(current);
          accepted = true;
          if (improvement < kRelativeTolerance) iter = kMaxIterations;
          break;
        }
      }
      lambda *= 10.0;
    }
    if (!accepted) break;  // no descent direction left at any damping
  }

  // Back to the original prediction scale.
  const auto bz = p.beta;
  p.beta = {bz[0], bz[1] / sd, mx + sd * bz[2], bz[3] / sd, bz[4] - bz[3] * mx / sd};
  current = sse(x, y, p);

  const LogisticParams affine = affine_fit(x, y, p.beta[1] != 0.0 ? p.beta[1] : 1.0, p.beta[2]);
  const double affine_sse = sse(x, y, affine);
  const bool fit_ok = std::isfinite(current) && std::all_of(p.beta.begin(), p.beta.end(), [](double v) {
    return std::isfinite(v);
  });
  if (!fit_ok || !(current < affine_sse)) {
    if (!std::isfinite(affine_sse)) throw NumericalError("logistic fit failed and the affine fallback is degenerate");
    t.used_affine_fallback = true;
    return affine;
  }
  return p;
}

PlccResult plcc(std::span<const double> preds, std::span<const double> mos) {
  PlccResult out;
  out.betas = fit_logistic(preds, mos);
  std::vector<double> mapped(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) mapped[i] = logistic_map(preds[i], out.betas);
  out.plcc = pearson(mapped, mos);
  return out;
}

EvalReport evaluate_predictions(std::span<const double> preds, std::span<const double> targets) {
  EvalReport r;
  r.n = preds.size();
  r.srcc = srcc(preds, targets);
  r.raw_pearson = pearson(preds, targets);
  const PlccResult p = plcc(preds, targets);
  r.plcc = p.plcc;
  r.betas = p.betas;
  return r;
}

RepeatedSplitResult repeated_split_eval(const DatasetManifest& manifest, const SplitTrainFn& train_fn, int k,
                                        std::uint64_t base_seed) {
  if (k < 1) throw DataError("need at least one split");
  if (manifest.rescaled.empty()) throw DataError("repeated split evaluation needs rescaled labels");
  RepeatedSplitResult result;
  for (int r = 0; r < k; ++r) {
    const Split split = split_dataset(manifest, derive_seed(base_seed, "split", static_cast<std::uint64_t>(r)));
    const std::vector<double> preds = train_fn(manifest, split);
    if (preds.size() != split.test_ids.size()) throw DataError("train_fn returned the wrong number of predictions");
    std::vector<double> labels;
    for (const auto& id : split.test_ids) labels.push_back(manifest.rescaled.at(id));
    EvalReport rep = evaluate_predictions(preds, labels);
    rep.dataset = manifest.name;
    rep.trained_on = manifest.name;
    rep.seed = split.seed;
    result.runs.push_back(std::move(rep));
  }
  auto median_index = [&](auto key) {
    std::vector<std::size_t> order(result.runs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return key(result.runs[a]) < key(result.runs[b]); });
    return order;
  };
  auto median_value = [&](const std::vector<std::size_t>& order, auto key) {
    const std::size_t n = order.size();
    if (n % 2 == 1) return key(result.runs[order[n / 2]]);
    return 0.5 * (key(result.runs[order[n / 2 - 1]]) + key(result.runs[order[n / 2]]));
  };
  const auto by_srcc = median_index([](const EvalReport& r) { return r.srcc; });
  const auto by_plcc = median_index([](const EvalReport& r) { return r.plcc; });
  result.median = result.runs[by_plcc[(by_plcc.size() - 1) / 2]];
  result.median.srcc = median_value(by_srcc, [](const EvalReport& r) { return r.srcc; });
  result.median.plcc = median_value(by_plcc, [](const EvalReport& r) { return r.plcc; });
  result.median.seed = base_seed;
  return result;
}

nlohmann::ordered_json CrossMatrix::to_json() const {
  nlohmann::ordered_json j;
  j["datasets"] = datasets;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : cells) {
    nlohmann::ordered_json r;
    r["model"] = row.empty() ? "" : row.front().model;
    r["trained_on"] = row.empty() ? "" : row.front().trained_on;
    r["cells"] = nlohmann::ordered_json::array();
    for (const auto& cell : row) r["cells"].push_back(cell.to_json());
    j["rows"].push_back(std::move(r));
  }
  return j;
}

CrossMatrix CrossMatrix::from_json(const nlohmann::json& j) {
  CrossMatrix m;
  m.datasets = j.at("datasets").get<std::vector<std::string>>();
  for (const auto& row : j.at("rows")) {
    std::vector<EvalReport> cells;
    for (const auto& c : row.at("cells")) cells.push_back(EvalReport::from_json(c));
    m.cells.push_back(std::move(cells));
  }
  return m;
}

std::string CrossMatrix::to_csv() const {
  std::ostringstream out;
  out << "model,trained_on";
  for (const auto& d : datasets) out << ',' << d << "_SRCC," << d << "_PLCC";
  out << '\n';
  for (const auto& row : cells) {
    out << (row.empty() ? "" : row.front().model) << ',' << (row.empty() ? "" : row.front().trained_on);
    for (const auto& cell : row) out << ',' << format_fixed(cell.srcc, 6) << ',' << format_fixed(cell.plcc, 6);
    out << '\n';
  }
  return out.str();
}

double CrossMatrix::mean_srcc(std::size_t row, const std::string& exclude) const {
  double total = 0.0;
  int count = 0;
  for (const auto& cell : cells.at(row)) {
    if (!exclude.empty() && cell.dataset == exclude) continue;
    total += cell.srcc;
    ++count;
  }
  return count ? total / count : 0.0;
}

CrossMatrix cross_dataset_matrix(std::span<const MatrixModel> models, std::span<const MatrixDataset> datasets,
                                 std::uint64_t seed) {
  CrossMatrix matrix;
  for (const auto& d : datasets) matrix.datasets.push_back(d.name);
  matrix.cells.assign(models.size(), std::vector<EvalReport>(datasets.size()));
  for (std::size_t di = 0; di < datasets.size(); ++di) {
    const MatrixDataset& d = datasets[di];
    if (!d.manifest) throw DataError("dataset " + d.name + " has no manifest");
    const auto& records = d.manifest->records;
    std::vector<double> targets;
    for (const auto& r : records) {
      const auto it = d.targets.find(r->id);
      if (it == d.targets.end()) throw DataError("no evaluation target for " + r->id + " in " + d.name);
      targets.push_back(it->second);
    }
    for (std::size_t mi = 0; mi < models.size(); ++mi) {
      std::vector<double> preds(records.size());
      const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(records.size());
#pragma omp parallel for schedule(dynamic)
      for (std::ptrdiff_t i = 0; i < n; ++i) {
        preds[i] = models[mi].predict(*records[i], derive_seed(seed, records[i]->id));
      }
      EvalReport rep = evaluate_predictions(preds, targets);
      rep.model = models[mi].name;
      rep.trained_on = models[mi].trained_on;
      rep.dataset = d.name;
      rep.seed = seed;
      matrix.cells[mi][di] = std::move(rep);
    }
  }
  return matrix;
}

}  // namespace cdr
