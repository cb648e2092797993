// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any failed. Usage: acceptance <work dir>
#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "../gradcheck.hpp"
#include "cdr/error.hpp"
#include "cdr/harness.hpp"
#include "cdr/io.hpp"
#include "cdr/metrics.hpp"
#include "cdr/pseudolabel.hpp"
#include "cdr/rng.hpp"
#include "cdr/scorer.hpp"
#include "cdr/trainer.hpp"

using namespace cdr;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int n, const Outcome& o) {
  std::printf("%s criterion %d:%s\n", o.pass ? "PASS" : "FAIL", n, o.detail.str().c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

Patch random_patch(int size, Rng& rng) {
  Patch p{size, 1, std::vector<double>(static_cast<std::size_t>(size) * size), "p", false};
  for (auto& v : p.pixels) v = rng.uniform();
  return p;
}

ScorerConfig random_config(Rng& rng) {
  for (;;) {
    ScorerConfig c;
    c.patch_size = 12 + 4 * static_cast<int>(rng.below(3));
    c.conv_blocks.clear();
    const int blocks = 1 + static_cast<int>(rng.below(3));
    for (int b = 0; b < blocks; ++b)
      c.conv_blocks.push_back({2 + static_cast<int>(rng.below(5)), 3, 1 + static_cast<int>(rng.below(2))});
    c.hidden = 4 + static_cast<int>(rng.below(9));
    try {
      c.validate();
      return c;
    } catch (const Error&) {
    }
  }
}

// He init plus jitter so biases are not exactly zero and few units sit on a kink.
ScorerParams jittered(const ScorerConfig& c, Rng& rng) {
  auto p = init_params(c, rng.next());
  for (auto& v : p.values) v += 0.05 * rng.normal();
  return p;
}

// Loss value plus the sign of every ReLU input it went through. Central
// differences are only meaningful when no unit changes side within the
// stencil, so the pattern is compared across p - h, p and p + h.
struct Probe {
  double loss = 0.0;
  std::vector<bool> active;
};

void add_pattern(const ForwardTrace& t, std::vector<bool>& out) {
  for (const auto& block : t.conv_pre)
    for (double v : block) out.push_back(v > 0.0);
  for (double v : t.hidden_pre) out.push_back(v > 0.0);
}

struct FdStats {
  double worst = 0.0;      // at h = 1e-4 on kink-free stencils
  double worst_fine = 0.0; // at a smaller step where the 1e-4 stencil crossed a kink
  std::size_t checked = 0;
  std::size_t crossed = 0;
  std::size_t unresolved = 0;
};

void fd_check(std::vector<double>& values, std::span<const double> grad, const std::function<Probe()>& f,
              FdStats& stats) {
  const Probe base = f();
  auto central = [&](std::size_t i, double h, bool& kink) {
    const double saved = values[i];
    values[i] = saved + h;
    const Probe up = f();
    values[i] = saved - h;
    const Probe down = f();
    values[i] = saved;
    kink = up.active != base.active || down.active != base.active;
    return (up.loss - down.loss) / (2.0 * h);
  };
  for (std::size_t i = 0; i < values.size(); ++i) {
    ++stats.checked;
    bool kink = false;
    const double fd = central(i, 1e-4, kink);
    if (!kink) {
      stats.worst = std::max(stats.worst, testutil::relative_error(grad[i], fd));
      continue;
    }
    ++stats.crossed;
    // Largest smaller step whose stencil stays on one side of every kink.
    for (double h : {1e-5, 1e-6, 1e-7}) {
      const double fine = central(i, h, kink);
      if (!kink) {
        stats.worst_fine = std::max(stats.worst_fine, testutil::relative_error(grad[i], fine));
        break;
      }
    }
    if (kink) ++stats.unresolved;
  }
}

void criterion1() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(derive_seed(1, "gradient-oracle"));
  FdStats l1_stats, pair_stats;
  for (int cfg = 0; cfg < 5; ++cfg) {
    const auto config = random_config(rng);
    auto params = jittered(config, rng);

    // (a) L1 batch loss. Labels sit well away from the predictions so the
    // absolute value is differentiable at every probed point.
    std::vector<Patch> patches;
    std::vector<double> labels;
    for (int i = 0; i < 4; ++i) {
      patches.push_back(random_patch(config.patch_size, rng));
      const double s = score_patch(params, patches.back());
      labels.push_back(s + (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.2 + rng.uniform()));
    }
    const auto l1 = batch_l1_gradient(params, patches, labels);
    fd_check(params.values, l1.grad, [&] {
      Probe pr;
      std::vector<double> preds;
      for (const auto& p : patches) {
        const auto fw = forward(params, p);
        preds.push_back(fw.score);
        add_pattern(fw.trace, pr.active);
      }
      pr.loss = l1_loss(preds, labels).loss;
      return pr;
    }, l1_stats);

    // (b) fidelity loss through both streams of the shared scorer.
    std::vector<Patch> store;
    for (int i = 0; i < 6; ++i) store.push_back(random_patch(config.patch_size, rng));
    std::vector<PairRef> pairs;
    for (int i = 0; i < 3; ++i) pairs.push_back({&store[2 * i], &store[2 * i + 1], 0.05 + 0.9 * rng.uniform()});
    const auto pg = batch_pair_gradient(params, pairs);
    fd_check(params.values, pg.grad, [&] {
      Probe pr;
      std::vector<double> probs, targets;
      for (const auto& pair : pairs) {
        const auto fx = forward(params, *pair.x);
        const auto fy = forward(params, *pair.y);
        add_pattern(fx.trace, pr.active);
        add_pattern(fy.trace, pr.active);
        probs.push_back(model_pair_probability(fx.score, fy.score));
        targets.push_back(pair.label);
      }
      pr.loss = fidelity_loss(targets, probs).loss;
      return pr;
    }, pair_stats);
  }
  const double secs = seconds_since(t0);
  for (const auto* st : {&l1_stats, &pair_stats}) {
    o.detail << (st == &l1_stats ? " L1: " : " pair: ") << st->checked << " coords, max rel err " << st->worst
             << " (h=1e-4); " << st->crossed << " stencils crossed a ReLU kink, max rel err " << st->worst_fine
             << " at a smaller kink-free step;";
  }
  o.detail << " " << secs << " s";
  o.require(l1_stats.worst < 1e-4 && pair_stats.worst < 1e-4, "relative error < 1e-4 at h=1e-4");
  o.require(l1_stats.worst_fine < 1e-4 && pair_stats.worst_fine < 1e-4, "kink-crossing coordinates < 1e-4 at a smaller step");
  o.require(l1_stats.unresolved + pair_stats.unresolved == 0, "every coordinate checked");
  // Kink crossings should be the exception, not the rule.
  o.require(l1_stats.crossed + pair_stats.crossed < (l1_stats.checked + pair_stats.checked) / 10, "< 10% kink stencils");
  o.require(secs < 60.0, "runtime < 60 s");
  report(1, o);
}

void criterion2() {
  Outcome o;
  double lo = 1.0, hi = 0.0, worst_sym = 0.0;
  bool zero_iff_equal = true;
  for (int i = 0; i <= 100; ++i) {
    for (int j = 0; j <= 100; ++j) {
      const double ph = 0.01 + 0.98 * i / 100.0;
      const double p = 0.01 + 0.98 * j / 100.0;
      const double l = fidelity_pair_loss(ph, p);
      lo = std::min(lo, l);
      hi = std::max(hi, l);
      worst_sym = std::max(worst_sym, std::abs(l - fidelity_pair_loss(p, ph)));
      const bool is_zero = std::abs(l) < 1e-12;
      if (is_zero != (i == j)) zero_iff_equal = false;
    }
  }
  double worst_diag = 0.0;
  for (double x : {0.01, 0.1, 0.3, 0.5, 0.77, 0.99}) worst_diag = std::max(worst_diag, std::abs(fidelity_pair_loss(x, x)));
  const double spot = fidelity_pair_loss(0.25, 0.75);
  const double closed = 1.0 - 2.0 * std::sqrt(0.25 * 0.75);
  o.detail << " range [" << lo << ", " << hi << "], max asymmetry " << worst_sym << ", L(0.25,0.75)=" << spot;
  o.require(lo >= 0.0 && hi <= 1.0, "loss within [0,1]");
  o.require(zero_iff_equal, "zero iff equal");
  o.require(worst_sym == 0.0 || worst_sym < 1e-15, "symmetric");
  o.require(worst_diag < 1e-12, "0 on the diagonal");
  o.require(std::abs(spot - closed) < 1e-15 && std::abs(spot - 0.133975) < 1e-6, "spot value 0.133975");
  report(2, o);
}

double two_pass_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

void criterion3() {
  Outcome o;
  Rng rng(derive_seed(1, "metric-oracles"));
  double d_srcc = 0, d_pearson = 0, d_mono = 0, d_plcc = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 5 + rng.below(196);
    std::vector<double> x(n), y(n);
    // Continuous draws: ties have probability zero, but check anyway.
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.6 * x[i] + rng.normal();
    }
    auto sx = x, sy = y;
    std::sort(sx.begin(), sx.end());
    std::sort(sy.begin(), sy.end());
    if (std::adjacent_find(sx.begin(), sx.end()) != sx.end() || std::adjacent_find(sy.begin(), sy.end()) != sy.end())
      continue;
    const double s = srcc(x, y);
    d_srcc = std::max(d_srcc, std::abs(s - srcc_closed_form(x, y)));
    d_pearson = std::max(d_pearson, std::abs(pearson(x, y) - two_pass_pearson(x, y)));

    std::vector<double> fx(n), gy(n);
    for (std::size_t i = 0; i < n; ++i) {
      fx[i] = std::exp(x[i]) + x[i] * x[i] * x[i];
      gy[i] = std::atan(y[i]);
    }
    d_mono = std::max(d_mono, std::abs(srcc(fx, gy) - s));

    if (t % 10 == 0) {
      // Logistic-looking targets for the post-fit PLCC check.
      std::vector<double> mos(n), moved(n);
      for (std::size_t i = 0; i < n; ++i) {
        mos[i] = 1.0 / (1.0 + std::exp(-2.0 * x[i])) + 0.05 * rng.normal();
        moved[i] = 2.0 * x[i] + 1.0;
      }
      d_plcc = std::max(d_plcc, std::abs(plcc(x, mos).plcc - plcc(moved, mos).plcc));
    }
  }
  o.detail << " max |dSRCC|=" << d_srcc << " |dPearson|=" << d_pearson << " |dMonotone|=" << d_mono
           << " |dPLCC|=" << d_plcc;
  o.require(d_srcc < 1e-12, "SRCC vs closed form < 1e-12");
  o.require(d_pearson < 1e-12, "Pearson vs two-pass < 1e-12");
  o.require(d_mono < 1e-12, "SRCC monotone invariance");
  o.require(d_plcc < 1e-6, "PLCC invariance under 2x+1 < 1e-6");
  report(3, o);
}

void criterion4() {
  Outcome o;
  const auto t0 = Clock::now();
  const LogisticParams truth{{1.0, 4.0, 0.5, 0.1, 0.2}};
  Rng rng(derive_seed(1, "logistic-recovery"));
  std::vector<double> s(200), y(200), noisy(200);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i] = rng.uniform();
    y[i] = logistic_map(s[i], truth);
    noisy[i] = y[i] + 0.01 * rng.normal();
  }
  const auto fit = fit_logistic(s, y);
  double sse = 0;
  for (std::size_t i = 0; i < s.size(); ++i) sse += std::pow(logistic_map(s[i], fit) - y[i], 2);
  const double rms = std::sqrt(sse / static_cast<double>(s.size()));
  const double clean = plcc(s, y).plcc;
  const double with_noise = plcc(s, noisy).plcc;
  const double secs = seconds_since(t0);
  o.detail << " RMS=" << rms << " PLCC=" << clean << " noisy PLCC=" << with_noise << "; " << secs << " s";
  o.require(rms < 1e-6, "residual RMS < 1e-6");
  o.require(clean > 0.999999, "PLCC > 0.999999");
  o.require(with_noise > 0.995, "noisy PLCC > 0.995");
  o.require(secs < 5.0, "runtime < 5 s");
  report(4, o);
}

void criterion5() {
  Outcome o;
  Rng rng(derive_seed(1, "pseudo-labels"));
  const double ulp = std::numeric_limits<double>::epsilon();
  double worst_sum = 0;
  for (int i = 0; i < 100000; ++i) {
    // Mix of small and very large score gaps.
    const double scale = i % 10 == 0 ? 1e3 : 3.0;
    const double qx = scale * rng.normal(), qy = scale * rng.normal();
    worst_sum = std::max(worst_sum, std::abs(relative_prob(qx, qy) + relative_prob(qy, qx) - 1.0));
  }
  bool bounded = true;
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> probs(1 + rng.below(8));
    for (auto& p : probs) p = rng.uniform();
    const double m = ensemble_pseudolabel(probs);
    if (m < *std::min_element(probs.begin(), probs.end()) || m > *std::max_element(probs.begin(), probs.end()))
      bounded = false;
  }
  double lo = 1, hi = 0;
  std::vector<double> unit{0.0, 1.0};
  for (int i = 0; i < 10000; ++i) unit.push_back(rng.uniform());
  for (double a : unit) {
    for (double b : {0.0, 1.0, unit[2 + rng.below(unit.size() - 2)]}) {
      for (double p : {relative_prob(a, b), relative_prob(b, a)}) {
        lo = std::min(lo, p);
        hi = std::max(hi, p);
      }
    }
  }
  o.detail << " max |p(x,y)+p(y,x)-1|=" << worst_sum << " (ulp " << ulp << "); unit-score range [" << lo << ", "
           << hi << "]";
  o.require(worst_sum <= ulp, "complement within 1 ulp");
  o.require(bounded, "ensemble mean within per-model min/max");
  o.require(lo >= 0.268941 && hi <= 0.731059, "bounds [0.268941, 0.731059]");
  report(5, o);
}

void criterion10() {
  Outcome o;
  Rng rng(derive_seed(1, "adamw"));
  const double wd = 5e-4;
  double worst_ulps = 0;
  for (double lr : {1e-3, 5e-7, 3e-2, 1.0}) {
    std::vector<double> p(1000);
    for (auto& v : p) v = rng.normal() * std::pow(10.0, (6.0 * rng.uniform() - 3.0));
    const auto before = p;
    OptimState state(p.size());
    adamw_step(p, std::vector<double>(p.size(), 0.0), state, lr, wd);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double expected = before[i] * (1.0 - lr * wd);
      const double gap = std::abs(p[i] - expected);
      const double unit = std::abs(std::nextafter(expected, 0.0) - expected);
      worst_ulps = std::max(worst_ulps, gap / unit);
    }
  }
  o.detail << " max deviation " << worst_ulps << " ulp over 4 learning rates";
  o.require(worst_ulps <= 1.0, "within 1 ulp");
  report(10, o);
}

// Every file under `root` except logs, relative path -> sha256.
std::map<std::string, std::string> digest_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root);
    if (*rel.begin() == "logs") continue;
    out[rel.generic_string()] = sha256_file(e.path());
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: acceptance <work dir>\n";
    return 1;
  }
  const fs::path work = argv[1];
  fs::remove_all(work);
  fs::create_directories(work);
  omp_set_num_threads(1);

  criterion1();
  criterion2();
  criterion3();
  criterion4();
  criterion5();

  const auto config = ExperimentConfig::reference(42);
  const fs::path run1 = work / "reference-t1";
  const fs::path run2 = work / "reference-t2";
  ExperimentOptions opts;
  opts.force = true;
  opts.progress = &std::cerr;

  // 6: reference run, single core.
  Experiment exp(config, run1, opts);
  {
    Outcome o;
    const auto t0 = Clock::now();
    exp.run_all();
    const double secs = seconds_since(t0);
    const auto& m = exp.cross_eval().vs_qstar;
    const auto& models = exp.stage1();
    const std::size_t cdr_row = models.size();
    const double cdr_mean = m.mean_srcc(cdr_row);
    o.detail << " CDR mean SRCC " << cdr_mean << ";";
    for (std::size_t r = 0; r < models.size(); ++r) {
      const auto& home = models[r].trained_on;
      const auto col = static_cast<std::size_t>(std::find(m.datasets.begin(), m.datasets.end(), home) - m.datasets.begin());
      const double diag = m.cells[r][col].srcc;
      const double off = m.mean_srcc(r, home);
      o.detail << " " << home << " own " << diag << " others " << off << ";";
      o.require(diag > off, home + " own > others");
      o.require(cdr_mean >= off - 0.02, "CDR mean >= " + home + " off-diagonal - 0.02");
    }
    o.detail << " " << secs << " s";
    o.require(secs < 600.0, "runtime < 10 min");
    report(6, o);
  }

  // 9: same config and seed, another directory, two threads.
  {
    Outcome o;
    omp_set_num_threads(2);
    Experiment again(config, run2, opts);
    again.run_all();
    omp_set_num_threads(1);
    const auto a = digest_tree(run1);
    const auto b = digest_tree(run2);
    std::size_t models = 0, reports = 0;
    for (const auto& [rel, sha] : a) {
      if (rel.starts_with("models/")) ++models;
      if (rel.starts_with("reports/")) ++reports;
    }
    std::vector<std::string> diffs;
    for (const auto& [rel, sha] : a) {
      auto it = b.find(rel);
      if (it == b.end() || it->second != sha) diffs.push_back(rel);
    }
    for (const auto& [rel, sha] : b)
      if (!a.contains(rel)) diffs.push_back(rel);
    o.detail << " " << a.size() << " files compared (" << models << " models, " << reports << " reports), "
             << diffs.size() << " differ";
    for (const auto& d : diffs) o.detail << " " << d;
    o.require(models > 0 && reports > 0, "models and reports present");
    o.require(diffs.empty(), "byte-identical at 1 and 2 threads");
    report(9, o);
  }

  // 7: nested pair ladder.
  {
    Outcome o;
    const auto ab = exp.ablation_pairs();
    double small = std::nan(""), large = std::nan("");
    for (const auto& row : ab.rows) {
      o.detail << " " << row.n_pairs << " pairs: " << row.mean_srcc << ";";
      if (row.n_pairs == 500) small = row.mean_srcc;
      if (row.n_pairs == 5000) large = row.mean_srcc;
    }
    o.require(large >= small - 0.02, "SRCC(5000) >= SRCC(500) - 0.02");
    report(7, o);
  }

  // 8: ensemble size.
  {
    Outcome o;
    const auto ab = exp.ablation_ensemble();
    double best_single = -2.0, full = std::nan("");
    for (const auto& row : ab.rows) {
      o.detail << " {" << row.label << "}: " << row.mean_srcc << ";";
      if (row.ensemble.size() == 1) best_single = std::max(best_single, row.mean_srcc);
      if (row.ensemble.size() == config.datasets.size()) full = row.mean_srcc;
    }
    o.require(full >= best_single - 0.02, "full ensemble >= best single - 0.02");
    report(8, o);
  }

  criterion10();

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
