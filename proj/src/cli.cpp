#include "cdr/cli.hpp"

#include <omp.h>

#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cdr/config_io.hpp"
#include "cdr/error.hpp"
#include "cdr/harness.hpp"
#include "cdr/metrics.hpp"
#include "cdr/pseudolabel.hpp"
#include "cdr/synthbench.hpp"
#include "cdr/trainer.hpp"

namespace cdr {

namespace {

struct Globals {
  bool json = false;
  int threads = 1;
  std::optional<std::uint64_t> seed;
};

struct Io {
  std::ostream& out;
  std::ostream& err;
  const Globals& g;

  void emit(const nlohmann::ordered_json& j) const {
    if (g.json) out << j.dump(2) << '\n';
  }
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw DataError(what + " not found: " + path);
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

// Stage-1 model files are named <dataset>-<hash16>.bin.
std::string home_dataset(const std::string& model_path, const std::vector<std::string>& dataset_names) {
  const std::string stem = stem_of(model_path);
  for (const auto& name : dataset_names) {
    if (stem == name || stem.rfind(name + "-", 0) == 0) {
      const std::string rest = stem.substr(name.size());
      if (rest.empty() || rest.size() == 17) return name;
    }
  }
  return {};
}

std::vector<double> predict_ids(const ScorerParams& params, const DatasetManifest& manifest,
                                const std::vector<std::string>& ids, int n_patches, std::uint64_t seed) {
  std::vector<double> preds(ids.size());
  const long n = static_cast<long>(ids.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, ids[i]));
    preds[i] = predict_image(params, manifest.record(ids[i]), n_patches, params.config.patch_size, rng);
  }
  return preds;
}

void attach_truth(DatasetManifest& manifest, const std::string& truth_path) {
  require_file(truth_path, "truth file");
  GroundTruth truth = load_ground_truth(truth_path);
  for (const auto& id : manifest.ids()) {
    if (!truth.qstar.contains(id)) throw DataError("truth file has no entry for " + id);
  }
  manifest.rescaled = truth.qstar;
}

// ---------------------------------------------------------------------------

int cmd_synth_gen(const Io& io, const std::string& config_path, const std::string& out_dir) {
  require_file(config_path, "config");
  const nlohmann::json j = load_json(config_path);
  std::vector<BiasedDatasetConfig> configs;
  if (j.contains("datasets")) {
    ExperimentConfig exp = ExperimentConfig::from_json(j);
    if (io.g.seed) exp.reseed(*io.g.seed);
    configs = exp.datasets;
  } else {
    BiasedDatasetConfig c = dataset_config_from_json(j);
    if (io.g.seed) c.seed = derive_seed(*io.g.seed, "dataset/" + c.name);
    configs.push_back(c);
  }
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : configs) {
    io.err << "[synth-gen] " << c.name << ": " << c.n_images << " images\n";
    const GeneratedDataset g = gen_biased_dataset(c, out_dir);
    arr.push_back({{"name", c.name},
                   {"n_images", c.n_images},
                   {"manifest", g.manifest_path.string()},
                   {"truth", g.truth_path.string()},
                   {"manifest_sha256", sha256_file(g.manifest_path)}});
  }
  io.emit({{"datasets", arr}});
  return 0;
}

int cmd_train_single(const Io& io, const std::string& dataset_path, const std::string& scorer_path,
                     const std::string& train_path, const std::string& out_path) {
  require_file(dataset_path, "dataset");
  ScorerConfig sc;
  TrainConfig tc;
  if (!scorer_path.empty()) sc = scorer_config_from_json(load_json(scorer_path));
  if (!train_path.empty()) tc = train_config_from_json(load_json(train_path));
  const std::uint64_t seed = io.g.seed.value_or(tc.seed ? tc.seed : 42);
  tc.seed = derive_seed(seed, "train");
  sc.validate();
  tc.validate();

  const DatasetManifest manifest = rescale_mos(load_manifest(dataset_path));
  const Split split = split_dataset(manifest, derive_seed(seed, "split"));
  const std::string stage = "train-single/" + manifest.name;
  TrainResult tr = train_single(manifest, split, sc, tc, [&](int epoch, double lr, double loss) {
    io.err << "[" << stage << "] epoch " << epoch << " loss=" << loss << " lr=" << lr << '\n';
  });
  save_params(tr.params, out_path);

  std::vector<double> labels;
  for (const auto& id : split.test_ids) labels.push_back(manifest.rescaled.at(id));
  EvalReport held_out =
      evaluate_predictions(predict_ids(tr.params, manifest, split.test_ids, 10, derive_seed(seed, "eval")), labels);
  io.err << "[" << stage << "] held-out SRCC " << format_fixed(held_out.srcc, 4) << '\n';
  io.emit({{"model", out_path},
           {"sha256", sha256_file(out_path)},
           {"trained_on", manifest.name},
           {"n_train", split.train_ids.size()},
           {"n_test", split.test_ids.size()},
           {"test_srcc", held_out.srcc},
           {"test_plcc", held_out.plcc},
           {"epoch_losses", tr.epoch_losses}});
  return 0;
}

int cmd_gen_pairs(const Io& io, const std::vector<std::string>& models, std::vector<std::string> sources,
                  const std::string& pool_path, std::size_t n_pairs, const std::string& out_path, int short_side,
                  bool keep_per_model) {
  if (!sources.empty() && sources.size() != models.size()) throw UsageError("--sources must name every model");
  if (n_pairs < 1) throw UsageError("--n-pairs must be positive");
  require_file(pool_path, "pool");
  for (const auto& m : models) require_file(m, "model");
  const DatasetManifest pool = load_manifest(pool_path);
  const std::size_t n = pool.records.size();
  if (n < 2 || n_pairs > n * (n - 1)) {
    throw DataError("requested " + std::to_string(n_pairs) + " pairs but the pool of " + std::to_string(n) +
                    " images has only " + std::to_string(n < 2 ? 0 : n * (n - 1)) + " ordered pairs");
  }
  EnsembleSnapshot snap;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto bytes = read_file(models[i]);
    EnsembleMember m;
    m.source = sources.empty() ? stem_of(models[i]) : sources[i];
    m.model_hash = sha256_hex(bytes);
    m.params = deserialize_params(bytes);
    snap.members.push_back(std::move(m));
  }
  const int crop = snap.members.front().params.config.patch_size;
  const std::uint64_t seed = io.g.seed.value_or(42);
  io.err << "[gen-pairs] " << n_pairs << " pairs from " << n << " images, " << models.size() << " scorers\n";
  const PairManifest pm = generate_pair_manifest(snap, pool, n_pairs, seed, keep_per_model, {short_side, crop});
  write_pair_manifest(pm, out_path);
  io.emit({{"pairs", out_path}, {"sha256", sha256_file(out_path)}, {"n_pairs", pm.n_pairs()}, {"seed", seed}});
  return 0;
}

int cmd_train_cdr(const Io& io, const std::string& pairs_path, const std::string& images_path,
                  const std::string& scorer_path, const std::string& train_path, const std::string& out_path,
                  int short_side) {
  require_file(pairs_path, "pair manifest");
  require_file(images_path, "image manifest");
  ScorerConfig sc;
  TrainConfig tc;
  tc.epochs = 10;
  if (!scorer_path.empty()) sc = scorer_config_from_json(load_json(scorer_path));
  if (!train_path.empty()) tc = train_config_from_json(load_json(train_path));
  tc.seed = derive_seed(io.g.seed.value_or(tc.seed ? tc.seed : 42), "stage3");
  sc.validate();
  tc.validate();

  const PairManifest pm = read_pair_manifest(pairs_path);
  const DatasetManifest pool = load_manifest(images_path);
  const auto crops = central_crops(pool, {short_side, sc.patch_size});
  const auto rows = pm.rows();
  TrainResult tr = train_pairwise(rows, crops, sc, tc, [&](int epoch, double lr, double loss) {
    io.err << "[train-cdr] epoch " << epoch << " loss=" << loss << " lr=" << lr << '\n';
  });
  save_params(tr.params, out_path);
  io.emit({{"model", out_path},
           {"sha256", sha256_file(out_path)},
           {"pairs_sha256", sha256_file(pairs_path)},
           {"n_pairs", rows.size()},
           {"epoch_losses", tr.epoch_losses}});
  return 0;
}

int cmd_eval(const Io& io, const std::string& model_path, const std::string& dataset_path,
             const std::string& truth_path, int splits, int patches) {
  if (splits < 0) throw UsageError("--splits must be non-negative");
  if (patches < 1) throw UsageError("--patches must be positive");
  require_file(model_path, "model");
  require_file(dataset_path, "dataset");
  const ScorerParams params = load_params(model_path);
  DatasetManifest manifest = load_manifest(dataset_path);
  if (truth_path.empty()) {
    manifest = rescale_mos(std::move(manifest));
  } else {
    attach_truth(manifest, truth_path);
  }
  const std::uint64_t seed = io.g.seed.value_or(42);
  const std::string model_name = stem_of(model_path);
  const std::string trained_on = home_dataset(model_path, {manifest.name});

  if (splits == 0) {
    const auto ids = manifest.ids();
    std::vector<double> targets;
    for (const auto& id : ids) targets.push_back(manifest.rescaled.at(id));
    EvalReport rep = evaluate_predictions(predict_ids(params, manifest, ids, patches, seed), targets);
    rep.model = model_name;
    rep.trained_on = trained_on;
    rep.dataset = manifest.name;
    rep.seed = seed;
    io.err << "[eval] " << model_name << " on " << manifest.name << ": SRCC " << format_fixed(rep.srcc, 4)
           << " PLCC " << format_fixed(rep.plcc, 4) << '\n';
    io.emit(rep.to_json());
    return 0;
  }

  // Fixed model: each split only selects which 20% is scored.
  const auto result = repeated_split_eval(
      manifest,
      [&](const DatasetManifest& m, const Split& split) {
        return predict_ids(params, m, split.test_ids, patches, seed);
      },
      splits, seed);
  EvalReport median = result.median;
  median.model = model_name;
  median.trained_on = trained_on;
  io.err << "[eval] " << model_name << " on " << manifest.name << ", median of " << splits << " splits: SRCC "
         << format_fixed(median.srcc, 4) << " PLCC " << format_fixed(median.plcc, 4) << '\n';
  auto runs = nlohmann::ordered_json::array();
  for (const auto& r : result.runs) runs.push_back(r.to_json());
  nlohmann::ordered_json j = median.to_json();
  j["splits"] = splits;
  j["runs"] = runs;
  io.emit(j);
  return 0;
}

int cmd_cross_eval(const Io& io, const std::vector<std::string>& models, const std::vector<std::string>& datasets,
                   const std::vector<std::string>& truths, const std::string& out_dir, int patches) {
  if (!truths.empty() && truths.size() != datasets.size()) throw UsageError("--truth must match --datasets");
  if (patches < 1) throw UsageError("--patches must be positive");
  for (const auto& m : models) require_file(m, "model");
  for (const auto& d : datasets) require_file(d, "dataset");

  std::vector<DatasetManifest> manifests;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    DatasetManifest m = load_manifest(datasets[i]);
    if (truths.empty()) {
      m = rescale_mos(std::move(m));
    } else {
      attach_truth(m, truths[i]);
    }
    names.push_back(m.name);
    manifests.push_back(std::move(m));
  }
  std::vector<ScorerParams> params;
  for (const auto& m : models) params.push_back(load_params(m));
  std::vector<MatrixModel> mm;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const ScorerParams* p = &params[i];
    mm.push_back({stem_of(models[i]), home_dataset(models[i], names),
                  [p, patches](const ImageRecord& r, std::uint64_t s) {
                    Rng rng(s);
                    return predict_image(*p, r, patches, p->config.patch_size, rng);
                  }});
  }
  std::vector<MatrixDataset> md;
  for (auto& m : manifests) md.push_back({m.name, &m, m.rescaled});
  io.err << "[cross-eval] " << mm.size() << " models x " << md.size() << " datasets\n";
  const CrossMatrix cm = cross_dataset_matrix(mm, md, io.g.seed.value_or(42));
  if (!out_dir.empty()) {
    write_text(fs::path(out_dir) / "matrix.csv", cm.to_csv());
    write_text(fs::path(out_dir) / "matrix.json", cm.to_json().dump(2) + "\n");
  }
  if (!io.g.json) io.err << cm.to_csv();
  io.emit(cm.to_json());
  return 0;
}

ExperimentConfig experiment_config(const Io& io, const std::string& config_path, const std::string& out_override,
                                   fs::path& out_dir) {
  ExperimentConfig c;
  if (config_path.empty()) {
    c = ExperimentConfig::reference();
  } else {
    require_file(config_path, "config");
    c = load_experiment_config(config_path);
  }
  if (io.g.seed) c.reseed(*io.g.seed);
  c.validate();
  out_dir = out_override.empty() ? fs::path(c.output_dir) : fs::path(out_override);
  if (!config_path.empty() && out_override.empty() && fs::path(c.output_dir).is_relative()) {
    out_dir = fs::path(config_path).parent_path() / c.output_dir;
  }
  return c;
}

int cmd_ablate(const Io& io, const std::string& kind, const std::string& config_path, const std::string& out,
               bool force) {
  fs::path out_dir;
  ExperimentConfig c = experiment_config(io, config_path, out, out_dir);
  Experiment exp(c, out_dir, {force, &io.err});
  const AblationReport rep = kind == "pairs" ? exp.ablation_pairs() : exp.ablation_ensemble();
  if (!io.g.json) {
    for (const auto& row : rep.rows) io.err << kind << " " << row.label << ": mean SRCC " << row.mean_srcc << '\n';
  }
  io.emit(rep.to_json());
  return 0;
}

int cmd_run_experiment(const Io& io, const std::string& config_path, const std::string& out, bool force) {
  fs::path out_dir;
  ExperimentConfig c = experiment_config(io, config_path, out, out_dir);
  Experiment exp(c, out_dir, {force, &io.err});
  nlohmann::ordered_json summary = exp.run_all();
  nlohmann::ordered_json stages;
  for (const auto& [stage, s] : exp.statuses()) stages[stage] = s == StageStatus::ran ? "ran" : "skipped";
  summary["stages"] = stages;
  summary["output_dir"] = out_dir.string();
  if (!io.g.json) io.err << exp.cross_eval().vs_qstar.to_csv();
  io.emit(summary);
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-dataset-robust blind image quality assessment pipeline", "cdr_biqa"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_flag("--json", g.json, "Print machine-readable JSON on stdout");
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
  auto* seed_opt = app.add_option("--seed", seed, "Master seed; overrides every seed in the config");

  std::string config, out_path, dataset, scorer_cfg, train_cfg, pool, pairs, images, model, truth, kind;
  std::vector<std::string> models, sources, datasets, truths;
  std::size_t n_pairs = 0;
  int splits = 0, patches = 10, short_side = 48;
  bool force = false, keep = false;

  auto* synth = app.add_subcommand("synth-gen", "Generate biased synthetic datasets");
  synth->add_option("--config", config, "Dataset or experiment config (JSON)")->required();
  synth->add_option("--out", out_path, "Output directory")->required();

  auto* single = app.add_subcommand("train-single", "Train one scorer on a labelled dataset's 80% split");
  single->add_option("--dataset", dataset, "Manifest CSV (id,image_path,mos)")->required();
  single->add_option("--scorer-config", scorer_cfg, "Scorer config (JSON)");
  single->add_option("--train-config", train_cfg, "Training config (JSON)");
  single->add_option("--out", out_path, "Model file to write")->required();

  auto* gen = app.add_subcommand("gen-pairs", "Pseudo-label image pairs with a scorer ensemble");
  gen->add_option("--models", models, "Stage-1 model files")->required();
  gen->add_option("--sources", sources, "Source dataset of each model (default: file stem)");
  gen->add_option("--pool", pool, "Unlabelled pool manifest")->required();
  gen->add_option("--n-pairs", n_pairs, "Number of ordered pairs")->required();
  gen->add_option("--short-side", short_side, "Resize target before the central crop");
  gen->add_flag("--keep-per-model", keep, "Also write each model's p_r");
  gen->add_option("--out", out_path, "Pair manifest CSV to write")->required();

  auto* cdr_cmd = app.add_subcommand("train-cdr", "Train the CDR scorer on pseudo-labelled pairs");
  cdr_cmd->add_option("--pairs", pairs, "Pair manifest CSV")->required();
  cdr_cmd->add_option("--images", images, "Pool manifest the pair ids refer to")->required();
  cdr_cmd->add_option("--scorer-config", scorer_cfg, "Scorer config (JSON)");
  cdr_cmd->add_option("--train-config", train_cfg, "Training config (JSON)");
  cdr_cmd->add_option("--short-side", short_side, "Resize target before the central crop");
  cdr_cmd->add_option("--out", out_path, "Model file to write")->required();

  auto* ev = app.add_subcommand("eval", "SRCC/PLCC of a model on a dataset");
  ev->add_option("--model", model, "Model file")->required();
  ev->add_option("--dataset", dataset, "Manifest CSV")->required();
  ev->add_option("--truth", truth, "Evaluate against a q* truth CSV instead of the labels");
  ev->add_option("--splits", splits, "Median over k random 20% test splits (0: whole dataset)");
  ev->add_option("--patches", patches, "Random patches averaged per image");

  auto* cross = app.add_subcommand("cross-eval", "Models x datasets SRCC/PLCC matrix");
  cross->add_option("--models", models, "Model files")->required();
  cross->add_option("--datasets", datasets, "Manifest CSVs")->required();
  cross->add_option("--truth", truths, "q* truth CSVs, one per dataset");
  cross->add_option("--patches", patches, "Random patches averaged per image");
  cross->add_option("--out", out_path, "Directory for matrix.csv and matrix.json");

  auto* ablate = app.add_subcommand("ablate", "Pair-count or ensemble-subset ablation");
  ablate->add_option("kind", kind, "pairs or ensemble")->required()->check(CLI::IsMember({"pairs", "ensemble"}));
  ablate->add_option("--config", config, "Experiment config (JSON); default: reference");
  ablate->add_option("--out", out_path, "Output directory (overrides the config)");
  ablate->add_flag("--force", force, "Rerun even when up to date");

  auto* run = app.add_subcommand("run-experiment", "Stages 1-3 and cross-dataset evaluation");
  run->add_option("--config", config, "Experiment config (JSON); default: reference");
  run->add_option("--out", out_path, "Output directory (overrides the config)");
  run->add_flag("--force", force, "Rerun even when up to date");

  // Global flags are accepted after the subcommand too.
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success&) {
    err << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    err << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return 1;
  }
  if (seed_opt->count() > 0) g.seed = seed;
  omp_set_num_threads(g.threads);

  const Io io{out, err, g};
  try {
    if (synth->parsed()) return cmd_synth_gen(io, config, out_path);
    if (single->parsed()) return cmd_train_single(io, dataset, scorer_cfg, train_cfg, out_path);
    if (gen->parsed()) return cmd_gen_pairs(io, models, sources, pool, n_pairs, out_path, short_side, keep);
    if (cdr_cmd->parsed()) return cmd_train_cdr(io, pairs, images, scorer_cfg, train_cfg, out_path, short_side);
    if (ev->parsed()) return cmd_eval(io, model, dataset, truth, splits, patches);
    if (cross->parsed()) return cmd_cross_eval(io, models, datasets, truths, out_path, patches);
    if (ablate->parsed()) return cmd_ablate(io, kind, config, out_path, force);
    if (run->parsed()) return cmd_run_experiment(io, config, out_path, force);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    // Filesystem and other I/O failures count as data errors.
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace cdr
