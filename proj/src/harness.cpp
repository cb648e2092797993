#include "cdr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>
#include <sstream>

#include "cdr/config_io.hpp"
#include "cdr/error.hpp"

namespace cdr {

namespace {

constexpr const char* kFormatName = "cdr-biqa-experiment";

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string key_of(const nlohmann::ordered_json& inputs) { return sha256_hex(inputs.dump()); }

std::vector<DegradationKind> parse_kinds(const nlohmann::json& j) {
  std::vector<DegradationKind> out;
  for (const auto& k : j) out.push_back(parse_degradation_kind(k.get<std::string>()));
  return out;
}

nlohmann::ordered_json kinds_json(const std::vector<DegradationKind>& kinds) {
  auto arr = nlohmann::ordered_json::array();
  for (auto k : kinds) arr.push_back(std::string(to_string(k)));
  return arr;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig ExperimentConfig::reference(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  c.image_size = 48;
  using K = DegradationKind;
  c.datasets = {
      {"A", 300, {K::gaussian_blur}, LabelRemap::identity, 0, 48},
      {"B", 300, {K::additive_noise}, LabelRemap::sqrt, 0, 48},
      {"C", 300, {K::contrast_reduction, K::additive_noise}, LabelRemap::square, 0, 48},
  };
  c.pool = PoolConfig{};
  c.n_pairs = 5000;
  c.pair_ladder = {500, 5000};
  c.ensemble_subsets = {{"A"}, {"B"}, {"C"}, {"A", "B", "C"}};
  c.scorer = ScorerConfig{};
  c.stage1 = TrainConfig{};
  c.stage1.epochs = 30;
  c.stage3 = TrainConfig{};
  c.stage3.epochs = 10;
  c.eval_patches = 10;
  c.reseed(seed);
  return c;
}

void ExperimentConfig::reseed(std::uint64_t master) {
  seed = master;
  for (auto& d : datasets) d.seed = unit_seed("dataset/" + d.name);
  pool.seed = unit_seed("dataset/" + pool.name);
}

void ExperimentConfig::validate() const {
  if (datasets.size() < 2) throw DataError("cross-dataset testing needs at least 2 datasets");
  std::set<std::string> names;
  std::set<std::uint64_t> seeds;
  for (const auto& d : datasets) {
    d.validate();
    if (d.image_size < scorer.patch_size) throw DataError("dataset " + d.name + " images are smaller than the patch");
    if (!names.insert(d.name).second) throw DataError("duplicate dataset name " + d.name);
    seeds.insert(d.seed);
  }
  if (names.contains(pool.name)) throw DataError("pool name collides with a dataset name");
  if (seeds.contains(pool.seed)) throw DataError("pool seed must differ from every dataset seed");
  if (pool.n_images < 2 || pool.kinds.empty()) throw DataError("pool needs at least 2 images and one kind");
  if (pool.short_side < scorer.patch_size) throw DataError("pool short side is smaller than the patch");
  if (n_pairs < 1) throw DataError("n_pairs must be positive");
  const std::uint64_t capacity = static_cast<std::uint64_t>(pool.n_images) * (pool.n_images - 1);
  for (std::size_t n : pair_ladder) {
    if (n < 1 || n > capacity) throw DataError("pair ladder rung out of range");
  }
  if (n_pairs > capacity) throw DataError("n_pairs exceeds the pool's ordered-pair capacity");
  for (const auto& subset : ensemble_subsets) {
    if (subset.empty()) throw DataError("empty ensemble subset");
    for (const auto& s : subset) {
      if (!names.contains(s)) throw DataError("ensemble subset names unknown dataset " + s);
    }
  }
  if (eval_patches < 1) throw DataError("eval patches must be positive");
  scorer.validate();
  stage1.validate();
  stage3.validate();
}

const BiasedDatasetConfig& ExperimentConfig::dataset(const std::string& name) const {
  for (const auto& d : datasets) {
    if (d.name == name) return d;
  }
  throw DataError("unknown dataset " + name);
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = kFormatName;
  j["version"] = kVersion;
  j["seed"] = seed;
  j["image_size"] = image_size;
  j["output_dir"] = output_dir;
  j["datasets"] = nlohmann::ordered_json::array();
  for (const auto& d : datasets) {
    nlohmann::ordered_json dj;
    dj["name"] = d.name;
    dj["n_images"] = d.n_images;
    dj["kinds"] = kinds_json(d.allowed_kinds);
    dj["label_remap"] = std::string(to_string(d.label_remap));
    dj["seed"] = d.seed;
    j["datasets"].push_back(std::move(dj));
  }
  j["pool"] = {{"name", pool.name},
               {"n_images", pool.n_images},
               {"kinds", kinds_json(pool.kinds)},
               {"short_side", pool.short_side},
               {"seed", pool.seed}};
  j["n_pairs"] = n_pairs;
  j["pair_ladder"] = pair_ladder;
  j["ensemble_subsets"] = ensemble_subsets;
  j["scorer"] = cdr::to_json(scorer);
  auto strip_seed = [](nlohmann::ordered_json t) {
    t.erase("seed");
    return t;
  };
  j["stage1"] = strip_seed(cdr::to_json(stage1));
  j["stage3"] = strip_seed(cdr::to_json(stage3));
  j["eval"] = {{"patches", eval_patches}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw DataError("experiment config must be a JSON object");
    if (j.value("format", std::string(kFormatName)) != kFormatName) throw DataError("not an experiment config");
    if (j.value("version", kVersion) != kVersion) {
      throw DataError("unsupported experiment config version " + std::to_string(j.value("version", 0)));
    }
    static const std::set<std::string> allowed{"format",   "version",      "seed",     "image_size",
                                               "datasets", "pool",         "n_pairs",  "pair_ladder",
                                               "ensemble_subsets", "scorer", "stage1", "stage3",
                                               "eval",     "output_dir"};
    for (const auto& [k, v] : j.items()) {
      if (!allowed.contains(k)) throw DataError("unknown key '" + k + "' in experiment config");
    }
    ExperimentConfig c;
    c.seed = j.value("seed", std::uint64_t{42});
    c.image_size = j.value("image_size", 48);
    c.output_dir = j.value("output_dir", std::string("out"));
    std::vector<bool> explicit_seed;
    for (const auto& dj : j.at("datasets")) {
      nlohmann::json copy = dj;
      copy["image_size"] = c.image_size;
      const bool has_seed = dj.contains("seed");
      BiasedDatasetConfig d = dataset_config_from_json(copy);
      explicit_seed.push_back(has_seed);
      c.datasets.push_back(std::move(d));
    }
    bool pool_seed = false;
    if (j.contains("pool")) {
      const auto& pj = j.at("pool");
      c.pool.name = pj.value("name", c.pool.name);
      c.pool.n_images = pj.value("n_images", c.pool.n_images);
      c.pool.short_side = pj.value("short_side", c.image_size);
      if (pj.contains("kinds")) c.pool.kinds = parse_kinds(pj.at("kinds"));
      pool_seed = pj.contains("seed");
      if (pool_seed) c.pool.seed = pj.at("seed").get<std::uint64_t>();
    } else {
      c.pool.short_side = c.image_size;
    }
    c.n_pairs = j.value("n_pairs", c.n_pairs);
    if (j.contains("pair_ladder")) c.pair_ladder = j.at("pair_ladder").get<std::vector<std::size_t>>();
    if (j.contains("ensemble_subsets")) {
      c.ensemble_subsets = j.at("ensemble_subsets").get<std::vector<std::vector<std::string>>>();
    } else {
      std::vector<std::string> all;
      for (const auto& d : c.datasets) {
        c.ensemble_subsets.push_back({d.name});
        all.push_back(d.name);
      }
      c.ensemble_subsets.push_back(all);
    }
    if (j.contains("scorer")) c.scorer = scorer_config_from_json(j.at("scorer"));
    if (j.contains("stage1")) c.stage1 = train_config_from_json(j.at("stage1"));
    if (j.contains("stage3")) {
      c.stage3 = train_config_from_json(j.at("stage3"));
    } else {
      c.stage3.epochs = 10;
    }
    if (j.contains("eval")) c.eval_patches = j.at("eval").value("patches", c.eval_patches);

    for (std::size_t i = 0; i < c.datasets.size(); ++i) {
      if (!explicit_seed[i]) c.datasets[i].seed = c.unit_seed("dataset/" + c.datasets[i].name);
    }
    if (!pool_seed) c.pool.seed = c.unit_seed("dataset/" + c.pool.name);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) { return ExperimentConfig::from_json(load_json(path)); }

// ---------------------------------------------------------------------------
// Artifact store

ArtifactStore::ArtifactStore(fs::path root) : root_(std::move(root)) {
  const fs::path state_path = root_ / "state.json";
  if (fs::exists(state_path)) {
    state_ = nlohmann::json::parse(read_text(state_path), nullptr, false);
    if (state_.is_discarded() || !state_.is_object()) throw DataError("corrupt state file " + state_path.string());
  } else {
    state_ = {{"version", 1}, {"stages", nlohmann::json::object()}};
  }
}

bool ArtifactStore::up_to_date(const std::string& stage, const std::string& key) const {
  const auto& stages = state_.at("stages");
  if (!stages.contains(stage)) return false;
  const auto& entry = stages.at(stage);
  if (entry.value("key", "") != key) return false;
  for (const auto& [rel, hash] : entry.at("outputs").items()) {
    const fs::path p = root_ / rel;
    if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
  }
  return true;
}

void ArtifactStore::record(const std::string& stage, const std::string& key, const std::vector<fs::path>& outputs) {
  nlohmann::json entry;
  entry["key"] = key;
  entry["outputs"] = nlohmann::json::object();
  for (const auto& rel : outputs) entry["outputs"][rel.generic_string()] = sha256_file(root_ / rel);
  state_["stages"][stage] = std::move(entry);
  save();
}

std::string ArtifactStore::recorded_hash(const fs::path& rel) const {
  const std::string key = rel.generic_string();
  for (const auto& [stage, entry] : state_.at("stages").items()) {
    const auto& outs = entry.at("outputs");
    if (outs.contains(key)) return outs.at(key).get<std::string>();
  }
  throw DataError("no recorded hash for " + key);
}

void ArtifactStore::verify(const fs::path& rel) const {
  const std::string expected = recorded_hash(rel);
  if (!fs::exists(root_ / rel) || sha256_file(root_ / rel) != expected) {
    throw DataError("artifact " + rel.generic_string() + " does not match its recorded hash; refusing stale input");
  }
}

fs::path ArtifactStore::put(const fs::path& dir, const std::string& stem, const std::string& ext,
                            std::span<const std::uint8_t> bytes) const {
  const fs::path rel = dir / (stem + "-" + sha256_hex(bytes).substr(0, 16) + ext);
  write_file(root_ / rel, bytes);
  return rel;
}

void ArtifactStore::save() const { write_text(root_ / "state.json", state_.dump(1) + "\n"); }

// ---------------------------------------------------------------------------
// Ablation reports

nlohmann::ordered_json AblationReport::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = kind;
  j["datasets"] = datasets;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"label", r.label},
                         {"n_pairs", r.n_pairs},
                         {"ensemble", r.ensemble},
                         {"pairs_sha256", r.pairs_sha256},
                         {"model_sha256", r.model_sha256},
                         {"srcc", r.srcc},
                         {"mean_srcc", r.mean_srcc}});
  }
  return j;
}

AblationReport AblationReport::from_json(const nlohmann::json& j) {
  AblationReport rep;
  rep.kind = j.at("kind").get<std::string>();
  rep.datasets = j.at("datasets").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows")) {
    AblationRow row;
    row.label = r.at("label").get<std::string>();
    row.n_pairs = r.at("n_pairs").get<std::size_t>();
    row.ensemble = r.at("ensemble").get<std::vector<std::string>>();
    row.pairs_sha256 = r.at("pairs_sha256").get<std::string>();
    row.model_sha256 = r.at("model_sha256").get<std::string>();
    row.srcc = r.at("srcc").get<std::vector<double>>();
    row.mean_srcc = r.at("mean_srcc").get<double>();
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Experiment

Experiment::Experiment(ExperimentConfig config, fs::path output_dir, ExperimentOptions options)
    : config_(std::move(config)), options_(options), store_((config_.validate(), output_dir)) {
  fs::create_directories(output_dir);
}

void Experiment::progress(const std::string& line) const {
  if (options_.progress) *options_.progress << line << std::endl;
}

StageStatus Experiment::status(const std::string& stage, bool ran) {
  const StageStatus s = ran ? StageStatus::ran : StageStatus::skipped;
  statuses_[stage] = s;
  progress("[" + stage + "] " + (ran ? "done" : "skipped (up to date)"));
  return s;
}

EpochLogger Experiment::epoch_logger(const std::string& stage) {
  auto start = std::make_shared<std::chrono::steady_clock::time_point>(std::chrono::steady_clock::now());
  const fs::path log_path = store_.abs("logs/train.jsonl");
  fs::create_directories(log_path.parent_path());
  return [this, stage, start, log_path](int epoch, double lr, double loss) {
    const auto now = std::chrono::steady_clock::now();
    const double seconds = std::chrono::duration<double>(now - *start).count();
    *start = now;
    nlohmann::ordered_json line{{"stage", stage}, {"epoch", epoch}, {"lr", lr}, {"loss", loss}, {"seconds", seconds}};
    std::ofstream(log_path, std::ios::app) << line.dump() << '\n';
    std::ostringstream msg;
    msg << "[" << stage << "] epoch " << epoch << " loss=" << loss << " lr=" << lr;
    progress(msg.str());
  };
}

std::string Experiment::dataset_digest() {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& d : config_.datasets) {
    j.push_back(store_.recorded_hash(fs::path("datasets") / (d.name + ".csv")));
    j.push_back(store_.recorded_hash(fs::path("datasets") / (d.name + ".truth.csv")));
  }
  j.push_back(store_.recorded_hash(fs::path("datasets") / (config_.pool.name + ".csv")));
  return sha256_hex(j.dump());
}

const ExperimentData& Experiment::data() {
  if (data_) return *data_;
  nlohmann::ordered_json inputs;
  for (const auto& d : config_.datasets) inputs["datasets"].push_back(cdr::to_json(d));
  inputs["pool"] = config_.to_json()["pool"];
  inputs["image_size"] = config_.image_size;
  const std::string key = key_of(inputs);
  const fs::path dir = store_.abs("datasets");

  std::vector<BiasedDatasetConfig> all = config_.datasets;
  BiasedDatasetConfig pool_cfg{config_.pool.name, config_.pool.n_images, config_.pool.kinds, LabelRemap::identity,
                               config_.pool.seed, config_.image_size};
  all.push_back(pool_cfg);

  const bool ran = options_.force || !store_.up_to_date("synth", key);
  if (ran) {
    std::vector<fs::path> outputs;
    for (const auto& d : all) {
      progress("[synth] generating " + d.name + " (" + std::to_string(d.n_images) + " images)");
      GeneratedDataset g = gen_biased_dataset(d, dir);
      if (d.name == config_.pool.name) {
        // The pool is unlabelled: its manifest carries a placeholder 0 and q* stays in the truth file.
        std::ostringstream csv;
        csv << "id,image_path,mos\n";
        for (const auto& r : g.manifest.records) csv << r->id << ',' << d.name << '/' << r->id << ".png,0\n";
        write_text(g.manifest_path, csv.str());
      }
      outputs.push_back(fs::path("datasets") / (d.name + ".csv"));
      outputs.push_back(fs::path("datasets") / (d.name + ".truth.csv"));
      for (const auto& r : g.manifest.records) outputs.push_back(fs::path("datasets") / d.name / (r->id + ".png"));
    }
    store_.record("synth", key, outputs);
  }
  status("synth", ran);

  ExperimentData out;
  for (const auto& d : config_.datasets) {
    LoadedDataset ld;
    ld.config = d;
    ld.manifest = rescale_mos(load_manifest(dir / (d.name + ".csv")));
    ld.truth = load_ground_truth(dir / (d.name + ".truth.csv"));
    out.datasets.push_back(std::move(ld));
  }
  out.pool = load_manifest(dir / (config_.pool.name + ".csv"));
  out.pool_crops = central_crops(out.pool, {config_.pool.short_side, config_.scorer.patch_size});
  data_ = std::move(out);
  return *data_;
}

ImagePredictor Experiment::predictor(const ScorerParams& params) const {
  const int n = config_.eval_patches;
  return [&params, n](const ImageRecord& record, std::uint64_t seed) {
    Rng rng(seed);
    return predict_image(params, record, n, params.config.patch_size, rng);
  };
}

const std::vector<TrainedModel>& Experiment::stage1() {
  if (stage1_) return *stage1_;
  const ExperimentData& d = data();
  nlohmann::ordered_json inputs;
  inputs["data"] = dataset_digest();
  inputs["scorer"] = cdr::to_json(config_.scorer);
  inputs["train"] = cdr::to_json(config_.stage1);
  inputs["seed"] = config_.seed;
  inputs["eval_patches"] = config_.eval_patches;
  const std::string key = key_of(inputs);
  const fs::path report_rel = "reports/stage1.json";

  std::vector<TrainedModel> models;
  const bool ran = options_.force || !store_.up_to_date("stage1", key);
  if (ran) {
    nlohmann::ordered_json report = nlohmann::ordered_json::array();
    std::vector<fs::path> outputs;
    for (const auto& ds : d.datasets) {
      const std::string unit = "stage1/" + ds.config.name;
      TrainConfig tc = config_.stage1;
      tc.seed = config_.unit_seed(unit);
      const Split split = split_dataset(ds.manifest, config_.unit_seed("split/" + ds.config.name));
      progress("[" + unit + "] training on " + std::to_string(split.train_ids.size()) + " images");
      TrainResult tr = train_single(ds.manifest, split, config_.scorer, tc, epoch_logger(unit));

      // Held-out check on the 20% side.
      std::vector<double> preds;
      std::vector<double> labels;
      const auto predict = predictor(tr.params);
      for (const auto& id : split.test_ids) {
        preds.push_back(predict(ds.manifest.record(id), derive_seed(config_.unit_seed("eval"), id)));
        labels.push_back(ds.manifest.rescaled.at(id));
      }
      const EvalReport held_out = evaluate_predictions(preds, labels);

      TrainedModel m;
      m.name = ds.config.name;
      m.trained_on = ds.config.name;
      const auto bytes = serialize_params(tr.params);
      m.path = store_.put("models", ds.config.name, ".bin", bytes);
      m.sha256 = sha256_hex(bytes);
      m.params = std::move(tr.params);
      outputs.push_back(m.path);
      report.push_back({{"dataset", ds.config.name},
                        {"model", m.path.generic_string()},
                        {"sha256", m.sha256},
                        {"n_train", split.train_ids.size()},
                        {"n_test", split.test_ids.size()},
                        {"test_srcc", held_out.srcc},
                        {"test_plcc", held_out.plcc},
                        {"epoch_losses", tr.epoch_losses}});
      models.push_back(std::move(m));
    }
    write_text(store_.abs(report_rel), report.dump(2) + "\n");
    outputs.push_back(report_rel);
    store_.record("stage1", key, outputs);
  } else {
    const auto report = load_json(store_.abs(report_rel));
    for (const auto& row : report) {
      TrainedModel m;
      m.name = row.at("dataset").get<std::string>();
      m.trained_on = m.name;
      m.path = row.at("model").get<std::string>();
      store_.verify(m.path);
      m.sha256 = row.at("sha256").get<std::string>();
      m.params = load_params(store_.abs(m.path));
      models.push_back(std::move(m));
    }
  }
  status("stage1", ran);
  stage1_ = std::move(models);
  return *stage1_;
}

EnsembleSnapshot Experiment::snapshot(const std::vector<std::string>& names) {
  const auto& models = stage1();
  EnsembleSnapshot snap;
  for (const auto& name : names) {
    const auto it = std::find_if(models.begin(), models.end(), [&](const TrainedModel& m) { return m.name == name; });
    if (it == models.end()) throw DataError("no stage-1 model for dataset " + name);
    EnsembleMember member;
    member.source = it->trained_on;
    member.model_hash = it->sha256;
    member.params = it->params;
    snap.members.push_back(std::move(member));
  }
  return snap;
}

const PairsArtifact& Experiment::stage2() {
  if (stage2_) return *stage2_;
  const ExperimentData& d = data();
  std::vector<std::string> names;
  nlohmann::ordered_json hashes = nlohmann::ordered_json::array();
  for (const auto& m : stage1()) {
    names.push_back(m.name);
    hashes.push_back(m.sha256);
  }
  nlohmann::ordered_json inputs{{"models", hashes},
                                {"pool", store_.recorded_hash(fs::path("datasets") / (config_.pool.name + ".csv"))},
                                {"n_pairs", config_.n_pairs},
                                {"seed", config_.unit_seed("pairs")},
                                {"short_side", config_.pool.short_side}};
  const std::string key = key_of(inputs);
  const fs::path report_rel = "reports/stage2.json";
  const bool ran = options_.force || !store_.up_to_date("stage2", key);
  PairsArtifact art;
  if (ran) {
    progress("[stage2] labelling " + std::to_string(config_.n_pairs) + " pairs with " +
             std::to_string(names.size()) + " scorers");
    art.manifest = generate_pair_manifest(snapshot(names), d.pool, config_.n_pairs, config_.unit_seed("pairs"), false,
                                          {config_.pool.short_side, config_.scorer.patch_size});
    const fs::path tmp = store_.abs("pairs/.pending.csv");
    write_pair_manifest(art.manifest, tmp);
    const auto bytes = read_file(tmp);
    art.sha256 = sha256_hex(bytes);
    art.path = fs::path("pairs") / ("pairs-" + art.sha256.substr(0, 16) + ".csv");
    fs::rename(tmp, store_.abs(art.path));
    fs::path side_rel = sidecar_path(art.path);
    fs::rename(sidecar_path(tmp), store_.abs(side_rel));
    nlohmann::ordered_json report{{"pairs", art.path.generic_string()},
                                  {"sha256", art.sha256},
                                  {"n_pairs", art.manifest.n_pairs()},
                                  {"ensemble", names}};
    write_text(store_.abs(report_rel), report.dump(2) + "\n");
    store_.record("stage2", key, {art.path, side_rel, report_rel});
  } else {
    const auto report = load_json(store_.abs(report_rel));
    art.path = report.at("pairs").get<std::string>();
    store_.verify(art.path);
    art.sha256 = report.at("sha256").get<std::string>();
    art.manifest = read_pair_manifest(store_.abs(art.path));
  }
  status("stage2", ran);
  stage2_ = std::move(art);
  return *stage2_;
}

double Experiment::pair_loss(const ScorerParams& params, const PairManifest& pairs) {
  const auto& crops = data().pool_crops;
  std::vector<std::string> ids;
  for (const auto& [id, patch] : crops) ids.push_back(id);
  EnsembleSnapshot snap;
  snap.members.push_back({"", "", params});
  const ScoreTable table = score_pool(snap, ids, crops);
  std::map<std::string, double> score;
  for (std::size_t i = 0; i < ids.size(); ++i) score[ids[i]] = table.at(0, i);
  std::vector<double> labels;
  std::vector<double> probs;
  for (const auto& p : pairs.pairs) {
    labels.push_back(p.p_r);
    probs.push_back(model_pair_probability(score.at(p.x_id), score.at(p.y_id)));
  }
  return fidelity_loss(labels, probs).loss;
}

TrainedModel Experiment::train_cdr(const PairManifest& pairs, const std::string& stem, const std::string& stage) {
  const auto& crops = data().pool_crops;
  TrainConfig tc = config_.stage3;
  tc.seed = config_.unit_seed("stage3");
  const auto rows = pairs.rows();
  progress("[" + stage + "] training CDR scorer on " + std::to_string(rows.size()) + " pairs");
  TrainResult tr = train_pairwise(rows, crops, config_.scorer, tc, epoch_logger(stage));
  TrainedModel m;
  m.name = stem;
  const auto bytes = serialize_params(tr.params);
  m.path = store_.put("models", stem, ".bin", bytes);
  m.sha256 = sha256_hex(bytes);
  m.params = std::move(tr.params);
  return m;
}

const TrainedModel& Experiment::stage3() {
  if (stage3_) return *stage3_;
  const PairsArtifact& pairs = stage2();
  nlohmann::ordered_json inputs{{"pairs", pairs.sha256},
                                {"scorer", cdr::to_json(config_.scorer)},
                                {"train", cdr::to_json(config_.stage3)},
                                {"seed", config_.unit_seed("stage3")}};
  const std::string key = key_of(inputs);
  const fs::path report_rel = "reports/stage3.json";
  const bool ran = options_.force || !store_.up_to_date("stage3", key);
  TrainedModel m;
  if (ran) {
    TrainConfig tc = config_.stage3;
    tc.seed = config_.unit_seed("stage3");
    const double before = pair_loss(init_params(config_.scorer, derive_seed(tc.seed, "init")), pairs.manifest);
    m = train_cdr(pairs.manifest, "cdr", "stage3");
    const double after = pair_loss(m.params, pairs.manifest);
    nlohmann::ordered_json report{{"model", m.path.generic_string()},
                                  {"sha256", m.sha256},
                                  {"pairs", pairs.path.generic_string()},
                                  {"pairs_sha256", pairs.sha256},
                                  {"fidelity_before", before},
                                  {"fidelity_after", after}};
    write_text(store_.abs(report_rel), report.dump(2) + "\n");
    store_.record("stage3", key, {m.path, report_rel});
  } else {
    const auto report = load_json(store_.abs(report_rel));
    m.name = "cdr";
    m.path = report.at("model").get<std::string>();
    store_.verify(m.path);
    m.sha256 = report.at("sha256").get<std::string>();
    m.params = load_params(store_.abs(m.path));
  }
  m.trained_on = "";
  status("stage3", ran);
  stage3_ = std::move(m);
  return *stage3_;
}

std::vector<MatrixDataset> Experiment::eval_datasets(bool against_truth) {
  std::vector<MatrixDataset> out;
  for (const auto& ds : data().datasets) {
    MatrixDataset md;
    md.name = ds.config.name;
    md.manifest = &ds.manifest;
    md.targets = against_truth ? ds.truth.qstar : ds.manifest.rescaled;
    out.push_back(std::move(md));
  }
  return out;
}

CrossMatrix Experiment::evaluate(const std::vector<MatrixModel>& models, bool against_truth) {
  const auto datasets = eval_datasets(against_truth);
  return cross_dataset_matrix(models, datasets, config_.unit_seed("eval"));
}

const CrossEvalResult& Experiment::cross_eval() {
  if (cross_) return *cross_;
  const auto& s1 = stage1();
  const auto& cdr_model = stage3();
  nlohmann::ordered_json hashes = nlohmann::ordered_json::array();
  for (const auto& m : s1) hashes.push_back(m.sha256);
  hashes.push_back(cdr_model.sha256);
  nlohmann::ordered_json inputs{
      {"models", hashes}, {"data", dataset_digest()}, {"eval_patches", config_.eval_patches}, {"seed", config_.seed}};
  const std::string key = key_of(inputs);
  const fs::path q_json = "reports/matrix_qstar.json";
  const fs::path q_csv = "reports/matrix_qstar.csv";
  const fs::path l_json = "reports/matrix_labels.json";
  const fs::path l_csv = "reports/matrix_labels.csv";
  const bool ran = options_.force || !store_.up_to_date("cross_eval", key);
  CrossEvalResult result;
  if (ran) {
    std::vector<MatrixModel> models;
    for (const auto& m : s1) models.push_back({m.name, m.trained_on, predictor(m.params)});
    models.push_back({"cdr", "", predictor(cdr_model.params)});
    progress("[cross_eval] evaluating " + std::to_string(models.size()) + " scorers on " +
             std::to_string(config_.datasets.size()) + " datasets");
    result.vs_qstar = evaluate(models, true);
    result.vs_labels = evaluate(models, false);
    write_text(store_.abs(q_json), result.vs_qstar.to_json().dump(2) + "\n");
    write_text(store_.abs(q_csv), result.vs_qstar.to_csv());
    write_text(store_.abs(l_json), result.vs_labels.to_json().dump(2) + "\n");
    write_text(store_.abs(l_csv), result.vs_labels.to_csv());
    store_.record("cross_eval", key, {q_json, q_csv, l_json, l_csv});
  } else {
    result.vs_qstar = CrossMatrix::from_json(load_json(store_.abs(q_json)));
    result.vs_labels = CrossMatrix::from_json(load_json(store_.abs(l_json)));
  }
  status("cross_eval", ran);
  cross_ = std::move(result);
  return *cross_;
}

nlohmann::ordered_json Experiment::run_all() {
  const auto& s1 = stage1();
  const auto& pairs = stage2();
  const auto& cdr_model = stage3();
  const auto& cross = cross_eval();

  nlohmann::ordered_json summary;
  summary["config_sha256"] = sha256_hex(config_.to_json().dump());
  summary["seed"] = config_.seed;
  summary["datasets"] = nlohmann::ordered_json::array();
  for (const auto& d : config_.datasets) summary["datasets"].push_back(d.name);
  summary["stage1"] = nlohmann::ordered_json::array();
  for (const auto& m : s1) {
    summary["stage1"].push_back({{"dataset", m.name}, {"model", m.path.generic_string()}, {"sha256", m.sha256}});
  }
  summary["pairs"] = {{"path", pairs.path.generic_string()}, {"sha256", pairs.sha256},
                      {"n_pairs", pairs.manifest.n_pairs()}};
  summary["cdr"] = {{"model", cdr_model.path.generic_string()}, {"sha256", cdr_model.sha256}};
  summary["matrix_qstar"] = cross.vs_qstar.to_json();
  summary["matrix_labels"] = cross.vs_labels.to_json();

  nlohmann::ordered_json robustness;
  for (std::size_t r = 0; r < s1.size(); ++r) {
    robustness[s1[r].name] = {{"own_srcc", cross.vs_qstar.cells[r][r].srcc},
                              {"off_diagonal_mean_srcc", cross.vs_qstar.mean_srcc(r, s1[r].name)}};
  }
  robustness["cdr"] = {{"mean_srcc", cross.vs_qstar.mean_srcc(s1.size())}};
  summary["robustness"] = robustness;
  write_text(store_.abs("reports/summary.json"), summary.dump(2) + "\n");
  return summary;
}

AblationReport Experiment::ablation_pairs() {
  const auto& s1 = stage1();
  std::vector<std::string> names;
  nlohmann::ordered_json hashes = nlohmann::ordered_json::array();
  for (const auto& m : s1) {
    names.push_back(m.name);
    hashes.push_back(m.sha256);
  }
  nlohmann::ordered_json inputs{{"models", hashes},
                                {"ladder", config_.pair_ladder},
                                {"data", dataset_digest()},
                                {"scorer", cdr::to_json(config_.scorer)},
                                {"train", cdr::to_json(config_.stage3)},
                                {"seed", config_.seed},
                                {"eval_patches", config_.eval_patches}};
  const std::string key = key_of(inputs);
  const fs::path report_rel = "reports/ablation_pairs.json";
  if (!options_.force && store_.up_to_date("ablation_pairs", key)) {
    status("ablation_pairs", false);
    return AblationReport::from_json(load_json(store_.abs(report_rel)));
  }
  const std::size_t largest = *std::max_element(config_.pair_ladder.begin(), config_.pair_ladder.end());
  const PairManifest full = generate_pair_manifest(snapshot(names), data().pool, largest, config_.unit_seed("pairs"),
                                                   false, {config_.pool.short_side, config_.scorer.patch_size});
  AblationReport report;
  report.kind = "pairs";
  report.datasets = names;
  std::vector<fs::path> outputs;
  for (std::size_t rung : config_.pair_ladder) {
    PairManifest prefix = full;
    prefix.pairs.resize(rung);
    const fs::path tmp = store_.abs("pairs/.pending.csv");
    write_pair_manifest(prefix, tmp);
    const std::string sha = sha256_file(tmp);
    const fs::path rel = fs::path("pairs") / ("ladder" + std::to_string(rung) + "-" + sha.substr(0, 16) + ".csv");
    fs::rename(tmp, store_.abs(rel));
    fs::rename(sidecar_path(tmp), store_.abs(sidecar_path(rel)));
    outputs.push_back(rel);

    const std::string stage = "ablation_pairs/" + std::to_string(rung);
    TrainedModel m = train_cdr(prefix, "cdr-pairs" + std::to_string(rung), stage);
    outputs.push_back(m.path);
    const CrossMatrix cm = evaluate({{m.name, "", predictor(m.params)}}, true);
    AblationRow row;
    row.label = std::to_string(rung);
    row.n_pairs = rung;
    row.ensemble = names;
    row.pairs_sha256 = sha;
    row.model_sha256 = m.sha256;
    for (const auto& cell : cm.cells[0]) row.srcc.push_back(cell.srcc);
    row.mean_srcc = cm.mean_srcc(0);
    progress("[ablation_pairs] " + row.label + " pairs: mean SRCC " + format_fixed(row.mean_srcc, 4));
    report.rows.push_back(std::move(row));
  }
  write_text(store_.abs(report_rel), report.to_json().dump(2) + "\n");
  outputs.push_back(report_rel);
  store_.record("ablation_pairs", key, outputs);
  status("ablation_pairs", true);
  return report;
}

AblationReport Experiment::ablation_ensemble() {
  const auto& s1 = stage1();
  nlohmann::ordered_json hashes = nlohmann::ordered_json::array();
  std::vector<std::string> all_names;
  for (const auto& m : s1) {
    hashes.push_back(m.sha256);
    all_names.push_back(m.name);
  }
  nlohmann::ordered_json inputs{{"models", hashes},
                                {"subsets", config_.ensemble_subsets},
                                {"n_pairs", config_.n_pairs},
                                {"data", dataset_digest()},
                                {"scorer", cdr::to_json(config_.scorer)},
                                {"train", cdr::to_json(config_.stage3)},
                                {"seed", config_.seed},
                                {"eval_patches", config_.eval_patches}};
  const std::string key = key_of(inputs);
  const fs::path report_rel = "reports/ablation_ensemble.json";
  if (!options_.force && store_.up_to_date("ablation_ensemble", key)) {
    status("ablation_ensemble", false);
    return AblationReport::from_json(load_json(store_.abs(report_rel)));
  }
  AblationReport report;
  report.kind = "ensemble";
  report.datasets = all_names;
  std::vector<fs::path> outputs;
  for (const auto& subset : config_.ensemble_subsets) {
    const std::string label = join(subset, "+");
    const PairManifest pm = generate_pair_manifest(snapshot(subset), data().pool, config_.n_pairs,
                                                   config_.unit_seed("pairs"), false,
                                                   {config_.pool.short_side, config_.scorer.patch_size});
    const fs::path tmp = store_.abs("pairs/.pending.csv");
    write_pair_manifest(pm, tmp);
    const std::string sha = sha256_file(tmp);
    const fs::path rel = fs::path("pairs") / ("ens-" + join(subset, "") + "-" + sha.substr(0, 16) + ".csv");
    fs::rename(tmp, store_.abs(rel));
    fs::rename(sidecar_path(tmp), store_.abs(sidecar_path(rel)));
    outputs.push_back(rel);

    TrainedModel m = train_cdr(pm, "cdr-ens" + join(subset, ""), "ablation_ensemble/" + label);
    outputs.push_back(m.path);
    const CrossMatrix cm = evaluate({{m.name, "", predictor(m.params)}}, true);
    AblationRow row;
    row.label = label;
    row.n_pairs = pm.n_pairs();
    row.ensemble = subset;
    row.pairs_sha256 = sha;
    row.model_sha256 = m.sha256;
    for (const auto& cell : cm.cells[0]) row.srcc.push_back(cell.srcc);
    row.mean_srcc = cm.mean_srcc(0);
    progress("[ablation_ensemble] {" + label + "}: mean SRCC " + format_fixed(row.mean_srcc, 4));
    report.rows.push_back(std::move(row));
  }
  write_text(store_.abs(report_rel), report.to_json().dump(2) + "\n");
  outputs.push_back(report_rel);
  store_.record("ablation_ensemble", key, outputs);
  status("ablation_ensemble", true);
  return report;
}

}  // namespace cdr
