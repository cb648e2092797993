#include "cdr/pseudolabel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cdr/error.hpp"

namespace cdr {

EnsembleMember EnsembleSnapshot::member(std::string source, ScorerParams params) {
  EnsembleMember m;
  m.source = std::move(source);
  m.model_hash = sha256_hex(serialize_params(params));
  m.params = std::move(params);
  return m;
}

void EnsembleSnapshot::validate() const {
  if (members.empty()) throw DataError("ensemble needs at least one scorer");
  for (const auto& m : members) {
    if (m.params.config.patch_size != members.front().params.config.patch_size) {
      throw DataError("ensemble scorers disagree on patch size");
    }
  }
}

std::vector<PairRow> PairManifest::rows() const {
  std::vector<PairRow> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.x_id, p.y_id, p.p_r});
  return out;
}

double relative_prob(double q_x, double q_y) {
  const double d = q_x - q_y;
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

double ensemble_pseudolabel(std::span<const double> probs) {
  if (probs.empty()) throw DataError("ensemble pseudo-label needs at least one model");
  double total = 0.0;
  for (double p : probs) total += p;
  return total / static_cast<double>(probs.size());
}

std::map<std::string, Patch> central_crops(const DatasetManifest& pool, const PoolPreprocess& prep) {
  std::vector<Patch> crops(pool.records.size());
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(crops.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    crops[i] = resize_short_side_and_center_crop(*pool.records[i], prep.short_side, prep.crop);
  }
  std::map<std::string, Patch> store;
  for (auto& c : crops) {
    std::string id = c.source_id;
    store.emplace(std::move(id), std::move(c));
  }
  return store;
}

ScoreTable score_pool(const EnsembleSnapshot& snapshot, std::span<const std::string> image_ids,
                      const std::map<std::string, Patch>& image_store) {
  snapshot.validate();
  ScoreTable table;
  table.ids.assign(image_ids.begin(), image_ids.end());
  std::vector<const Patch*> patches;
  for (const auto& id : image_ids) {
    const auto it = image_store.find(id);
    if (it == image_store.end()) throw DataError("missing image '" + id + "' in pool");
    patches.push_back(&it->second);
  }
  const std::size_t n_models = snapshot.members.size();
  table.scores.assign(n_models, std::vector<double>(patches.size()));
  const std::ptrdiff_t cells = static_cast<std::ptrdiff_t>(n_models * patches.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t c = 0; c < cells; ++c) {
    const std::size_t m = static_cast<std::size_t>(c) / patches.size();
    const std::size_t i = static_cast<std::size_t>(c) % patches.size();
    table.scores[m][i] = score_patch(snapshot.members[m].params, *patches[i]);
  }
  return table;
}

namespace {

// Balanced Feistel network over `2 * half_bits` bits with SplitMix-style rounds.
class FeistelPermutation {
 public:
  FeistelPermutation(std::uint64_t domain, std::uint64_t seed) : domain_(domain) {
    int bits = std::max(2, static_cast<int>(std::bit_width(domain - 1)));
    if (bits % 2) ++bits;
    half_bits_ = bits / 2;
    mask_ = (std::uint64_t{1} << half_bits_) - 1;
    std::uint64_t state = seed;
    for (auto& k : keys_) k = splitmix64(state);
  }

  std::uint64_t operator()(std::uint64_t index) const {
    std::uint64_t v = index;
    do {
      v = encrypt(v);
    } while (v >= domain_);
    return v;
  }

 private:
  std::uint64_t encrypt(std::uint64_t v) const {
    std::uint64_t left = v >> half_bits_;
    std::uint64_t right = v & mask_;
    for (const std::uint64_t key : keys_) {
      std::uint64_t z = right ^ key;
      z = (z ^ (z >> 31)) * 0x7fb5d329728ea185ULL;
      z = (z ^ (z >> 27)) * 0x81dadef4bc2dd44dULL;
      z ^= z >> 33;
      const std::uint64_t next = left ^ (z & mask_);
      left = right;
      right = next;
    }
    return (left << half_bits_) | right;
  }

  std::uint64_t domain_;
  int half_bits_ = 1;
  std::uint64_t mask_ = 1;
  std::uint64_t keys_[6]{};
};

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> sample_pair_indices(std::size_t n_images, std::size_t n_pairs,
                                                                     std::uint64_t seed) {
  if (n_images < 2) throw DataError("pair sampling needs at least 2 images");
  const std::uint64_t domain = static_cast<std::uint64_t>(n_images) * (n_images - 1);
  if (n_pairs > domain) {
    throw DataError("requested " + std::to_string(n_pairs) + " pairs but only " + std::to_string(domain) +
                    " ordered pairs exist in a pool of " + std::to_string(n_images));
  }
  const FeistelPermutation perm(domain, derive_seed(seed, "pairs"));
  std::vector<std::pair<std::size_t, std::size_t>> out(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    const std::uint64_t k = perm(i);
    const std::size_t x = static_cast<std::size_t>(k / (n_images - 1));
    const std::size_t r = static_cast<std::size_t>(k % (n_images - 1));
    out[i] = {x, r < x ? r : r + 1};
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> sample_pairs(std::span<const std::string> image_ids,
                                                              std::size_t n_pairs, std::uint64_t seed) {
  const std::set<std::string> unique(image_ids.begin(), image_ids.end());
  if (unique.size() != image_ids.size()) throw DataError("duplicate image ids in pool");
  const auto idx = sample_pair_indices(image_ids.size(), n_pairs, seed);
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(idx.size());
  for (const auto& [x, y] : idx) out.emplace_back(image_ids[x], image_ids[y]);
  return out;
}

PairManifest generate_pair_manifest(const EnsembleSnapshot& snapshot, const DatasetManifest& pool,
                                    std::size_t n_pairs, std::uint64_t seed, bool keep_per_model,
                                    const PoolPreprocess& prep) {
  snapshot.validate();
  if (prep.crop != snapshot.members.front().params.config.patch_size) {
    throw DataError("pool crop size does not match the ensemble's patch size");
  }
  std::vector<std::string> ids = pool.ids();
  std::sort(ids.begin(), ids.end());
  // Validate the request before paying for any forward passes.
  const auto idx = sample_pair_indices(ids.size(), n_pairs, seed);
  const auto store = central_crops(pool, prep);
  const ScoreTable table = score_pool(snapshot, ids, store);

  PairManifest manifest;
  manifest.pool = pool.name;
  manifest.seed = seed;
  for (const auto& m : snapshot.members) manifest.ensemble.emplace_back(m.source, m.model_hash);
  manifest.pairs.resize(idx.size());
  const std::size_t n_models = snapshot.members.size();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(idx.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto [x, y] = idx[i];
    std::vector<double> probs(n_models);
    for (std::size_t m = 0; m < n_models; ++m) probs[m] = relative_prob(table.at(m, x), table.at(m, y));
    PairSample& s = manifest.pairs[i];
    s.x_id = ids[x];
    s.y_id = ids[y];
    s.p_r = ensemble_pseudolabel(probs);
    if (keep_per_model) s.per_model = std::move(probs);
  }
  return manifest;
}

fs::path sidecar_path(const fs::path& csv_path) {
  fs::path p = csv_path;
  p.replace_extension(".json");
  return p;
}

void write_pair_manifest(const PairManifest& manifest, const fs::path& csv_path) {
  const std::size_t n_models = manifest.ensemble.size();
  const bool per_model = !manifest.pairs.empty() && !manifest.pairs.front().per_model.empty();
  std::ostringstream csv;
  csv << "x_id,y_id,p_r";
  if (per_model) {
    for (std::size_t m = 1; m <= n_models; ++m) csv << ",p_r_" << m;
  }
  csv << '\n';
  for (const auto& p : manifest.pairs) {
    csv << p.x_id << ',' << p.y_id << ',' << format_double(p.p_r);
    if (per_model) {
      for (double v : p.per_model) csv << ',' << format_double(v);
    }
    csv << '\n';
  }
  write_text(csv_path, csv.str());

  nlohmann::ordered_json side;
  side["pool"] = manifest.pool;
  side["n_pairs"] = manifest.pairs.size();
  side["seed"] = manifest.seed;
  side["ensemble"] = nlohmann::ordered_json::array();
  for (const auto& [source, hash] : manifest.ensemble) {
    side["ensemble"].push_back({{"source", source}, {"model_sha256", hash}});
  }
  write_text(sidecar_path(csv_path), side.dump(2) + "\n");
}

PairManifest read_pair_manifest(const fs::path& csv_path) {
  PairManifest manifest;
  const fs::path side_path = sidecar_path(csv_path);
  if (fs::exists(side_path)) {
    const auto side = nlohmann::json::parse(read_text(side_path), nullptr, false);
    if (side.is_discarded()) throw DataError("malformed pair sidecar " + side_path.string());
    manifest.pool = side.value("pool", "");
    manifest.seed = side.value("seed", std::uint64_t{0});
    for (const auto& e : side.value("ensemble", nlohmann::json::array())) {
      manifest.ensemble.emplace_back(e.value("source", ""), e.value("model_sha256", ""));
    }
  }
  std::istringstream in(read_text(csv_path));
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty pair manifest " + csv_path.string());
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "x_id" || header[1] != "y_id" || header[2] != "p_r") {
    throw DataError("pair manifest header must start with x_id,y_id,p_r");
  }
  std::set<std::pair<std::string, std::string>> seen;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) throw DataError("malformed pair row in " + csv_path.string());
    PairSample s;
    s.x_id = f[0];
    s.y_id = f[1];
    if (s.x_id == s.y_id) throw DataError("pair with identical images: " + s.x_id);
    if (!seen.emplace(s.x_id, s.y_id).second) throw DataError("duplicate ordered pair " + s.x_id + "," + s.y_id);
    s.p_r = parse_double(f[2], "p_r");
    if (!(s.p_r > 0.0 && s.p_r < 1.0)) throw DataError("p_r outside (0, 1) in " + csv_path.string());
    for (std::size_t i = 3; i < f.size(); ++i) s.per_model.push_back(parse_double(f[i], "p_r_i"));
    manifest.pairs.push_back(std::move(s));
  }
  return manifest;
}

}  // namespace cdr
