#include "cdr/scorer.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>

#include "cdr/error.hpp"

namespace cdr {

namespace {

constexpr std::array<char, 8> kMagic{'C', 'D', 'R', 'S', 'C', 'O', 'R', 'E'};
constexpr std::uint32_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f64(double v) { bytes(&v, 8); }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (pos_ + n > in_.size()) throw DataError("corrupt model file: truncated");
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

double relu(double x) { return x > 0.0 ? x : 0.0; }

}  // namespace

void ScorerConfig::validate() const {
  if (patch_size < 1) throw DataError("patch size must be positive");
  if (channels_in < 1) throw DataError("input channel count must be positive");
  if (conv_blocks.empty()) throw DataError("scorer needs at least one conv block");
  if (hidden < 1) throw DataError("hidden width must be positive");
  for (const auto& b : conv_blocks) {
    if (b.out_channels < 1) throw DataError("conv block needs at least one output channel");
    if (b.kernel < 1 || b.kernel % 2 == 0) throw DataError("conv kernel must be odd and positive");
    if (b.stride < 1) throw DataError("conv stride must be positive");
  }
  int size = patch_size;
  for (const auto& b : conv_blocks) {
    if (b.kernel / 2 >= size && size > 1) throw DataError("conv kernel too large for its input size");
    size = (size + 2 * (b.kernel / 2) - b.kernel) / b.stride + 1;
    if (size < 1) throw DataError("spatial size collapses below 1");
  }
}

std::vector<kernels::ConvShape> ScorerConfig::conv_shapes() const {
  std::vector<kernels::ConvShape> shapes;
  int channels = channels_in;
  int size = patch_size;
  for (const auto& b : conv_blocks) {
    kernels::ConvShape s{channels, size, b.out_channels, b.kernel, b.stride};
    shapes.push_back(s);
    channels = b.out_channels;
    size = s.out_size();
  }
  return shapes;
}

Layout Layout::for_config(const ScorerConfig& config) {
  config.validate();
  Layout layout;
  auto add = [&](std::string name, std::vector<int> shape) {
    std::size_t size = 1;
    for (int d : shape) size *= static_cast<std::size_t>(d);
    layout.slots.push_back({std::move(name), layout.total, std::move(shape), size});
    layout.total += size;
  };
  const auto shapes = config.conv_shapes();
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    add("conv" + std::to_string(i) + ".weight", {s.out_channels, s.in_channels, s.kernel, s.kernel});
    add("conv" + std::to_string(i) + ".bias", {s.out_channels});
  }
  add("fc1.weight", {config.feature_width(), config.hidden});
  add("fc1.bias", {config.hidden});
  add("fc2.weight", {config.hidden, 1});
  add("fc2.bias", {1});
  return layout;
}

const TensorSlot& Layout::slot(const std::string& name) const {
  for (const auto& s : slots) {
    if (s.name == name) return s;
  }
  throw DataError("no tensor named " + name);
}

ScorerParams init_params(const ScorerConfig& config, std::uint64_t seed) {
  ScorerParams params;
  params.config = config;
  params.layout = Layout::for_config(config);
  params.values.assign(params.layout.total, 0.0);
  Rng rng(seed);
  for (const auto& slot : params.layout.slots) {
    if (slot.shape.size() < 2) continue;  // biases stay zero
    std::size_t fan_in = 1;
    if (slot.shape.size() == 4) {
      fan_in = static_cast<std::size_t>(slot.shape[1]) * slot.shape[2] * slot.shape[3];
    } else {
      fan_in = static_cast<std::size_t>(slot.shape[0]);
    }
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < slot.size; ++i) params.values[slot.offset + i] = std_dev * rng.normal();
  }
  return params;
}

void check_layout(const ScorerParams& params, const ScorerConfig& expected) {
  if (!(params.config == expected) || params.values.size() != Layout::for_config(expected).total) {
    throw DataError("layout mismatch: model was saved with a different scorer configuration");
  }
}

ForwardResult forward(const ScorerParams& params, const Patch& patch) {
  const ScorerConfig& cfg = params.config;
  if (patch.size != cfg.patch_size || patch.channels != cfg.channels_in ||
      patch.pixels.size() != static_cast<std::size_t>(patch.size) * patch.size * patch.channels) {
    throw DataError("patch shape does not match scorer configuration");
  }
  if (params.values.size() != params.layout.total) throw DataError("parameter vector does not match its layout");
  ForwardResult result;
  ForwardTrace& t = result.trace;
  t.param_count = params.values.size();
  t.input = patch.pixels;

  const auto shapes = cfg.conv_shapes();
  const std::vector<double>* x = &t.input;
  std::size_t slot = 0;
  for (const auto& s : shapes) {
    const auto& w = params.layout.slots[slot++];
    const auto& b = params.layout.slots[slot++];
    std::vector<double> pre(s.out_len());
    kernels::conv_forward(s, *x, params.tensor(w), params.tensor(b), pre);
    std::vector<double> post(pre.size());
    std::transform(pre.begin(), pre.end(), post.begin(), relu);
    t.conv_pre.push_back(std::move(pre));
    t.conv_post.push_back(std::move(post));
    x = &t.conv_post.back();
  }

  const auto& last = shapes.back();
  const int p = last.out_channels;
  const std::size_t plane = static_cast<std::size_t>(last.out_size()) * last.out_size();
  t.pooled.assign(p, 0.0);
  for (int c = 0; c < p; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += (*x)[c * plane + i];
    t.pooled[c] = acc / static_cast<double>(plane);
  }

  const int h = cfg.hidden;
  const auto w1 = params.tensor(params.layout.slots[slot++]);
  const auto b1 = params.tensor(params.layout.slots[slot++]);
  const auto w2 = params.tensor(params.layout.slots[slot++]);
  const auto b2 = params.tensor(params.layout.slots[slot++]);
  t.hidden_pre.assign(b1.begin(), b1.end());
  for (int i = 0; i < p; ++i) {
    const double g = t.pooled[i];
    const double* row = w1.data() + static_cast<std::size_t>(i) * h;
    for (int j = 0; j < h; ++j) t.hidden_pre[j] += g * row[j];
  }
  t.hidden_post.resize(h);
  std::transform(t.hidden_pre.begin(), t.hidden_pre.end(), t.hidden_post.begin(), relu);
  double score = b2[0];
  for (int j = 0; j < h; ++j) score += t.hidden_post[j] * w2[j];
  t.score = score;
  result.score = score;
  return result;
}

double score_patch(const ScorerParams& params, const Patch& patch) { return forward(params, patch).score; }

void backward_into(const ForwardTrace& t, const ScorerParams& params, double upstream, std::span<double> grad) {
  if (t.param_count != params.values.size() || grad.size() != params.values.size()) {
    throw DataError("stale forward trace: layout mismatch");
  }
  const ScorerConfig& cfg = params.config;
  const auto shapes = cfg.conv_shapes();
  const int h = cfg.hidden;
  const int p = cfg.feature_width();
  const std::size_t n_conv = shapes.size();
  const auto& slots = params.layout.slots;
  const auto& s_w1 = slots[2 * n_conv];
  const auto& s_b1 = slots[2 * n_conv + 1];
  const auto& s_w2 = slots[2 * n_conv + 2];
  const auto& s_b2 = slots[2 * n_conv + 3];
  const auto w1 = params.tensor(s_w1);
  const auto w2 = params.tensor(s_w2);

  grad[s_b2.offset] += upstream;
  std::vector<double> d_hidden(h);
  for (int j = 0; j < h; ++j) {
    grad[s_w2.offset + j] += upstream * t.hidden_post[j];
    d_hidden[j] = t.hidden_pre[j] > 0.0 ? upstream * w2[j] : 0.0;
  }
  for (int j = 0; j < h; ++j) grad[s_b1.offset + j] += d_hidden[j];
  std::vector<double> d_pooled(p, 0.0);
  for (int i = 0; i < p; ++i) {
    const double g = t.pooled[i];
    const double* row = w1.data() + static_cast<std::size_t>(i) * h;
    double* grow = grad.data() + s_w1.offset + static_cast<std::size_t>(i) * h;
    double acc = 0.0;
    for (int j = 0; j < h; ++j) {
      grow[j] += g * d_hidden[j];
      acc += row[j] * d_hidden[j];
    }
    d_pooled[i] = acc;
  }

  // GAP spreads each pooled gradient evenly over its feature map.
  const auto& last = shapes.back();
  const std::size_t plane = static_cast<std::size_t>(last.out_size()) * last.out_size();
  std::vector<double> d_out(last.out_len());
  for (int c = 0; c < p; ++c) {
    const double v = d_pooled[c] / static_cast<double>(plane);
    std::fill(d_out.begin() + c * plane, d_out.begin() + (c + 1) * plane, v);
  }

  std::vector<double> gw;
  std::vector<double> gb;
  std::vector<double> d_in;
  for (std::size_t layer = n_conv; layer-- > 0;) {
    const auto& s = shapes[layer];
    const auto& pre = t.conv_pre[layer];
    for (std::size_t i = 0; i < d_out.size(); ++i) {
      if (!(pre[i] > 0.0)) d_out[i] = 0.0;
    }
    const std::vector<double>& input = layer == 0 ? t.input : t.conv_post[layer - 1];
    const auto& s_w = slots[2 * layer];
    const auto& s_b = slots[2 * layer + 1];
    gw.assign(s.weight_len(), 0.0);
    gb.assign(s.out_channels, 0.0);
    d_in.assign(layer == 0 ? 0 : s.in_len(), 0.0);
    kernels::conv_backward(s, input, params.tensor(s_w), d_out, d_in, gw, gb);
    for (std::size_t i = 0; i < gw.size(); ++i) grad[s_w.offset + i] += gw[i];
    for (std::size_t i = 0; i < gb.size(); ++i) grad[s_b.offset + i] += gb[i];
    d_out.swap(d_in);
  }
}

std::vector<double> backward(const ForwardTrace& trace, const ScorerParams& params, double upstream) {
  std::vector<double> grad(params.values.size(), 0.0);
  backward_into(trace, params, upstream, grad);
  return grad;
}

double predict_image(const ScorerParams& params, const ImageRecord& record, int n_patches, int size, Rng& rng) {
  if (n_patches < 1) throw DataError("need at least one patch per image");
  const auto patches = sample_patches(record, n_patches, size, false, rng);
  double total = 0.0;
  for (const auto& patch : patches) total += score_patch(params, patch);
  return total / static_cast<double>(patches.size());
}

std::vector<std::uint8_t> serialize_params(const ScorerParams& params) {
  Writer w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kFormatVersion);
  const ScorerConfig& c = params.config;
  w.u32(static_cast<std::uint32_t>(c.patch_size));
  w.u32(static_cast<std::uint32_t>(c.channels_in));
  w.u32(static_cast<std::uint32_t>(c.conv_blocks.size()));
  for (const auto& b : c.conv_blocks) {
    w.u32(static_cast<std::uint32_t>(b.out_channels));
    w.u32(static_cast<std::uint32_t>(b.kernel));
    w.u32(static_cast<std::uint32_t>(b.stride));
  }
  w.u32(static_cast<std::uint32_t>(c.hidden));
  w.u32(static_cast<std::uint32_t>(c.activation));
  w.u64(params.values.size());
  for (double v : params.values) w.f64(v);
  const std::uint32_t crc = crc32(w.data());
  w.u32(crc);
  return std::move(w.data());
}

ScorerParams deserialize_params(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() + 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw DataError("not a scorer model file");
  }
  std::uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  const auto body = bytes.first(bytes.size() - 4);
  if (crc32(body) != stored_crc) throw DataError("corrupt model file: checksum mismatch");

  Reader r(body);
  char magic[8];
  r.bytes(magic, 8);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw DataError("model file version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kFormatVersion) + ")");
  }
  ScorerParams params;
  ScorerConfig& c = params.config;
  c.patch_size = static_cast<int>(r.u32());
  c.channels_in = static_cast<int>(r.u32());
  const std::uint32_t n_blocks = r.u32();
  if (n_blocks > 64) throw DataError("corrupt model file: implausible block count");
  c.conv_blocks.clear();
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    ConvBlock b;
    b.out_channels = static_cast<int>(r.u32());
    b.kernel = static_cast<int>(r.u32());
    b.stride = static_cast<int>(r.u32());
    c.conv_blocks.push_back(b);
  }
  c.hidden = static_cast<int>(r.u32());
  if (r.u32() != static_cast<std::uint32_t>(Activation::relu)) throw DataError("unknown activation in model file");
  params.layout = Layout::for_config(c);
  const std::uint64_t count = r.u64();
  if (count != params.layout.total) throw DataError("layout mismatch: parameter count disagrees with configuration");
  if (r.remaining() != count * 8) throw DataError("corrupt model file: size mismatch");
  params.values.resize(count);
  for (auto& v : params.values) v = r.f64();
  return params;
}

void save_params(const ScorerParams& params, const fs::path& path) { write_file(path, serialize_params(params)); }

ScorerParams load_params(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("model file not found: " + path.string());
  return deserialize_params(read_file(path));
}

}  // namespace cdr
