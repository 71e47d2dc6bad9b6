#pragma once

// Small few-shot segmentation model used as the frozen base network: a
// 12-block convolutional encoder with hookable per-layer outputs and a
// class-agnostic correlation decoder.
//
// Encoder block l: y = conv3x3(act(x)), act = identity for l = 1 and ReLU
// afterwards (pre-activation, so hooked features are signed), followed by 2x2
// average pooling when l is a downsample layer.
//
// Decoder, at the final stride:
//   p_fg, p_bg   masked / inverse-masked means of support features
//   corr         cos(q, p_fg), cos(q, p_bg), max over support foreground of cos(q, s)
//   x = [F_q, p_fg broadcast, corr] -> conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1 (2)
//   bilinear upsampling by the stride gives (1, 2, H, W) logits.
//
// Base checkpoint layout (little-endian):
//   char[8] "AFSSBASE", u32 version (1)
//   u32 input_channels, u32 decoder_channels
//   u32 L, u32[L] channel plan, u32 D, u32[D] downsample layers
//   u32 P, P x { string name, u32 rank, u32[rank] dims, f32[numel] values }

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "afss/binary_io.hpp"
#include "afss/ops.hpp"
#include "afss/pam.hpp"

namespace afss {

struct ModelConfig {
  std::size_t input_channels = 3;
  std::vector<std::size_t> channel_plan{16, 16, 32, 32, 48, 48, 64, 64, 64, 64, 64, 64};
  std::vector<std::size_t> downsample_after{4, 8};
  std::size_t decoder_channels = 32;

  std::size_t layer_count() const { return channel_plan.size(); }
  std::size_t stride() const { return std::size_t{1} << downsample_after.size(); }
  bool downsamples(std::size_t layer) const {
    return std::find(downsample_after.begin(), downsample_after.end(), layer) != downsample_after.end();
  }

  void validate() const {
    if (channel_plan.empty()) throw ConfigError("model needs at least one encoder layer");
    if (input_channels == 0 || decoder_channels == 0) throw ConfigError("channel counts must be positive");
    for (std::size_t c : channel_plan)
      if (c == 0) throw ConfigError("channel plan entries must be positive");
    std::set<std::size_t> seen;
    for (std::size_t l : downsample_after) {
      if (l < 1 || l > layer_count() || !seen.insert(l).second) throw ConfigError("invalid downsample layer");
    }
  }

  // Stages are separated by the downsample layers.
  EncoderLayout layout() const {
    EncoderLayout out;
    out.channels = channel_plan;
    std::size_t count = 0;
    for (std::size_t l = 1; l <= layer_count(); ++l) {
      ++count;
      if (downsamples(l) && l != layer_count()) {
        out.layers_per_stage.push_back(count);
        count = 0;
      }
    }
    if (count) out.layers_per_stage.push_back(count);
    return out;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
class ReferenceModel {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  ReferenceModel() = default;

  ReferenceModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    std::size_t in = config_.input_channels;
    for (std::size_t l = 1; l <= config_.layer_count(); ++l) {
      const std::size_t out = config_.channel_plan[l - 1];
      const std::string name = "encoder.block" + std::to_string(l);
      encoder_w_.emplace_back(name + ".weight", he_init({out, in, 3, 3}, rng));
      encoder_b_.emplace_back(name + ".bias", Tensor<T>({out}));
      in = out;
    }
    const std::size_t c = in, dc = config_.decoder_channels;
    dec1_w_ = Parameter<T>("decoder.conv1.weight", he_init({dc, 2 * c + 3, 3, 3}, rng));
    dec1_b_ = Parameter<T>("decoder.conv1.bias", Tensor<T>({dc}));
    dec2_w_ = Parameter<T>("decoder.conv2.weight", he_init({dc, dc, 3, 3}, rng));
    dec2_b_ = Parameter<T>("decoder.conv2.bias", Tensor<T>({dc}));
    head_w_ = Parameter<T>("decoder.head.weight", he_init({2, dc, 1, 1}, rng, 0.1));
    head_b_ = Parameter<T>("decoder.head.bias", Tensor<T>({2}));
  }

  const ModelConfig& config() const { return config_; }
  EncoderLayout layout() const { return config_.layout(); }
  std::size_t feature_channels() const { return config_.channel_plan.back(); }

  ParameterRefs<T> parameters() {
    ParameterRefs<T> out;
    for (std::size_t i = 0; i < encoder_w_.size(); ++i) {
      out.push_back(&encoder_w_[i]);
      out.push_back(&encoder_b_[i]);
    }
    for (auto* p : {&dec1_w_, &dec1_b_, &dec2_w_, &dec2_b_, &head_w_, &head_b_}) out.push_back(p);
    return out;
  }

  void freeze(bool on = true) {
    for (auto* p : parameters()) p->freeze(on);
  }

  std::size_t parameter_count() { return count_parameters(parameters(), false); }

  bool frozen() const {
    auto all = [](const std::vector<Parameter<T>>& v) {
      return std::all_of(v.begin(), v.end(), [](const Parameter<T>& p) { return p.frozen; });
    };
    return all(encoder_w_) && all(encoder_b_) && dec1_w_.frozen && dec1_b_.frozen && dec2_w_.frozen &&
           dec2_b_.frozen && head_w_.frozen && head_b_.frozen;
  }

  std::uint64_t weight_hash() {
    Fnv1a h;
    for (auto* p : parameters()) h.update(p->value().data(), p->value().size() * sizeof(T));
    return h.value();
  }

  // Encoder block `layer` (1-based).
  Var<T> block(std::size_t layer, const Var<T>& x) const {
    const Var<T> act = layer == 1 ? x : relu(x);
    Var<T> y = conv2d(act, encoder_w_.at(layer - 1).var, encoder_b_.at(layer - 1).var);
    if (config_.downsamples(layer)) y = avg_pool2(y);
    return y;
  }

  // Runs blocks (from, to]; `hook(l, y)` may replace each block output.
  template <typename Hook>
  Var<T> encode(Var<T> x, std::size_t from, std::size_t to, Hook&& hook) const {
    for (std::size_t l = from + 1; l <= to; ++l) x = hook(l, block(l, x));
    return x;
  }

  Var<T> encode(Var<T> x, std::size_t from, std::size_t to) const {
    return encode(std::move(x), from, to, [](std::size_t, Var<T> y) { return y; });
  }

  // query (1,C,h,w), support (k,C,h,w), masks (k,H,W) at image resolution.
  Var<T> decode(const Var<T>& query, const Var<T>& support, const Tensor<T>& masks) const {
    require_rank(masks, 3, "decode masks");
    const std::size_t k = support.dim(0), h = query.dim(2), w = query.dim(3);
    const std::size_t stride = masks.dim(1) / h;
    if (masks.dim(0) != k || stride == 0 || masks.dim(1) != h * stride || masks.dim(2) != w * stride) {
      throw ShapeError("decode: masks " + shape_to_string(masks.shape()) + " do not match features " +
                       shape_to_string(support.shape()));
    }
    Tensor<T> fg({k, h, w}), bg({k, h, w}), hard({k, h, w});
    const T inv = T(1) / static_cast<T>(stride * stride);
    for (std::size_t b = 0; b < k; ++b)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          T acc = 0;
          for (std::size_t dy = 0; dy < stride; ++dy)
            for (std::size_t dx = 0; dx < stride; ++dx) acc += masks.at(b, y * stride + dy, x * stride + dx);
          fg.at(b, y, x) = acc * inv;
          bg.at(b, y, x) = T(1) - acc * inv;
          hard.at(b, y, x) = acc * inv >= T(0.5) ? T(1) : T(0);
        }
    const Var<T> p_fg = weighted_mean(support, fg);
    const Var<T> p_bg = weighted_mean(support, bg);
    const Var<T> qn = l2_normalize(query, 1);
    const Var<T> sn = l2_normalize(support, 1);
    auto as_channel = [h, w](Var<T> m) { return reshape(m, {1, 1, h, w}); };
    const Var<T> cos_fg = as_channel(channel_dot(qn, l2_normalize(p_fg, 0)));
    const Var<T> cos_bg = as_channel(channel_dot(qn, l2_normalize(p_bg, 0)));
    const Var<T> corr = max_correlation(qn, sn, hard);
    Var<T> x = concat_channels<T>({query, broadcast_vector(p_fg, 1, h, w), cos_fg, cos_bg, corr});
    x = relu(conv2d(x, dec1_w_.var, dec1_b_.var));
    x = relu(conv2d(x, dec2_w_.var, dec2_b_.var));
    x = conv2d(x, head_w_.var, head_b_.var);
    return upsample_bilinear(x, stride);
  }

  void write(std::ostream& os) {
    io::write_magic(os, kMagic);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(config_.input_channels));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(config_.decoder_channels));
    auto write_list = [&os](const std::vector<std::size_t>& v) {
      io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(v.size()));
      for (auto x : v) io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(x));
    };
    write_list(config_.channel_plan);
    write_list(config_.downsample_after);
    auto params = parameters();
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (auto* p : params) {
      io::write_string(os, p->name);
      const auto& s = p->value().shape();
      io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
      for (auto d : s) io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      io::write_f32_array(os, p->value().data(), p->numel());
    }
  }

  void save(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    write(os);
  }

  static ReferenceModel read(std::istream& is) {
    io::expect_magic(is, kMagic, "base model checkpoint");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion) throw CheckpointError("base checkpoint version " + std::to_string(version) + " unsupported");
    ModelConfig cfg;
    cfg.input_channels = io::read_pod<std::uint32_t>(is);
    cfg.decoder_channels = io::read_pod<std::uint32_t>(is);
    auto read_list = [&is]() {
      const auto n = io::read_pod<std::uint32_t>(is);
      if (n > 4096) throw CheckpointError("implausible list length in base checkpoint");
      std::vector<std::size_t> v(n);
      for (auto& x : v) x = io::read_pod<std::uint32_t>(is);
      return v;
    };
    cfg.channel_plan = read_list();
    cfg.downsample_after = read_list();
    ReferenceModel model(cfg, 0);
    auto params = model.parameters();
    const auto count = io::read_pod<std::uint32_t>(is);
    if (count != params.size()) throw CheckpointError("base checkpoint parameter count mismatch");
    for (auto* p : params) {
      const std::string name = io::read_string(is);
      if (name != p->name) throw CheckpointError("base checkpoint: expected " + p->name + ", found " + name);
      const auto rank = io::read_pod<std::uint32_t>(is);
      Shape s(rank);
      for (auto& d : s) d = io::read_pod<std::uint32_t>(is);
      if (s != p->value().shape()) throw CheckpointError("base checkpoint: shape mismatch for " + name);
      io::read_f32_array(is, p->mutable_value().data(), p->numel());
    }
    model.freeze(true);  // checkpoints hold base networks, which are never trained further
    return model;
  }

  static ReferenceModel load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    return read(is);
  }

 private:
  static constexpr io::Magic kMagic{'A', 'F', 'S', 'S', 'B', 'A', 'S', 'E'};

  static Tensor<T> he_init(Shape shape, std::mt19937_64& rng, double gain = 1.0) {
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
  }

  ModelConfig config_;
  std::vector<Parameter<T>> encoder_w_, encoder_b_;
  Parameter<T> dec1_w_, dec1_b_, dec2_w_, dec2_b_, head_w_, head_b_;
};

// Inputs of one episode, already encoded up to some start layer.
template <typename T>
struct EpisodeInputs {
  std::vector<Tensor<T>> supports;  // each (C,h,w)
  Tensor<T> support_masks;          // (k,H,W) at image resolution
  Tensor<T> query;                  // (C,h,w)
};

// Full forward of one episode. Inputs are encoder activations at `start_layer`
// (0 = raw images); a PAM at start_layer is applied to them before the next
// block. The joint batch carries k supports followed by the query.
template <typename T>
Var<T> forward_episode(const ReferenceModel<T>& model, PamSet<T>* pams, const EpisodeInputs<T>& in,
                       std::size_t start_layer = 0, std::optional<std::size_t> class_id = std::nullopt,
                       const PamEventSink& sink = nullptr) {
  const std::size_t k = in.supports.size();
  if (k == 0) throw std::invalid_argument("forward_episode: need at least one support");
  if (in.support_masks.rank() != 3 || in.support_masks.dim(0) != k) {
    throw ShapeError("forward_episode: expected one mask per support");
  }
  const Shape item = in.query.shape();
  for (const auto& s : in.supports) {
    if (s.shape() != item) throw ShapeError("forward_episode: support/query resolution mismatch");
  }
  if (start_layer == 0 && (item.size() != 3 || item[1] != in.support_masks.dim(1) || item[2] != in.support_masks.dim(2))) {
    throw ShapeError("forward_episode: masks and images differ in resolution");
  }
  Shape joint{k + 1};
  joint.insert(joint.end(), item.begin(), item.end());
  Tensor<T> batch(joint);
  const std::size_t per = in.query.size();
  for (std::size_t i = 0; i < k; ++i) std::copy_n(in.supports[i].data(), per, batch.data() + i * per);
  std::copy_n(in.query.data(), per, batch.data() + k * per);

  auto apply_pam = [&](std::size_t layer, Var<T> y) -> Var<T> {
    if (!pams) return y;
    PamState<T>* state = pams->at_layer(layer);
    if (!state) return y;
    const Tensor<T> mask = downsample_mask(in.support_masks, y.dim(2), y.dim(3));
    PamOutput<T> out = pam_forward(slice_batch(y, 0, k), slice_batch(y, k, 1), mask, *state, class_id, sink);
    return concat_batch<T>({out.support, out.query});
  };

  Var<T> x = Var<T>::constant(std::move(batch));
  if (start_layer > 0) x = apply_pam(start_layer, x);
  x = model.encode(x, start_layer, model.config().layer_count(), apply_pam);
  return model.decode(slice_batch(x, k, 1), slice_batch(x, 0, k), in.support_masks);
}

}  // namespace afss
