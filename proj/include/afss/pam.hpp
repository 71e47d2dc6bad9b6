#pragma once

// Prototype Adaptive Module: prototype bank + enhancement + adapter, the
// per-layer insertion bookkeeping, and PAM checkpoints.
//
// PAM checkpoint layout (little-endian):
//   char[8] magic "AFSSPAMS"
//   u32     format version (1)
//   f64     alpha, f64 beta, u32 gamma, u32 components, u32 n_classes
//   u32     count
//   count x { u32 stage, u32 layer, u32 d }          config echo
//   count x { f32[d*h] W_down, f32[h*d] W_up, bank }  h = d / gamma, bank in AFSSBANK format

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "afss/binary_io.hpp"
#include "afss/lam.hpp"
#include "afss/pem.hpp"
#include "afss/prototype_bank.hpp"

namespace afss {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class PamMode { train, test };

// Which parts of the module are active.
enum class PamComponents : std::uint32_t {
  lam_only = 0,     // adapter on raw features
  pem_no_bank = 1,  // enhancement with the episode's own P_t, no memory
  full = 2,         // enhancement with the class prototype bank
};

inline std::string to_string(PamComponents c) {
  switch (c) {
    case PamComponents::lam_only: return "lam_only";
    case PamComponents::pem_no_bank: return "pem_no_bank";
    case PamComponents::full: return "full";
  }
  return "unknown";
}

inline PamComponents parse_components(const std::string& s) {
  if (s == "lam_only" || s == "lam") return PamComponents::lam_only;
  if (s == "pem_no_bank" || s == "lam+pem") return PamComponents::pem_no_bank;
  if (s == "full" || s == "lam+pem+bank") return PamComponents::full;
  throw ConfigError("unknown PAM components '" + s + "' (expected lam_only, pem_no_bank or full)");
}

// 1-based (stage, layer-within-stage) slot.
struct InsertPosition {
  std::size_t stage = 1;
  std::size_t layer = 1;
  friend auto operator<=>(const InsertPosition&, const InsertPosition&) = default;
};

// Stage/layer structure and per-layer output channels of a layered encoder.
struct EncoderLayout {
  std::vector<std::size_t> layers_per_stage;
  std::vector<std::size_t> channels;  // one per flat layer

  std::size_t layer_count() const { return channels.size(); }

  std::size_t flat_index(const InsertPosition& p) const {
    if (p.stage < 1 || p.stage > layers_per_stage.size() || p.layer < 1 || p.layer > layers_per_stage[p.stage - 1]) {
      throw ConfigError("insert position (stage " + std::to_string(p.stage) + ", layer " + std::to_string(p.layer) +
                        ") outside the encoder layout");
    }
    std::size_t flat = 0;
    for (std::size_t s = 0; s + 1 < p.stage; ++s) flat += layers_per_stage[s];
    return flat + p.layer;
  }

  InsertPosition position(std::size_t flat) const {
    if (flat < 1 || flat > layer_count()) {
      throw ConfigError("layer " + std::to_string(flat) + " outside [1, " + std::to_string(layer_count()) + "]");
    }
    std::size_t s = 0;
    while (flat > layers_per_stage[s]) flat -= layers_per_stage[s++];
    return {s + 1, flat};
  }

  // "7-12", "1,4,9" or "" over flat layer numbers.
  std::vector<InsertPosition> parse_scheme(const std::string& scheme) const {
    std::vector<InsertPosition> out;
    std::stringstream ss(scheme);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      const auto dash = tok.find('-');
      try {
        if (dash == std::string::npos) {
          out.push_back(position(std::stoul(tok)));
        } else {
          const std::size_t a = std::stoul(tok.substr(0, dash)), b = std::stoul(tok.substr(dash + 1));
          if (a > b) throw ConfigError("descending layer range '" + tok + "'");
          for (std::size_t i = a; i <= b; ++i) out.push_back(position(i));
        }
      } catch (const std::logic_error& e) {
        if (dynamic_cast<const ConfigError*>(&e)) throw;
        throw ConfigError("cannot parse insert scheme token '" + tok + "'");
      }
    }
    return out;
  }
};

inline std::string format_scheme(const EncoderLayout& layout, const std::vector<InsertPosition>& positions) {
  std::vector<std::size_t> flat;
  for (const auto& p : positions) flat.push_back(layout.flat_index(p));
  std::sort(flat.begin(), flat.end());
  std::string out;
  for (std::size_t i = 0; i < flat.size();) {
    std::size_t j = i;
    while (j + 1 < flat.size() && flat[j + 1] == flat[j] + 1) ++j;
    if (!out.empty()) out += ',';
    out += std::to_string(flat[i]);
    if (j > i) out += "-" + std::to_string(flat[j]);
    i = j + 1;
  }
  return out;
}

struct PamConfig {
  double alpha = 0.99;
  double beta = 0.1;
  std::size_t gamma = 16;
  std::vector<InsertPosition> insert_positions;
  std::size_t n_classes = 1;
  std::vector<std::size_t> channels;  // per slot d; filled from the encoder by insert_pams
  PamComponents components = PamComponents::full;

  void validate() const {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
    if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be > 0");
    if (gamma == 0) throw ConfigError("gamma must be >= 1");
    if (n_classes == 0) throw ConfigError("n_classes must be >= 1");
    std::set<InsertPosition> seen(insert_positions.begin(), insert_positions.end());
    if (seen.size() != insert_positions.size()) throw ConfigError("insert positions must be unique");
    if (!channels.empty()) {
      if (channels.size() != insert_positions.size()) throw ConfigError("one channel count per insert position");
      for (std::size_t d : channels) {
        if (d % gamma != 0) {
          throw ConfigError("channel count " + std::to_string(d) + " not divisible by gamma " + std::to_string(gamma));
        }
      }
    }
  }

  // Exact trainable parameter count: sum of 2 d^2 / gamma.
  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    for (std::size_t d : channels) n += 2 * d * d / gamma;
    return n;
  }
};

// Structured event raised by PAM forwards (e.g. the empty-mask fallback).
struct PamEvent {
  std::string kind;
  std::size_t layer = 0;
  std::string detail;
};
using PamEventSink = std::function<void(const PamEvent&)>;

template <typename T>
struct PamState {
  InsertPosition position;
  std::size_t flat_layer = 0;
  PrototypeBank<T> bank;
  AdapterWeights<T> weights;
  PamMode mode = PamMode::train;
  T alpha = T(0.99);
  PamComponents components = PamComponents::full;
};

template <typename T>
struct PamOutput {
  Var<T> support;
  Var<T> query;
  bool enhanced = false;
  std::optional<std::size_t> selected_class;
};

// Nearest-neighbour downsampling of (k,H,W) masks: out[i] = in[floor(i * H / h)].
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, std::size_t h, std::size_t w) {
  require_rank(mask, 3, "downsample_mask");
  const std::size_t k = mask.dim(0), sh = mask.dim(1), sw = mask.dim(2);
  if (h == 0 || w == 0 || h > sh || w > sw) throw ShapeError("downsample_mask: target larger than source");
  Tensor<T> out({k, h, w});
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sy = y * sh / h, sx = x * sw / w;
        out.at(b, y, x) = mask.at(b, sy, sx) > T(0.5) ? T(1) : T(0);
      }
  return out;
}

// One PAM applied to a (support, query) feature pair. M_s is at feature resolution.
// Train mode refreshes the bank slot for class_id before enhancing with it.
template <typename T>
PamOutput<T> pam_forward(const Var<T>& support, const Var<T>& query, const Tensor<T>& support_mask,
                         PamState<T>& state, std::optional<std::size_t> class_id,
                         const PamEventSink& sink = nullptr) {
  if (state.mode == PamMode::train && !class_id) throw std::invalid_argument("pam_forward: train mode needs a class id");
  if (state.mode == PamMode::test && class_id) throw std::invalid_argument("pam_forward: test mode takes no class id");

  PamOutput<T> out;
  Var<T> es = support, eq = query;
  if (state.components != PamComponents::lam_only) {
    std::optional<TempPrototype<T>> temp;
    try {
      temp = masked_mean_prototype(support.value(), support_mask);
    } catch (const EmptyMaskError&) {
      if (sink) sink({"empty_mask_fallback", state.flat_layer, "support mask vanished at feature resolution"});
    }
    if (temp) {
      Tensor<T> proto;
      if (state.components == PamComponents::pem_no_bank) {
        proto = temp->vector;
      } else if (state.mode == PamMode::train) {
        temp->source_class = class_id;
        proto = state.bank.update(*class_id, *temp, state.alpha);
      } else {
        auto [id, row] = state.bank.select(*temp);
        out.selected_class = id;
        proto = std::move(row);
      }
      T sq = 0;
      for (T v : proto.values()) sq += v * v;
      if (sq > T(0)) {
        std::tie(es, eq) = enhance_pair(support, query, Var<T>::constant(std::move(proto)));
        out.enhanced = true;
      } else if (sink) {
        sink({"zero_prototype_fallback", state.flat_layer, "temporary prototype is the zero vector"});
      }
    }
  }
  out.support = inject(support, adapt(es, state.weights), state.weights.beta);
  out.query = inject(query, adapt(eq, state.weights), state.weights.beta);
  return out;
}

// The PAMs attached to one encoder, keyed by flat layer.
template <typename T>
class PamSet {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  PamSet() = default;

  PamSet(const PamConfig& config, const EncoderLayout& layout, std::uint64_t seed) : config_(config), layout_(layout) {
    config_.channels.clear();
    for (const auto& p : config_.insert_positions) config_.channels.push_back(layout.channels[layout.flat_index(p) - 1]);
    config_.validate();
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < config_.insert_positions.size(); ++i) {
      PamState<T> s;
      s.position = config_.insert_positions[i];
      s.flat_layer = layout.flat_index(s.position);
      const std::size_t d = config_.channels[i];
      s.bank = PrototypeBank<T>(config_.n_classes, d);
      s.weights = AdapterWeights<T>(d, config_.gamma, static_cast<T>(config_.beta), rng,
                                    "pam.layer" + std::to_string(s.flat_layer));
      s.alpha = static_cast<T>(config_.alpha);
      s.components = config_.components;
      states_.push_back(std::move(s));
    }
    std::sort(states_.begin(), states_.end(),
              [](const PamState<T>& a, const PamState<T>& b) { return a.flat_layer < b.flat_layer; });
  }

  const PamConfig& config() const { return config_; }
  const EncoderLayout& layout() const { return layout_; }
  std::vector<PamState<T>>& states() { return states_; }
  const std::vector<PamState<T>>& states() const { return states_; }
  bool empty() const { return states_.empty(); }

  PamState<T>* at_layer(std::size_t flat) {
    for (auto& s : states_)
      if (s.flat_layer == flat) return &s;
    return nullptr;
  }

  std::size_t first_layer() const { return states_.empty() ? 0 : states_.front().flat_layer; }

  void set_mode(PamMode m) {
    for (auto& s : states_) s.mode = m;
  }

  bool in_mode(PamMode m) const {
    return std::all_of(states_.begin(), states_.end(), [m](const PamState<T>& s) { return s.mode == m; });
  }

  ParameterRefs<T> parameters() {
    ParameterRefs<T> out;
    for (auto& s : states_) {
      out.push_back(&s.weights.down);
      out.push_back(&s.weights.up);
    }
    return out;
  }

  // Parameter-tree walk; must agree with PamConfig::trainable_parameter_count.
  std::size_t trainable_parameter_count() {
    return count_parameters(parameters(), true);
  }

  std::uint64_t weight_hash() {
    Fnv1a h;
    for (auto* p : parameters()) h.update(p->value().data(), p->value().size() * sizeof(T));
    return h.value();
  }

  void write(std::ostream& os) const {
    io::write_magic(os, kMagic);
    io::write_pod<std::uint32_t>(os, kFormatVersion);
    io::write_pod<double>(os, config_.alpha);
    io::write_pod<double>(os, config_.beta);
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(config_.gamma));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(config_.components));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(config_.n_classes));
    io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(states_.size()));
    for (const auto& s : states_) {
      io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.position.stage));
      io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.position.layer));
      io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.weights.d()));
    }
    for (const auto& s : states_) {
      io::write_f32_array(os, s.weights.down.value().data(), s.weights.down.numel());
      io::write_f32_array(os, s.weights.up.value().data(), s.weights.up.numel());
      s.bank.write(os);
    }
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path + " for writing");
    write(os);
  }

  // Restores states saved under `config`; any disagreement with the echo is an error.
  static PamSet read(std::istream& is, const PamConfig& config, const EncoderLayout& layout,
                     PamMode mode = PamMode::test) {
    io::expect_magic(is, kMagic, "PAM checkpoint");
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kFormatVersion) throw CheckpointError("PAM checkpoint version " + std::to_string(version) + " unsupported");
    const double alpha = io::read_pod<double>(is);
    const double beta = io::read_pod<double>(is);
    const auto gamma = io::read_pod<std::uint32_t>(is);
    const auto components = io::read_pod<std::uint32_t>(is);
    const auto n = io::read_pod<std::uint32_t>(is);
    const auto count = io::read_pod<std::uint32_t>(is);

    PamSet set(config, layout, 0);
    auto mismatch = [](const std::string& what) { throw ConfigError("PAM checkpoint does not match config: " + what); };
    if (alpha != config.alpha) mismatch("alpha");
    if (beta != config.beta) mismatch("beta");
    if (gamma != config.gamma) mismatch("gamma");
    if (components != static_cast<std::uint32_t>(config.components)) mismatch("components");
    if (n != config.n_classes) mismatch("n_classes");
    if (count != set.states_.size()) mismatch("number of insert positions");
    for (auto& s : set.states_) {
      const std::size_t stage = io::read_pod<std::uint32_t>(is);
      const std::size_t layer = io::read_pod<std::uint32_t>(is);
      const InsertPosition p{stage, layer};
      const auto d = io::read_pod<std::uint32_t>(is);
      if (p != s.position) mismatch("insert positions");
      if (d != s.weights.d()) mismatch("channel count at layer " + std::to_string(s.flat_layer));
    }
    for (auto& s : set.states_) {
      io::read_f32_array(is, s.weights.down.mutable_value().data(), s.weights.down.numel());
      io::read_f32_array(is, s.weights.up.mutable_value().data(), s.weights.up.numel());
      s.bank = PrototypeBank<T>::read(is, config.n_classes, s.weights.d());
      s.mode = mode;
    }
    return set;
  }

  static PamSet load(const std::string& path, const PamConfig& config, const EncoderLayout& layout,
                     PamMode mode = PamMode::test) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path);
    return read(is, config, layout, mode);
  }

 private:
  static constexpr io::Magic kMagic{'A', 'F', 'S', 'S', 'P', 'A', 'M', 'S'};

  PamConfig config_;
  EncoderLayout layout_;
  std::vector<PamState<T>> states_;
};

// Attaches fresh PAMs at config.insert_positions and freezes every encoder
// parameter. Model needs layout() and parameters().
template <typename T, typename Model>
PamSet<T> insert_pams(Model& model, const PamConfig& config, std::uint64_t seed) {
  const EncoderLayout layout = model.layout();
  for (const auto& p : config.insert_positions) layout.flat_index(p);  // range check
  PamSet<T> set(config, layout, seed);
  for (auto* p : model.parameters()) p->freeze(true);
  return set;
}

}  // namespace afss
