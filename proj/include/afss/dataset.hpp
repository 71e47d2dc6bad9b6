#pragma once

// Procedural few-shot segmentation benchmark. Each class is a (shape, texture,
// colour) family; every image holds one target object of its class painted on
// top of 1-2 distractor objects of other classes over a noisy background. The
// mask marks the target object only. Images are rendered on demand from
// (dataset seed, class, index), so a manifest fully determines the dataset.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "afss/tensor.hpp"

namespace afss {

enum class ShapeFamily { disk, square, triangle, ring, cross, diamond };
enum class Texture { solid, stripes, checker, dots };

inline std::string to_string(ShapeFamily s) {
  constexpr std::array<const char*, 6> names{"disk", "square", "triangle", "ring", "cross", "diamond"};
  return names[static_cast<std::size_t>(s)];
}

inline std::string to_string(Texture t) {
  constexpr std::array<const char*, 4> names{"solid", "stripes", "checker", "dots"};
  return names[static_cast<std::size_t>(t)];
}

inline ShapeFamily parse_shape(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (to_string(static_cast<ShapeFamily>(i)) == s) return static_cast<ShapeFamily>(i);
  throw std::invalid_argument("unknown shape family '" + s + "'");
}

inline Texture parse_texture(const std::string& s) {
  for (int i = 0; i < 4; ++i)
    if (to_string(static_cast<Texture>(i)) == s) return static_cast<Texture>(i);
  throw std::invalid_argument("unknown texture '" + s + "'");
}

struct ClassSpec {
  std::size_t id = 0;  // 1-based
  ShapeFamily shape = ShapeFamily::disk;
  Texture texture = Texture::solid;
  std::array<float, 3> color{1.f, 0.f, 0.f};
  float min_size = 0.14f;  // object radius as a fraction of image size
  float max_size = 0.24f;

  friend bool operator==(const ClassSpec&, const ClassSpec&) = default;
};

enum class Split { base, novel };

struct DatasetConfig {
  std::uint64_t seed = 2024;
  std::size_t image_size = 64;
  std::size_t images_per_class = 40;
  std::size_t folds = 4;
  std::size_t min_distractors = 1;
  std::size_t max_distractors = 2;
  std::vector<ClassSpec> classes;

  // 12 classes; fold f holds classes 3f+1..3f+3 out as novel.
  static DatasetConfig standard() {
    DatasetConfig c;
    using S = ShapeFamily;
    using X = Texture;
    const std::vector<std::tuple<S, X, std::array<float, 3>>> table{
        {S::disk, X::solid, {0.90f, 0.20f, 0.20f}},     {S::square, X::stripes, {0.20f, 0.80f, 0.30f}},
        {S::triangle, X::checker, {0.25f, 0.35f, 0.90f}}, {S::ring, X::dots, {0.90f, 0.85f, 0.20f}},
        {S::cross, X::solid, {0.80f, 0.25f, 0.80f}},    {S::diamond, X::stripes, {0.20f, 0.80f, 0.85f}},
        {S::disk, X::checker, {0.95f, 0.55f, 0.15f}},   {S::square, X::dots, {0.55f, 0.30f, 0.85f}},
        {S::triangle, X::solid, {0.15f, 0.60f, 0.55f}}, {S::ring, X::stripes, {0.85f, 0.45f, 0.60f}},
        {S::cross, X::checker, {0.55f, 0.80f, 0.20f}},  {S::diamond, X::dots, {0.35f, 0.55f, 0.95f}},
    };
    for (std::size_t i = 0; i < table.size(); ++i) {
      ClassSpec s;
      s.id = i + 1;
      std::tie(s.shape, s.texture, s.color) = table[i];
      c.classes.push_back(s);
    }
    return c;
  }

  std::vector<std::size_t> novel_classes(std::size_t fold) const {
    if (fold >= folds) throw std::out_of_range("fold " + std::to_string(fold) + " outside [0, " + std::to_string(folds) + ")");
    const std::size_t per = classes.size() / folds;
    std::vector<std::size_t> out;
    for (std::size_t i = fold * per; i < (fold + 1) * per; ++i) out.push_back(classes[i].id);
    return out;
  }

  std::vector<std::size_t> base_classes(std::size_t fold) const {
    const auto novel = novel_classes(fold);
    std::vector<std::size_t> out;
    for (const auto& c : classes)
      if (std::find(novel.begin(), novel.end(), c.id) == novel.end()) out.push_back(c.id);
    return out;
  }

  std::vector<std::size_t> split_classes(Split split, std::size_t fold) const {
    return split == Split::base ? base_classes(fold) : novel_classes(fold);
  }

  void validate() const {
    if (classes.empty() || folds == 0 || classes.size() % folds != 0) {
      throw std::invalid_argument("dataset: class count must be a positive multiple of the fold count");
    }
    if (image_size < 16) throw std::invalid_argument("dataset: image_size must be >= 16");
    if (images_per_class < 2) throw std::invalid_argument("dataset: need >= 2 images per class");
    if (min_distractors > max_distractors) throw std::invalid_argument("dataset: distractor range inverted");
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i].id != i + 1) throw std::invalid_argument("dataset: class ids must be 1..n in order");
      if (!(classes[i].min_size > 0 && classes[i].min_size <= classes[i].max_size)) {
        throw std::invalid_argument("dataset: invalid size range for class " + std::to_string(classes[i].id));
      }
    }
  }

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

inline nlohmann::json to_json(const DatasetConfig& c) {
  nlohmann::json j;
  j["format"] = "afss-dataset-manifest";
  j["version"] = 1;
  j["seed"] = c.seed;
  j["image_size"] = c.image_size;
  j["images_per_class"] = c.images_per_class;
  j["distractors"] = {c.min_distractors, c.max_distractors};
  for (const auto& s : c.classes) {
    j["classes"].push_back({{"id", s.id},
                            {"shape", to_string(s.shape)},
                            {"texture", to_string(s.texture)},
                            {"color", s.color},
                            {"size_range", {s.min_size, s.max_size}}});
  }
  for (std::size_t f = 0; f < c.folds; ++f) {
    j["folds"].push_back({{"fold", f}, {"base", c.base_classes(f)}, {"novel", c.novel_classes(f)}});
  }
  return j;
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "afss-dataset-manifest") throw std::invalid_argument("not a dataset manifest");
  if (j.value("version", 0) != 1) throw std::invalid_argument("unsupported dataset manifest version");
  DatasetConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.images_per_class = j.at("images_per_class").get<std::size_t>();
  c.min_distractors = j.at("distractors").at(0).get<std::size_t>();
  c.max_distractors = j.at("distractors").at(1).get<std::size_t>();
  for (const auto& s : j.at("classes")) {
    ClassSpec cs;
    cs.id = s.at("id").get<std::size_t>();
    cs.shape = parse_shape(s.at("shape").get<std::string>());
    cs.texture = parse_texture(s.at("texture").get<std::string>());
    cs.color = s.at("color").get<std::array<float, 3>>();
    cs.min_size = s.at("size_range").at(0).get<float>();
    cs.max_size = s.at("size_range").at(1).get<float>();
    c.classes.push_back(cs);
  }
  c.folds = j.at("folds").size();
  c.validate();
  for (const auto& f : j.at("folds")) {
    const std::size_t fold = f.at("fold").get<std::size_t>();
    if (f.at("novel").get<std::vector<std::size_t>>() != c.novel_classes(fold) ||
        f.at("base").get<std::vector<std::size_t>>() != c.base_classes(fold)) {
      throw std::invalid_argument("dataset manifest fold " + std::to_string(fold) + " disagrees with the class order");
    }
  }
  return c;
}

struct Sample {
  std::size_t id = 0;        // global image id
  std::size_t class_id = 0;  // 1-based
  Tensor<float> image;       // (3, S, S) in [0, 1]
  Tensor<float> mask;        // (S, S) binary, target object only
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline bool inside_shape(ShapeFamily s, float u, float v) {
  switch (s) {
    case ShapeFamily::disk: return u * u + v * v <= 1.f;
    case ShapeFamily::square: return std::max(std::abs(u), std::abs(v)) <= 0.82f;
    case ShapeFamily::triangle: {
      // vertices (0,-1), (0.866,0.5), (-0.866,0.5)
      if (v > 0.5f) return false;
      return std::abs(u) <= (v + 1.f) * 0.57735f;
    }
    case ShapeFamily::ring: {
      const float r2 = u * u + v * v;
      return r2 <= 1.f && r2 >= 0.36f;
    }
    case ShapeFamily::cross:
      return (std::abs(u) <= 0.34f && std::abs(v) <= 1.f) || (std::abs(v) <= 0.34f && std::abs(u) <= 1.f);
    case ShapeFamily::diamond: return std::abs(u) + std::abs(v) <= 1.f;
  }
  return false;
}

// 1 for the bright phase of the pattern, 0 for the dark one; coordinates in pixels.
inline float texture_value(Texture t, float px, float py, float period) {
  switch (t) {
    case Texture::solid: return 1.f;
    case Texture::stripes: return std::sin(2.f * std::numbers::pi_v<float> * px / period) >= 0.f ? 1.f : 0.f;
    case Texture::checker: {
      const auto a = static_cast<long>(std::floor(px / (0.5f * period)));
      const auto b = static_cast<long>(std::floor(py / (0.5f * period)));
      return ((a + b) & 1) ? 0.f : 1.f;
    }
    case Texture::dots: {
      const float fx = px / period - std::round(px / period), fy = py / period - std::round(py / period);
      return fx * fx + fy * fy <= 0.08f ? 0.f : 1.f;
    }
  }
  return 1.f;
}

struct Placement {
  float cx, cy, radius, angle, period, phase;
  float brightness;
};

}  // namespace detail

class SyntheticDataset {
 public:
  explicit SyntheticDataset(DatasetConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t per = config_.images_per_class;
    samples_.reserve(config_.classes.size() * per);
    for (const auto& cls : config_.classes) {
      for (std::size_t i = 0; i < per; ++i) samples_.push_back(render(cls.id, i));
    }
  }

  const DatasetConfig& config() const { return config_; }
  std::size_t size() const { return samples_.size(); }
  const Sample& sample(std::size_t id) const { return samples_.at(id); }

  // Image ids of one class, in generation order.
  std::vector<std::size_t> class_images(std::size_t class_id) const {
    if (class_id < 1 || class_id > config_.classes.size()) throw std::out_of_range("class id out of range");
    std::vector<std::size_t> out;
    const std::size_t per = config_.images_per_class;
    for (std::size_t i = 0; i < per; ++i) out.push_back((class_id - 1) * per + i);
    return out;
  }

  void write_manifest(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write manifest " + path);
    os << to_json(config_).dump(2) << '\n';
  }

  static DatasetConfig read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read manifest " + path);
    return dataset_config_from_json(nlohmann::json::parse(is));
  }

 private:
  Sample render(std::size_t class_id, std::size_t index) const {
    const std::size_t s = config_.image_size;
    std::mt19937_64 rng(detail::splitmix64(config_.seed ^ detail::splitmix64(class_id * 1000003ULL + index)));
    std::uniform_real_distribution<float> u01(0.f, 1.f);
    Sample out;
    out.id = (class_id - 1) * config_.images_per_class + index;
    out.class_id = class_id;
    out.image = Tensor<float>({3, s, s});
    out.mask = Tensor<float>({s, s});

    // background: smooth two-colour gradient
    std::array<float, 3> c0{}, c1{};
    for (int ch = 0; ch < 3; ++ch) {
      c0[ch] = 0.25f + 0.35f * u01(rng);
      c1[ch] = 0.25f + 0.35f * u01(rng);
    }
    const float ga = 2.f * std::numbers::pi_v<float> * u01(rng);
    const float gx = std::cos(ga), gy = std::sin(ga);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const float t = 0.5f + 0.5f * ((static_cast<float>(x) / s - 0.5f) * gx + (static_cast<float>(y) / s - 0.5f) * gy);
        for (int ch = 0; ch < 3; ++ch) out.image.at(ch, y, x) = c0[ch] * (1 - t) + c1[ch] * t;
      }

    std::uniform_int_distribution<std::size_t> nd(config_.min_distractors, config_.max_distractors);
    std::uniform_int_distribution<std::size_t> other(1, config_.classes.size() - 1);
    const std::size_t distractors = nd(rng);
    for (std::size_t i = 0; i < distractors; ++i) {
      std::size_t c = other(rng);
      if (c >= class_id) ++c;
      paint(config_.classes[c - 1], place(config_.classes[c - 1], rng), out, false);
    }
    paint(config_.classes[class_id - 1], place(config_.classes[class_id - 1], rng), out, true);

    std::normal_distribution<float> noise(0.f, 0.03f);
    for (auto& v : out.image.values()) v = std::clamp(v + noise(rng), 0.f, 1.f);
    return out;
  }

  detail::Placement place(const ClassSpec& cls, std::mt19937_64& rng) const {
    std::uniform_real_distribution<float> u01(0.f, 1.f);
    const float s = static_cast<float>(config_.image_size);
    detail::Placement p{};
    p.radius = s * (cls.min_size + (cls.max_size - cls.min_size) * u01(rng));
    const float margin = 0.6f * p.radius;
    p.cx = margin + (s - 2 * margin) * u01(rng);
    p.cy = margin + (s - 2 * margin) * u01(rng);
    p.angle = 2.f * std::numbers::pi_v<float> * u01(rng);
    p.period = std::max(4.f, p.radius * (0.45f + 0.2f * u01(rng)));
    p.phase = p.period * u01(rng);
    p.brightness = 0.85f + 0.3f * u01(rng);
    return p;
  }

  void paint(const ClassSpec& cls, const detail::Placement& p, Sample& out, bool target) const {
    const std::size_t s = config_.image_size;
    const float ca = std::cos(p.angle), sa = std::sin(p.angle);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const float dx = static_cast<float>(x) + 0.5f - p.cx, dy = static_cast<float>(y) + 0.5f - p.cy;
        const float lu = ca * dx + sa * dy, lv = -sa * dx + ca * dy;
        if (!detail::inside_shape(cls.shape, lu / p.radius, lv / p.radius)) continue;
        const float t = detail::texture_value(cls.texture, lu + p.phase, lv + p.phase, p.period);
        const float shade = p.brightness * (0.3f + 0.7f * t);
        for (int ch = 0; ch < 3; ++ch) out.image.at(ch, y, x) = std::clamp(cls.color[ch] * shade, 0.f, 1.f);
        // the target is painted last, so its mask is never occluded
        if (target) out.mask[y * s + x] = 1.f;
      }
  }

  DatasetConfig config_;
  std::vector<Sample> samples_;
};

}  // namespace afss
