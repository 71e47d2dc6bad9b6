#pragma once

// Episode sampling, base training, PAM fine-tuning (standard and
// single-sample), and mIoU evaluation over the synthetic benchmark.
//
// Encoder activations below the first PAM never change once the model is
// frozen, so fine-tuning and evaluation encode each image up to that layer
// once and start every episode from the cached features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "afss/augment.hpp"
#include "afss/dataset.hpp"
#include "afss/optim.hpp"
#include "afss/pam.hpp"
#include "afss/reference_model.hpp"

namespace afss {

using Model = ReferenceModel<float>;
using Pams = PamSet<float>;

class SamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// ---------------------------------------------------------------- sampling

struct Episode {
  std::size_t class_id = 0;
  std::size_t k = 0;
  std::vector<std::size_t> support_ids;
  std::size_t query_id = 0;
};

// class id -> candidate image ids
using ClassPools = std::map<std::size_t, std::vector<std::size_t>>;

// k supports plus a distinct query, drawn without replacement from one class.
inline Episode sample_class_episode(std::size_t class_id, const std::vector<std::size_t>& pool, std::size_t k,
                                    std::mt19937_64& rng) {
  if (k == 0) throw SamplerError("episode needs k >= 1 supports");
  if (pool.size() < k + 1) {
    throw SamplerError("class " + std::to_string(class_id) + " has " + std::to_string(pool.size()) +
                       " samples; a " + std::to_string(k) + "-shot episode needs " + std::to_string(k + 1));
  }
  std::vector<std::size_t> ids = pool;
  for (std::size_t i = 0; i <= k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  Episode ep;
  ep.class_id = class_id;
  ep.k = k;
  ep.query_id = ids[0];
  ep.support_ids.assign(ids.begin() + 1, ids.begin() + 1 + static_cast<std::ptrdiff_t>(k));
  return ep;
}

inline Episode sample_episode(const ClassPools& pools, std::size_t k, std::mt19937_64& rng) {
  if (pools.empty()) throw SamplerError("episode split has no classes");
  std::uniform_int_distribution<std::size_t> pick(0, pools.size() - 1);
  auto it = std::next(pools.begin(), static_cast<std::ptrdiff_t>(pick(rng)));
  return sample_class_episode(it->first, it->second, k, rng);
}

// All images of the split's classes, minus `exclude`.
inline ClassPools split_pools(const SyntheticDataset& ds, Split split, std::size_t fold,
                              const std::set<std::size_t>& exclude = {}) {
  ClassPools pools;
  for (std::size_t c : ds.config().split_classes(split, fold)) {
    auto& v = pools[c];
    for (std::size_t id : ds.class_images(c))
      if (!exclude.count(id)) v.push_back(id);
  }
  return pools;
}

inline Episode sample_episode(const SyntheticDataset& ds, Split split, std::size_t fold, std::size_t k,
                              std::mt19937_64& rng) {
  return sample_episode(split_pools(ds, split, fold), k, rng);
}

// Base-class images are split per class: the last `holdout` ids are reserved
// for base-class evaluation and never trained on.
inline ClassPools base_pools(const SyntheticDataset& ds, std::size_t fold, std::size_t holdout, bool held_out) {
  ClassPools pools;
  for (std::size_t c : ds.config().base_classes(fold)) {
    const auto ids = ds.class_images(c);
    if (holdout >= ids.size()) throw SamplerError("holdout leaves no base training images");
    const auto cut = ids.begin() + static_cast<std::ptrdiff_t>(ids.size() - holdout);
    pools[c] = held_out ? std::vector<std::size_t>(cut, ids.end()) : std::vector<std::size_t>(ids.begin(), cut);
  }
  return pools;
}

// ------------------------------------------------------------ feature cache

// Encoder output after block `layer` for one image (C,H,W); layer 0 is the image.
inline Tensor<float> encode_image(const Model& model, const Tensor<float>& image, std::size_t layer) {
  if (layer == 0) return image;
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  Tensor<float> out = model.encode(Var<float>::constant(image.reshaped(s)), 0, layer).value();
  Shape drop(out.shape().begin() + 1, out.shape().end());
  return out.reshaped(drop);
}

class FeatureCache {
 public:
  FeatureCache(const Model& model, const SyntheticDataset& ds, std::size_t layer)
      : model_(&model), ds_(&ds), layer_(layer) {}

  std::size_t layer() const { return layer_; }

  const Tensor<float>& features(std::size_t id) {
    auto it = cache_.find(id);
    if (it == cache_.end()) it = cache_.emplace(id, encode_image(*model_, ds_->sample(id).image, layer_)).first;
    return it->second;
  }

  EpisodeInputs<float> inputs(const Episode& ep) {
    EpisodeInputs<float> in;
    const std::size_t s = ds_->config().image_size;
    in.support_masks = Tensor<float>({ep.support_ids.size(), s, s});
    for (std::size_t i = 0; i < ep.support_ids.size(); ++i) {
      in.supports.push_back(features(ep.support_ids[i]));
      const auto& m = ds_->sample(ep.support_ids[i]).mask;
      std::copy(m.values().begin(), m.values().end(), in.support_masks.data() + i * s * s);
    }
    in.query = features(ep.query_id);
    return in;
  }

 private:
  const Model* model_;
  const SyntheticDataset* ds_;
  std::size_t layer_;
  std::unordered_map<std::size_t, Tensor<float>> cache_;
};

// Layer from which episodes can start: the first PAM, or the encoder output
// when there is none.
inline std::size_t cache_layer(const Model& model, const Pams* pams) {
  if (pams && !pams->empty()) return pams->first_layer();
  return model.config().layer_count();
}

// ------------------------------------------------------------------ logging

struct TrainLogEntry {
  std::size_t iteration = 0;  // 1-based
  double loss = 0.0;          // mean over the episodes of the batch
  double lr = 0.0;
  std::size_t episodes = 0;   // episodes that contributed (skips excluded)
};

using TrainLogSink = std::function<void(const TrainLogEntry&)>;
using WarningSink = std::function<void(const std::string&)>;

// ------------------------------------------------------------ base training

struct BaseTrainOptions {
  std::size_t steps = 3000;
  std::size_t shots = 1;
  std::size_t batch_size = 1;
  std::size_t holdout_per_class = 8;
  AdamOptions adam{};
  bool cosine_decay = true;  // lr follows a half cosine from adam.lr to 0
  // Overrides the fold's base split; must stay disjoint from its novel classes.
  std::optional<std::vector<std::size_t>> classes;
};

// Episodic training of every model parameter on base classes. The model is
// frozen on return. Deterministic in (model init, dataset, options, seed).
inline std::vector<TrainLogEntry> base_train(Model& model, const SyntheticDataset& ds, std::size_t fold,
                                             const BaseTrainOptions& opt, std::uint64_t seed,
                                             const TrainLogSink& sink = nullptr) {
  ClassPools pools = base_pools(ds, fold, opt.holdout_per_class, false);
  if (opt.classes) {
    const auto novel = ds.config().novel_classes(fold);
    ClassPools chosen;
    for (std::size_t c : *opt.classes) {
      if (std::find(novel.begin(), novel.end(), c) != novel.end()) {
        throw ContractError("base class " + std::to_string(c) + " is a novel class of fold " + std::to_string(fold));
      }
      if (!pools.count(c)) throw ContractError("class " + std::to_string(c) + " is not in the dataset");
      chosen[c] = pools[c];
    }
    pools = std::move(chosen);
  }
  if (opt.batch_size == 0) throw std::invalid_argument("base_train: batch_size must be >= 1");
  for (auto* p : model.parameters()) p->freeze(false);
  Adam<float> adam(model.parameters(), opt.adam);
  std::mt19937_64 rng(seed);
  std::vector<TrainLogEntry> log;
  const std::size_t s = ds.config().image_size;
  for (std::size_t step = 1; step <= opt.steps; ++step) {
    const double lr = opt.cosine_decay ? 0.5 * opt.adam.lr *
                                             (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - 1) /
                                                             static_cast<double>(opt.steps)))
                                       : opt.adam.lr;
    adam.set_lr(lr);
    adam.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      const Episode ep = sample_episode(pools, opt.shots, rng);
      EpisodeInputs<float> in;
      in.support_masks = Tensor<float>({ep.k, s, s});
      for (std::size_t i = 0; i < ep.k; ++i) {
        in.supports.push_back(ds.sample(ep.support_ids[i]).image);
        const auto& m = ds.sample(ep.support_ids[i]).mask;
        std::copy(m.values().begin(), m.values().end(), in.support_masks.data() + i * s * s);
      }
      in.query = ds.sample(ep.query_id).image;
      const Var<float> logits = forward_episode<float>(model, nullptr, in);
      const Var<float> loss = binary_cross_entropy_2way(logits, ds.sample(ep.query_id).mask);
      total += loss.value()[0];
      scale(loss, 1.0f / static_cast<float>(opt.batch_size)).backward();
    }
    adam.step();
    TrainLogEntry e{step, total / static_cast<double>(opt.batch_size), lr, opt.batch_size};
    log.push_back(e);
    if (sink) sink(e);
  }
  model.freeze(true);
  return log;
}

// -------------------------------------------------------------- fine-tuning

struct FinetuneBudget {
  std::size_t shots = 1;
  std::size_t samples_per_class = 2;
  std::size_t iterations = 1000;
  std::size_t batch_size = 4;
  SgdOptions sgd{};

  // 1-shot: 2 images per class, 5-shot: 6.
  static FinetuneBudget for_shots(std::size_t k) {
    FinetuneBudget b;
    b.shots = k;
    b.samples_per_class = k + 1;
    return b;
  }

  void validate() const {
    if (shots == 0) throw ConfigError("finetune: shots must be >= 1");
    if (samples_per_class < shots + 1) {
      throw ConfigError("finetune: samples_per_class=" + std::to_string(samples_per_class) + " cannot form a " +
                        std::to_string(shots) + "-shot episode");
    }
    if (batch_size == 0) throw ConfigError("finetune: batch_size must be >= 1");
    if (!(sgd.lr >= 0) || !(sgd.momentum >= 0) || !(sgd.weight_decay >= 0)) {
      throw ConfigError("finetune: optimizer hyperparameters must be non-negative");
    }
  }
};

// The labelled novel-class images fine-tuning may touch.
struct FinetuneSet {
  std::size_t fold = 0;
  ClassPools by_class;

  std::set<std::size_t> ids() const {
    std::set<std::size_t> out;
    for (const auto& [c, v] : by_class) out.insert(v.begin(), v.end());
    return out;
  }
  std::size_t size() const { return ids().size(); }
};

// `samples_per_class` distinct images per novel class; at least one image of
// every class is left over for evaluation queries.
inline FinetuneSet select_finetune_set(const SyntheticDataset& ds, std::size_t fold, std::size_t samples_per_class,
                                       std::uint64_t seed) {
  if (samples_per_class == 0) throw ContractError("fine-tuning set is empty (samples_per_class = 0)");
  FinetuneSet set;
  set.fold = fold;
  std::mt19937_64 rng(seed ^ 0x5eedf17e5e7ULL);
  for (std::size_t c : ds.config().novel_classes(fold)) {
    auto ids = ds.class_images(c);
    if (samples_per_class >= ids.size()) {
      throw ContractError("class " + std::to_string(c) + " has " + std::to_string(ids.size()) +
                          " images; cannot reserve " + std::to_string(samples_per_class) + " for fine-tuning");
    }
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(samples_per_class);
    std::sort(ids.begin(), ids.end());
    set.by_class[c] = ids;
  }
  if (set.by_class.empty()) throw ContractError("fine-tuning set is empty (fold has no novel classes)");
  return set;
}

struct FinetuneResult {
  FinetuneSet set;
  std::vector<TrainLogEntry> log;
  std::size_t skipped_episodes = 0;
};

namespace detail {

inline void require_finetune_ready(const Model& model, Pams& pams) {
  if (!model.frozen()) throw ContractError("fine-tuning requires a frozen base model");
  if (pams.empty()) throw ContractError("fine-tuning requires at least one PAM");
}

// One optimizer step over `batch` episodes produced by `make`. `make` returns
// false to skip an episode.
template <typename Make>
TrainLogEntry finetune_step(const Model& model, Pams& pams, Sgd<float>& sgd, std::size_t iteration,
                            std::size_t batch, std::size_t start_layer, Make&& make) {
  sgd.zero_grad();
  double total = 0.0;
  std::size_t used = 0;
  std::vector<std::pair<EpisodeInputs<float>, std::pair<std::size_t, const Tensor<float>*>>> items;
  for (std::size_t b = 0; b < batch; ++b) {
    EpisodeInputs<float> in;
    std::size_t class_id = 0;
    const Tensor<float>* target = nullptr;
    if (!make(in, class_id, target)) continue;
    items.push_back({std::move(in), {class_id, target}});
  }
  for (const auto& [in, meta] : items) {
    const Var<float> logits = forward_episode<float>(model, &pams, in, start_layer, meta.first);
    const Var<float> loss = binary_cross_entropy_2way(logits, *meta.second);
    total += loss.value()[0];
    scale(loss, 1.0f / static_cast<float>(items.size())).backward();
    ++used;
  }
  if (used > 0) sgd.step();
  return TrainLogEntry{iteration, used ? total / static_cast<double>(used) : 0.0, sgd.lr(), used};
}

}  // namespace detail

// Episodic PAM fine-tuning on the budgeted novel-class images. Support/query
// roles are redrawn every episode. Only PAM weights receive SGD steps; banks
// follow their momentum rule during every training forward. PAMs are left in
// test mode.
inline FinetuneResult finetune(const Model& model, Pams& pams, const SyntheticDataset& ds, std::size_t fold,
                               const FinetuneBudget& budget, std::uint64_t seed, const TrainLogSink& sink = nullptr) {
  budget.validate();
  detail::require_finetune_ready(model, pams);
  FinetuneResult result;
  result.set = select_finetune_set(ds, fold, budget.samples_per_class, seed);
  FeatureCache cache(model, ds, cache_layer(model, &pams));
  Sgd<float> sgd(pams.parameters(), budget.sgd);
  pams.set_mode(PamMode::train);
  std::mt19937_64 rng(seed);
  for (std::size_t it = 1; it <= budget.iterations; ++it) {
    auto make = [&](EpisodeInputs<float>& in, std::size_t& class_id, const Tensor<float>*& target) {
      const Episode ep = sample_episode(result.set.by_class, budget.shots, rng);
      in = cache.inputs(ep);
      class_id = ep.class_id;
      target = &ds.sample(ep.query_id).mask;
      return true;
    };
    const TrainLogEntry e = detail::finetune_step(model, pams, sgd, it, budget.batch_size, cache.layer(), make);
    result.log.push_back(e);
    if (sink) sink(e);
  }
  pams.set_mode(PamMode::test);
  return result;
}

// Fine-tuning from one labelled image per novel class: the original acts as
// query and an augmented copy as the single support. Augmentations that lose
// the whole mask are redrawn; after the retry budget the episode is skipped
// and reported through `warn`.
inline FinetuneResult finetune_single_sample(const Model& model, Pams& pams, const SyntheticDataset& ds,
                                             std::size_t fold, FinetuneBudget budget, std::uint64_t seed,
                                             const AugmentRanges& ranges = {}, const TrainLogSink& sink = nullptr,
                                             const WarningSink& warn = nullptr) {
  budget.shots = 1;
  budget.samples_per_class = 1;
  if (budget.batch_size == 0) throw ConfigError("finetune: batch_size must be >= 1");
  ranges.validate();
  detail::require_finetune_ready(model, pams);
  FinetuneResult result;
  result.set = select_finetune_set(ds, fold, 1, seed);
  const std::size_t layer = cache_layer(model, &pams);
  FeatureCache cache(model, ds, layer);
  Sgd<float> sgd(pams.parameters(), budget.sgd);
  pams.set_mode(PamMode::train);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> classes;
  for (const auto& [c, v] : result.set.by_class) classes.push_back(c);
  std::uniform_int_distribution<std::size_t> pick(0, classes.size() - 1);
  const std::size_t s = ds.config().image_size;
  for (std::size_t it = 1; it <= budget.iterations; ++it) {
    auto make = [&](EpisodeInputs<float>& in, std::size_t& class_id, const Tensor<float>*& target) {
      class_id = classes[pick(rng)];
      const Sample& sample = ds.sample(result.set.by_class.at(class_id).front());
      auto aug = augment_nonempty(sample.image, sample.mask, ranges, rng);
      if (!aug) {
        ++result.skipped_episodes;
        if (warn) warn("iteration " + std::to_string(it) + ": augmentation kept no foreground for image " +
                       std::to_string(sample.id) + "; episode skipped");
        return false;
      }
      in.supports = {encode_image(model, aug->image, layer)};
      in.support_masks = aug->mask.reshaped({1, s, s});
      in.query = cache.features(sample.id);
      target = &sample.mask;
      return true;
    };
    const TrainLogEntry e = detail::finetune_step(model, pams, sgd, it, budget.batch_size, layer, make);
    result.log.push_back(e);
    if (sink) sink(e);
  }
  pams.set_mode(PamMode::test);
  return result;
}

// --------------------------------------------------------------- evaluation

// Binary masks in [0,1]; values >= 0.5 count as foreground.
struct IouCounts {
  double intersection = 0.0;
  double union_ = 0.0;
};

inline IouCounts iou_counts(const Tensor<float>& pred, const Tensor<float>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("iou: prediction and ground truth differ in size");
  IouCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= 0.5f, t = truth[i] >= 0.5f;
    c.intersection += (p && t) ? 1.0 : 0.0;
    c.union_ += (p || t) ? 1.0 : 0.0;
  }
  return c;
}

struct ClassIou {
  std::size_t class_id = 0;
  double intersection = 0.0;
  double union_ = 0.0;
  std::size_t episodes = 0;

  // Two empty masks agree perfectly.
  double iou() const { return union_ > 0 ? intersection / union_ : 1.0; }
};

// Accumulates intersections and unions per class over all of its episodes.
class IouAccumulator {
 public:
  void add(std::size_t class_id, const Tensor<float>& pred, const Tensor<float>& truth) {
    const IouCounts c = iou_counts(pred, truth);
    auto& e = classes_[class_id];
    e.class_id = class_id;
    e.intersection += c.intersection;
    e.union_ += c.union_;
    ++e.episodes;
  }

  std::vector<ClassIou> classes() const {
    std::vector<ClassIou> out;
    for (const auto& [c, e] : classes_) out.push_back(e);
    return out;
  }

  // Unweighted mean of per-class IoU.
  double miou() const {
    if (classes_.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [c, e] : classes_) s += e.iou();
    return s / static_cast<double>(classes_.size());
  }

 private:
  std::map<std::size_t, ClassIou> classes_;
};

struct EvalOptions {
  std::size_t shots = 1;
  std::size_t episodes = 300;
  std::uint64_t seed = 0;
  bool reuse_finetune_set_as_support = false;
  float threshold = 0.5f;
};

// Which image ids played which role during an evaluation.
struct EvalAudit {
  std::set<std::size_t> finetune_ids;
  std::set<std::size_t> query_ids;
  std::set<std::size_t> support_ids;

  // Fine-tuning images never serve as queries; outside reuse mode they do not
  // appear at all.
  bool leakage_free(bool reuse) const {
    for (std::size_t id : finetune_ids) {
      if (query_ids.count(id)) return false;
      if (!reuse && support_ids.count(id)) return false;
    }
    return true;
  }
  // In reuse mode every support comes from the fine-tuning set.
  bool supports_within_finetune_set() const {
    return std::all_of(support_ids.begin(), support_ids.end(), [this](std::size_t id) { return finetune_ids.count(id) > 0; });
  }
};

struct EvalReport {
  std::size_t fold = 0;
  std::size_t shots = 0;
  bool reuse = false;
  std::vector<ClassIou> classes;
  double miou = 0.0;
  std::vector<Episode> episodes;
  EvalAudit audit;
};

// Novel-split evaluation episodes. Classes are visited round-robin. Queries
// never come from the fine-tuning set; supports are drawn from the remaining
// images, or are exactly the class's fine-tuning images in reuse mode.
inline std::vector<Episode> plan_eval_episodes(const SyntheticDataset& ds, std::size_t fold, const EvalOptions& opt,
                                               const FinetuneSet* finetune_set) {
  if (opt.reuse_finetune_set_as_support && !finetune_set) {
    throw ContractError("evaluate: reuse mode needs the fine-tuning set");
  }
  const std::set<std::size_t> excluded = finetune_set ? finetune_set->ids() : std::set<std::size_t>{};
  const ClassPools pools = split_pools(ds, Split::novel, fold, excluded);
  std::vector<std::size_t> classes;
  for (const auto& [c, v] : pools) classes.push_back(c);
  if (classes.empty()) throw SamplerError("novel split of fold " + std::to_string(fold) + " is empty");
  std::mt19937_64 rng(opt.seed ^ 0xe7a1ULL);
  std::vector<Episode> out;
  for (std::size_t e = 0; e < opt.episodes; ++e) {
    const std::size_t c = classes[e % classes.size()];
    const auto& pool = pools.at(c);
    if (opt.reuse_finetune_set_as_support) {
      if (pool.empty()) throw SamplerError("class " + std::to_string(c) + " has no evaluation queries");
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      Episode ep;
      ep.class_id = c;
      ep.support_ids = finetune_set->by_class.at(c);
      ep.k = ep.support_ids.size();
      ep.query_id = pool[pick(rng)];
      out.push_back(std::move(ep));
    } else {
      out.push_back(sample_class_episode(c, pool, opt.shots, rng));
    }
  }
  return out;
}

// Runs the given episodes. `pams` may be null (frozen baseline); otherwise it
// must be in test mode.
inline EvalReport evaluate_episodes(const Model& model, Pams* pams, const SyntheticDataset& ds,
                                    const std::vector<Episode>& episodes, float threshold = 0.5f) {
  if (pams && !pams->in_mode(PamMode::test)) throw ContractError("evaluate: PAMs must be in test mode");
  FeatureCache cache(model, ds, cache_layer(model, pams));
  IouAccumulator acc;
  EvalReport report;
  for (const auto& ep : episodes) {
    const Var<float> logits = forward_episode<float>(model, pams && !pams->empty() ? pams : nullptr,
                                                     cache.inputs(ep), cache.layer());
    Tensor<float> prob = foreground_probability(logits.value());
    for (auto& v : prob.values()) v = v >= threshold ? 1.f : 0.f;
    acc.add(ep.class_id, prob, ds.sample(ep.query_id).mask);
    report.audit.query_ids.insert(ep.query_id);
    report.audit.support_ids.insert(ep.support_ids.begin(), ep.support_ids.end());
  }
  report.classes = acc.classes();
  report.miou = acc.miou();
  report.episodes = episodes;
  return report;
}

inline EvalReport evaluate(const Model& model, Pams* pams, const SyntheticDataset& ds, std::size_t fold,
                           const EvalOptions& opt, const FinetuneSet* finetune_set = nullptr) {
  EvalReport r = evaluate_episodes(model, pams, ds, plan_eval_episodes(ds, fold, opt, finetune_set), opt.threshold);
  r.fold = fold;
  r.shots = opt.reuse_finetune_set_as_support ? r.episodes.front().k : opt.shots;
  r.reuse = opt.reuse_finetune_set_as_support;
  if (finetune_set) r.audit.finetune_ids = finetune_set->ids();
  return r;
}

// Held-out base-class episodes, for judging the base model itself.
inline std::vector<Episode> plan_base_holdout_episodes(const SyntheticDataset& ds, std::size_t fold,
                                                       std::size_t holdout, std::size_t shots, std::size_t n,
                                                       std::uint64_t seed) {
  const ClassPools pools = base_pools(ds, fold, holdout, true);
  std::mt19937_64 rng(seed);
  std::vector<Episode> out;
  std::vector<std::size_t> classes;
  for (const auto& [c, v] : pools) classes.push_back(c);
  for (std::size_t e = 0; e < n; ++e) out.push_back(sample_class_episode(classes[e % classes.size()],
                                                                         pools.at(classes[e % classes.size()]), shots, rng));
  return out;
}

}  // namespace afss
