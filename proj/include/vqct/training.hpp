#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "vqct/codebook.hpp"
#include "vqct/graph.hpp"
#include "vqct/model.hpp"
#include "vqct/pipeline.hpp"
#include "vqct/volume.hpp"

namespace vqct {

// splitmix64 finalizer; derives independent sub-seeds from one run seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  // p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
            const std::vector<std::string>& names = {}) {
    if (params.size() != grads.size()) throw ShapeError("AdamW: parameter and gradient counts differ");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    if (m_.size() != params.size()) throw ShapeError("AdamW: parameter set changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      require_same_shape(*params[i], *grads[i], "AdamW");
      require_same_shape(*params[i], m_[i], "AdamW moments");
      if (!grads[i]->all_finite())
        throw TrainingError("non-finite gradient for parameter " + (i < names.size() ? names[i] : std::to_string(i)));
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->values();
      auto g = grads[i]->values();
      auto m = m_[i].values();
      auto v = v_[i].values();
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        p[k] -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * p[k]);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Five-fold plan

inline constexpr int kFolds = 5;

struct FoldTrial {
  std::vector<std::string> train, validation, test;
};

struct FoldPlan {
  std::vector<std::string> case_ids;  // input order
  std::vector<int> fold_of;           // parallel to case_ids

  std::vector<std::string> members(int fold) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < case_ids.size(); ++i)
      if (fold_of[i] == fold) out.push_back(case_ids[i]);
    return out;
  }

  // Trial t: test fold t, validation fold t+1, remaining three train.
  FoldTrial trial(int t) const {
    if (t < 0 || t >= kFolds) throw DomainError("trial index must lie in [0, 5)");
    FoldTrial tr;
    tr.test = members(t);
    tr.validation = members((t + 1) % kFolds);
    for (int k = 2; k < kFolds; ++k) {
      auto m = members((t + k) % kFolds);
      tr.train.insert(tr.train.end(), m.begin(), m.end());
    }
    return tr;
  }
};

// Seeded shuffle, then round-robin assignment.
inline FoldPlan make_folds(const std::vector<std::string>& case_ids, std::uint64_t seed) {
  if (case_ids.size() < static_cast<std::size_t>(kFolds))
    throw DomainError("five-fold split needs at least 5 cases, got " + std::to_string(case_ids.size()));
  std::vector<std::size_t> order(case_ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i-- > 1;) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  FoldPlan plan{case_ids, std::vector<int>(case_ids.size())};
  for (std::size_t pos = 0; pos < order.size(); ++pos) plan.fold_of[order[pos]] = static_cast<int>(pos % kFolds);
  return plan;
}

// ---------------------------------------------------------------------------
// Training configuration and loop

enum class FinetuneMode { Scratch, NoFrozen, EncFrozen };

inline std::string to_string(FinetuneMode m) {
  switch (m) {
    case FinetuneMode::Scratch: return "scratch";
    case FinetuneMode::NoFrozen: return "nofrozen";
    case FinetuneMode::EncFrozen: return "encfrozen";
  }
  return "?";
}

inline FinetuneMode finetune_mode_from_string(const std::string& s) {
  if (s == "scratch" || s == "Scratch") return FinetuneMode::Scratch;
  if (s == "nofrozen" || s == "NoFrozen" || s == "no-frozen") return FinetuneMode::NoFrozen;
  if (s == "encfrozen" || s == "EncFrozen" || s == "enc-frozen") return FinetuneMode::EncFrozen;
  throw DomainError("unknown fine-tuning mode '" + s + "'");
}

inline FreezeMask freeze_mask_for(FinetuneMode m, bool enc_frozen_codebook_trainable = false) {
  switch (m) {
    case FinetuneMode::Scratch: return FreezeMask::scratch();
    case FinetuneMode::NoFrozen: return FreezeMask::no_frozen();
    case FinetuneMode::EncFrozen: return FreezeMask::enc_frozen(enc_frozen_codebook_trainable);
  }
  return {};
}

struct TrainConfig {
  FinetuneMode mode = FinetuneMode::NoFrozen;
  int steps = 300;
  int batch_size = 8;
  double learning_rate = 1e-5;
  std::uint64_t seed = 0;
  double commitment_beta = 0.25;
  int expire_age = 2;
  std::uint64_t folds_seed = 0;
  bool use_commitment = true;
  bool enc_frozen_codebook_trainable = false;
  double weight_decay = 0.01;
  double ema_decay = 0.99;
  int kmeans_iters = 10;
  std::size_t cube_edge = 16;  // 3D pre-training tiles
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"steps", c.steps},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"seed", c.seed},
       {"commitment_beta", c.commitment_beta},
       {"expire_age", c.expire_age},
       {"folds_seed", c.folds_seed},
       {"use_commitment", c.use_commitment},
       {"enc_frozen_codebook_trainable", c.enc_frozen_codebook_trainable},
       {"weight_decay", c.weight_decay},
       {"ema_decay", c.ema_decay},
       {"kmeans_iters", c.kmeans_iters},
       {"cube_edge", c.cube_edge}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.mode = finetune_mode_from_string(j.value("mode", to_string(d.mode)));
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.seed = j.value("seed", d.seed);
  c.commitment_beta = j.value("commitment_beta", d.commitment_beta);
  c.expire_age = j.value("expire_age", d.expire_age);
  c.folds_seed = j.value("folds_seed", d.folds_seed);
  c.use_commitment = j.value("use_commitment", d.use_commitment);
  c.enc_frozen_codebook_trainable = j.value("enc_frozen_codebook_trainable", d.enc_frozen_codebook_trainable);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.ema_decay = j.value("ema_decay", d.ema_decay);
  c.kmeans_iters = j.value("kmeans_iters", d.kmeans_iters);
  c.cube_edge = j.value("cube_edge", d.cube_edge);
}

struct Sample {
  Tensor input;   // [1, spatial...], normalized
  Tensor target;  // same shape
};

struct TrainLog {
  std::vector<double> l1;          // batch-mean L1 before each update
  std::vector<double> commitment;  // batch-mean commitment term
  std::size_t codes_expired = 0;
};

// Supplies the sample pool for a given epoch (lets pre-training re-augment).
using EpochSource = std::function<std::vector<Sample>(std::uint64_t epoch)>;

namespace detail {

enum : std::uint64_t { kStreamShuffle = 1, kStreamKmeans = 2, kStreamExpire = 3, kStreamAugment = 4, kStreamInit = 5 };

class BatchStream {
 public:
  BatchStream(EpochSource source, std::size_t batch, std::uint64_t seed)
      : source_(std::move(source)), batch_(batch), seed_(seed) {}

  std::vector<const Sample*> next() {
    retired_.clear();
    std::vector<const Sample*> out;
    while (out.size() < batch_) {
      if (cursor_ >= order_.size()) refill();
      out.push_back(&pool_[order_[cursor_++]]);
    }
    return out;
  }

 private:
  // Samples of the previous epoch stay alive until the batch that straddles
  // the epoch boundary has been consumed.
  void refill() {
    retired_.push_back(std::move(pool_));
    pool_ = source_(epoch_);
    if (pool_.empty()) throw DomainError("training data is empty");
    order_.resize(pool_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(seed_, kStreamShuffle * 1000003 + epoch_));
    std::shuffle(order_.begin(), order_.end(), rng);
    cursor_ = 0;
    ++epoch_;
  }

  EpochSource source_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<Sample> pool_;
  std::vector<std::vector<Sample>> retired_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

inline void initialize_codebooks(Checkpoint& ck, const std::vector<const Sample*>& batch, const TrainConfig& cfg) {
  std::vector<Matrix> latents(ck.codebooks.size());
  for (const auto* s : batch) {
    Graph g;
    std::vector<NodeId> params;
    for (const auto& p : ck.params) params.push_back(g.constant(p.value));
    auto t = trace_forward(g, ck, params, s->input, QuantizerMode::Bypass, true);
    for (std::size_t l = 0; l < latents.size(); ++l) latents[l].append_rows(channels_to_rows(g.value(t.normalized_latents[l])));
  }
  for (std::size_t l = 0; l < latents.size(); ++l)
    if (!ck.codebooks[l].initialized())
      ck.codebooks[l].kmeans_init(latents[l], cfg.kmeans_iters, mix_seed(cfg.seed, kStreamKmeans * 1000003 + l));
}

}  // namespace detail

// Generic loop: L1(output, target) (+ commitment), AdamW on the groups the
// mask leaves trainable, EMA codebook updates and stale-code expiration when
// the codebook is trainable. Parameters are rounded to float32 after every
// step so checkpoints round-trip exactly.
inline TrainLog train(Checkpoint& ck, const FreezeMask& mask, const EpochSource& source, const TrainConfig& cfg) {
  if (cfg.steps < 0) throw DomainError("steps must be >= 0");
  if (cfg.batch_size < 1) throw DomainError("batch_size must be >= 1");
  ck.config.commitment_beta = cfg.commitment_beta;
  detail::BatchStream stream(source, static_cast<std::size_t>(cfg.batch_size), cfg.seed);
  TrainLog log;

  std::optional<std::vector<const Sample*>> first;
  const bool need_init = std::any_of(ck.codebooks.begin(), ck.codebooks.end(), [](const Codebook& c) { return !c.initialized(); });
  if (need_init) {
    first = stream.next();
    detail::initialize_codebooks(ck, *first, cfg);
    ck.round_to_storage();
  }

  const auto trainable = apply_freeze(ck, mask);
  AdamW opt({cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = first ? *first : stream.next();
    first.reset();

    Graph g;
    const auto params = bind_parameters(g, ck);
    std::optional<NodeId> total;
    double l1_sum = 0.0, commit_sum = 0.0;
    std::vector<Matrix> level_rows(ck.codebooks.size());
    std::vector<QuantizeResult> level_results(ck.codebooks.size());
    for (const auto* s : batch) {
      auto t = trace_forward(g, ck, params, s->input, QuantizerMode::Quantize);
      NodeId loss = g.l1_loss(t.output, s->target);
      l1_sum += g.value(loss).item();
      if (t.commitment) {
        commit_sum += g.value(*t.commitment).item();
        if (cfg.use_commitment) loss = g.add(loss, *t.commitment);
      }
      total = total ? g.add(*total, loss) : loss;
      for (std::size_t l = 0; l < level_rows.size(); ++l) {
        level_rows[l].append_rows(channels_to_rows(g.value(t.normalized_latents[l])));
        auto& idx = level_results[l].indices;
        idx.insert(idx.end(), t.quantized[l].indices.begin(), t.quantized[l].indices.end());
      }
    }
    const NodeId loss = g.scale(*total, 1.0 / static_cast<double>(batch.size()));
    const double loss_value = g.value(loss).item();
    if (!std::isfinite(loss_value)) throw TrainingError("loss diverged at step " + std::to_string(step));
    log.l1.push_back(l1_sum / static_cast<double>(batch.size()));
    log.commitment.push_back(commit_sum / static_cast<double>(batch.size()));
    g.backward(loss);

    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    std::vector<std::string> names;
    for (auto i : trainable) {
      ps.push_back(&ck.params[i].value);
      gs.push_back(&g.grad(params[i]));
      names.push_back(ck.params[i].name);
    }
    opt.step(ps, gs, names);

    if (mask.codebook_trainable) {
      for (std::size_t l = 0; l < ck.codebooks.size(); ++l) {
        ck.codebooks[l].ema_update(level_rows[l], level_results[l], cfg.ema_decay);
        const auto rep = ck.codebooks[l].expire_stale(
            level_rows[l], cfg.expire_age, mix_seed(cfg.seed, detail::kStreamExpire * 1000003 + ck.step * 31 + l));
        log.codes_expired += rep.replaced.size();
      }
    }
    ck.round_to_storage();
    ++ck.step;
  }
  return log;
}

// ---------------------------------------------------------------------------
// Data assembly

inline Tensor slice_tensor(const Slice& s, std::size_t granularity, float pad_value) {
  const std::size_t pw = round_up(s.width, granularity), ph = round_up(s.height, granularity);
  Tensor t(Shape{1, ph, pw}, static_cast<double>(pad_value));
  for (std::size_t r = 0; r < s.height; ++r)
    for (std::size_t c = 0; c < s.width; ++c) t[c + pw * r] = s.at(c, r);
  return t;
}

// All slices of all three planes, input == target.
inline std::vector<Sample> reconstruction_slices(const Volume& v, std::size_t granularity, float pad_value) {
  std::vector<Sample> out;
  for (auto plane : kPlanes)
    for (const auto& s : slice_volume(v, plane)) {
      Tensor t = slice_tensor(s, granularity, pad_value);
      out.push_back({t, t});
    }
  return out;
}

// Paired PET/CT slices over all three planes; volumes already sym11.
inline std::vector<Sample> paired_slices(const Volume& pet, const Volume& ct, std::size_t granularity, float pad_value) {
  std::vector<Sample> out;
  for (auto plane : kPlanes) {
    const auto ps = slice_volume(pet, plane);
    const auto cs = slice_volume(ct, plane);
    if (ps.size() != cs.size()) throw DomainError("unpaired slice counts");
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (ps[k].width != cs[k].width || ps[k].height != cs[k].height) throw DomainError("unpaired slice extents");
      out.push_back({slice_tensor(ps[k], granularity, pad_value), slice_tensor(cs[k], granularity, pad_value)});
    }
  }
  return out;
}

// Raw PET activity and HU CT -> sym11 slice pairs padded with normalized air.
inline std::vector<Sample> translation_pairs(const Volume& pet, const Volume& ct, std::size_t granularity) {
  if (pet.space != IntensitySpace::Activity || ct.space != IntensitySpace::HU)
    throw DomainError("translation_pairs expects an activity PET and an HU CT");
  if (pet.dims != ct.dims) throw DomainError("unpaired PET/CT extents");
  return paired_slices(normalize(pet, IntensitySpace::Sym11), normalize(ct, IntensitySpace::Sym11), granularity, -1.0f);
}

// Self-supervised reconstruction on unit01 volumes, re-augmented every epoch
// with one of the 48 grid symmetries. Returns a checkpoint tagged pretrained.
inline Checkpoint pretrain_recon(const ModelConfig& config, const std::vector<Volume>& volumes, const TrainConfig& cfg,
                                 TrainLog* log_out = nullptr) {
  if (volumes.empty()) throw DomainError("pre-training needs at least one volume");
  for (const auto& v : volumes)
    if (v.space != IntensitySpace::Unit01) throw DomainError("pre-training volumes must be unit01 normalized");
  Checkpoint ck = build_model(config);
  ck.intensity = Intensity::Unit01;
  const std::size_t g = config.granularity();
  const int rank = config.spatial_rank;
  if (rank == 3 && cfg.cube_edge % g != 0) throw DomainError("cube edge must be divisible by the model granularity");
  EpochSource source = [&volumes, g, rank, &cfg](std::uint64_t epoch) {
    std::vector<Sample> pool;
    for (std::size_t i = 0; i < volumes.size(); ++i) {
      const Volume aug = augment(volumes[i], mix_seed(cfg.seed, detail::kStreamAugment * 1000003 + epoch * 7919 + i));
      if (rank == 2) {
        auto s = reconstruction_slices(aug, g, 0.0f);
        pool.insert(pool.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
      } else {
        for (const auto& c : extract_cubes(aug, cfg.cube_edge, 0.0f)) {
          const std::size_t e = cfg.cube_edge;
          Tensor t(Shape{1, e, e, e});
          for (std::size_t k = 0; k < c.volume.size(); ++k) t[k] = c.volume.voxels[k];
          pool.push_back({t, t});
        }
      }
    }
    return pool;
  };
  TrainConfig pc = cfg;
  auto log = train(ck, FreezeMask::no_frozen(), source, pc);
  ck.provenance = Provenance::Pretrained;
  if (log_out) *log_out = std::move(log);
  return ck;
}

// PET -> CT fine-tuning on paired sym11 samples under one of three regimes.
// No augmentation. Scratch re-draws every parameter from cfg.seed.
inline Checkpoint finetune_translate(const Checkpoint& base, const std::vector<Sample>& pairs, const TrainConfig& cfg,
                                     TrainLog* log_out = nullptr) {
  if (pairs.empty()) throw DomainError("fine-tuning needs at least one slice pair");
  for (const auto& s : pairs)
    if (s.input.shape() != s.target.shape()) throw DomainError("unpaired slice shapes");
  Checkpoint ck = base;
  if (cfg.mode == FinetuneMode::Scratch) reinitialize(ck, mix_seed(cfg.seed, detail::kStreamInit));
  ck.intensity = Intensity::Sym11;
  ck.step = 0;
  const auto mask = freeze_mask_for(cfg.mode, cfg.enc_frozen_codebook_trainable);
  if (!mask.codebook_trainable)
    for (const auto& cb : ck.codebooks)
      if (!cb.initialized()) throw DomainError("a frozen codebook must be initialized before fine-tuning");
  EpochSource source = [&pairs](std::uint64_t) { return pairs; };
  auto log = train(ck, mask, source, cfg);
  ck.provenance = cfg.mode == FinetuneMode::Scratch ? Provenance::Scratch : Provenance::Finetuned;
  if (log_out) *log_out = std::move(log);
  return ck;
}

// Whole-volume MSE in HU between each CT and its reconstruction, averaged
// over the evaluation set.
inline double reconstruction_mse(const Checkpoint& ck, const std::vector<Volume>& cts, int threads = 1) {
  double total = 0.0;
  for (const auto& ct : cts) {
    const Volume rec = reconstruct_ct(ck, ct, threads);
    double s = 0.0;
    for (std::size_t i = 0; i < ct.size(); ++i) {
      const double d = static_cast<double>(rec.voxels[i]) - ct.voxels[i];
      s += d * d;
    }
    total += s / static_cast<double>(ct.size());
  }
  return total / static_cast<double>(cts.size());
}

// Index of the lowest-MSE candidate; ties keep the earliest.
inline std::size_t select_checkpoint(const std::vector<Checkpoint>& candidates, const std::vector<Volume>& eval_cts,
                                     std::vector<double>* scores = nullptr, int threads = 1) {
  if (candidates.empty()) throw DomainError("select_checkpoint needs at least one candidate");
  if (candidates.size() == 1 && !scores) return 0;
  if (eval_cts.empty()) throw DomainError("select_checkpoint needs evaluation volumes");
  std::size_t best = 0;
  double best_mse = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double mse = reconstruction_mse(candidates[i], eval_cts, threads);
    if (scores) scores->push_back(mse);
    if (mse < best_mse) {
      best_mse = mse;
      best = i;
    }
  }
  return best;
}

}  // namespace vqct
