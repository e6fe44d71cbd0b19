#pragma once

// Training protocol: AdamW with decoupled weight decay, global-norm gradient
// clipping, reduce-on-plateau learning-rate schedule, early stopping with
// best-state restore, stratified splitting, metrics, and the epoch loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "capskan/capsules.hpp"
#include "capskan/data_io.hpp"
#include "capskan/errors.hpp"
#include "capskan/models.hpp"
#include "capskan/ops.hpp"
#include "capskan/rng.hpp"

namespace capskan {

enum class LossKind { auto_select, cross_entropy, margin };

std::string loss_kind_name(LossKind k);
LossKind loss_kind_from_name(const std::string& name);  // ConfigError on unknown

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 50;
  std::size_t early_stop_patience = 5;
  double improvement_threshold = 1e-4;
  double clip_max_norm = 1.0;
  double scheduler_factor = 0.5;
  std::size_t scheduler_patience = 2;
  double lr_floor = 1e-6;
  LossKind loss = LossKind::auto_select;
  int positive_class = 1;  // class treated as positive for precision/recall/F1
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError citing the offending field
};

struct EpochRecord {
  std::size_t epoch = 0;    // 1-based
  double train_loss = 0.0;  // sample-weighted mean over training batches
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;            // learning rate used for this epoch's updates
  double wall_time_sec = 0.0; // kept in memory only, never serialized
};

// Serializes exactly {epoch, train_loss, val_loss, val_acc, lr} as one JSON
// object per line; wall time is deliberately omitted so reruns are
// byte-identical.
std::string epoch_record_jsonl(const EpochRecord& rec);

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int positive_class = 1;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

// Confusion-derived metrics; precision/recall/F1 are one-vs-rest for
// `positive_class`. Zero denominators yield 0. Empty input is rejected.
MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& labels, int positive_class,
                              std::size_t num_classes = 0);

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Per class: floor(frac_val*n) validation and floor(frac_test*n) test samples,
// remainder to train; assignment order is a seeded per-class shuffle, then
// each split is sorted. Classes with fewer than 3 samples are rejected.
SplitIndices stratified_split(const std::vector<int>& labels, double frac_train,
                              double frac_val, double frac_test, std::uint64_t seed);

template <class T>
class AdamW {
 public:
  AdamW(ParamRegistry<T>& params, const TrainConfig& cfg)
      : lr_(cfg.lr), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2),
        eps_(cfg.eps) {
    for (auto& e : params) {
      if (!e.trainable) continue;
      slots_.push_back(Slot{e.name, e.tensor, std::vector<T>(e.tensor.size(), T(0)),
                            std::vector<T>(e.tensor.size(), T(0))});
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t step_count() const { return t_; }

  // One decoupled-decay update. Parameters without an accumulated gradient
  // are treated as zero-gradient (decay still applies). Non-finite gradients
  // raise NumericError naming the parameter.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& s : slots_) {
      auto theta = s.param.values_mut();
      const bool has_g = s.param.has_grad();
      auto g = has_g ? s.param.grad() : std::span<const T>();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = has_g ? static_cast<double>(g[i]) : 0.0;
        if (!std::isfinite(gi))
          throw NumericError("non-finite gradient in parameter '" + s.name +
                             "' at element " + std::to_string(i));
        s.m[i] = static_cast<T>(b1_ * s.m[i] + (1.0 - b1_) * gi);
        s.v[i] = static_cast<T>(b2_ * s.v[i] + (1.0 - b2_) * gi * gi);
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        theta[i] = static_cast<T>(theta[i] -
                                  lr_ * (mhat / (std::sqrt(vhat) + eps_) +
                                         wd_ * theta[i]));
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> m, v;
  };
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
  double lr_, wd_, b1_, b2_, eps_;
};

// Scales every trainable gradient so the global L2 norm is at most max_norm;
// returns the applied scale (1 when already within bounds).
template <class T>
double clip_gradients(ParamRegistry<T>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_gradients: max_norm must be > 0");
  double sq = 0.0;
  for (auto& e : params) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    for (T v : e.tensor.grad()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return 1.0;
  const double scale = max_norm / norm;
  for (auto& e : params) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    for (T& v : e.tensor.grad_mut()) v = static_cast<T>(v * scale);
  }
  return scale;
}

// Reduce-on-plateau: an observation improves when it is below best minus
// threshold; after `patience` consecutive non-improving observations the rate
// is multiplied by `factor` (never below `floor`) and the stall counter
// resets.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, double factor = 0.5, std::size_t patience = 2,
                   double threshold = 1e-4, double floor = 1e-6);
  double observe(double val_loss);  // returns the (possibly reduced) lr
  double lr() const { return lr_; }
  std::size_t reductions() const { return reductions_; }

 private:
  double lr_, factor_;
  std::size_t patience_;
  double threshold_, floor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
  std::size_t reductions_ = 0;
};

// Signals stop once the best validation loss is `patience` epochs old.
class EarlyStopper {
 public:
  EarlyStopper(std::size_t patience = 5, double threshold = 1e-4);
  // Returns true when training should stop after this epoch. `improved()`
  // reports whether this observation became the new best (snapshot point).
  bool observe(std::size_t epoch, double val_loss);
  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  double threshold_;
  std::size_t best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

template <class T>
struct TrainResult {
  std::vector<EpochRecord> history;
  MetricsReport test_metrics;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
  double total_wall_time_sec = 0.0;  // in-memory timing, never logged
};

// Resolves the loss actually used for a model: auto -> cross-entropy for
// logit heads, margin for capsule-length heads. Margin on a logits head is a
// configuration error.
template <class T>
LossKind resolve_loss(const ModelGraph<T>& model, LossKind requested);

template <class T>
Tensor<T> compute_loss(const Tensor<T>& outputs, const std::vector<int>& labels,
                       LossKind kind) {
  if (kind == LossKind::cross_entropy) return cross_entropy_loss(outputs, labels);
  Tensor<T> target = one_hot<T>(labels, outputs.shape()[1]);
  return margin_loss(outputs, target);
}

// Argmax class predictions over the model head (logits or lengths).
template <class T>
std::vector<int> predict(ModelGraph<T>& model, const Dataset& ds,
                         const std::vector<std::size_t>& indices, std::size_t batch_size);

// Mean loss and accuracy over `indices` without touching gradients.
template <class T>
std::pair<double, double> evaluate_split(ModelGraph<T>& model, const Dataset& ds,
                                         const std::vector<std::size_t>& indices,
                                         std::size_t batch_size, LossKind kind);

// Full protocol: seeded epoch shuffles, minibatch AdamW with clipping,
// plateau schedule on validation loss, early stopping with best-state
// restore, and a single test-split evaluation on the restored model. Emits
// one JSONL record per epoch to `epoch_log` when provided.
template <class T>
TrainResult<T> train_loop(ModelGraph<T>& model, const Dataset& ds,
                          const SplitIndices& split, const TrainConfig& cfg,
                          std::ostream* epoch_log = nullptr,
                          const std::function<void(const EpochRecord&)>& on_epoch = {});

extern template LossKind resolve_loss<float>(const ModelGraph<float>&, LossKind);
extern template LossKind resolve_loss<double>(const ModelGraph<double>&, LossKind);
extern template std::vector<int> predict<float>(ModelGraph<float>&, const Dataset&,
                                                const std::vector<std::size_t>&, std::size_t);
extern template std::pair<double, double> evaluate_split<float>(
    ModelGraph<float>&, const Dataset&, const std::vector<std::size_t>&, std::size_t,
    LossKind);
extern template TrainResult<float> train_loop<float>(
    ModelGraph<float>&, const Dataset&, const SplitIndices&, const TrainConfig&,
    std::ostream*, const std::function<void(const EpochRecord&)>&);

}  // namespace capskan
