#include "capskan/training.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>

#include <json.hpp>

namespace capskan {

std::string loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::auto_select: return "auto";
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::margin: return "margin";
  }
  return "auto";
}

LossKind loss_kind_from_name(const std::string& name) {
  if (name == "auto") return LossKind::auto_select;
  if (name == "cross_entropy") return LossKind::cross_entropy;
  if (name == "margin") return LossKind::margin;
  throw ConfigError("unknown loss '" + name +
                    "' (expected one of: auto, cross_entropy, margin)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw ConfigError("lr must be a positive finite number, got " + std::to_string(lr));
  if (weight_decay < 0.0 || !std::isfinite(weight_decay))
    throw ConfigError("weight_decay must be >= 0, got " + std::to_string(weight_decay));
  if (!(beta1 >= 0.0 && beta1 < 1.0))
    throw ConfigError("beta1 must lie in [0,1), got " + std::to_string(beta1));
  if (!(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("beta2 must lie in [0,1), got " + std::to_string(beta2));
  if (!(eps > 0.0))
    throw ConfigError("eps must be > 0, got " + std::to_string(eps));
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1, got 0");
  if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1, got 0");
  if (early_stop_patience == 0)
    throw ConfigError("early_stop_patience must be >= 1, got 0");
  if (!(improvement_threshold >= 0.0))
    throw ConfigError("improvement_threshold must be >= 0, got " +
                      std::to_string(improvement_threshold));
  if (!(clip_max_norm > 0.0))
    throw ConfigError("clip_max_norm must be > 0, got " + std::to_string(clip_max_norm));
  if (!(scheduler_factor > 0.0 && scheduler_factor < 1.0))
    throw ConfigError("scheduler_factor must lie in (0,1), got " +
                      std::to_string(scheduler_factor));
  if (scheduler_patience == 0)
    throw ConfigError("scheduler_patience must be >= 1, got 0");
  if (!(lr_floor > 0.0) || lr_floor > lr)
    throw ConfigError("lr_floor must lie in (0, lr], got " + std::to_string(lr_floor));
  if (positive_class < 0)
    throw ConfigError("positive_class must be >= 0, got " + std::to_string(positive_class));
}

std::string epoch_record_jsonl(const EpochRecord& rec) {
  nlohmann::ordered_json j;
  j["epoch"] = rec.epoch;
  j["train_loss"] = rec.train_loss;
  j["val_loss"] = rec.val_loss;
  j["val_acc"] = rec.val_acc;
  j["lr"] = rec.lr;
  return j.dump();
}

MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& labels, int positive_class,
                              std::size_t num_classes) {
  if (predictions.empty())
    throw std::invalid_argument("compute_metrics: empty prediction set");
  if (predictions.size() != labels.size())
    throw std::invalid_argument("compute_metrics: " + std::to_string(predictions.size()) +
                                " predictions vs " + std::to_string(labels.size()) +
                                " labels");
  int max_seen = positive_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] < 0 || labels[i] < 0)
      throw std::invalid_argument("compute_metrics: negative class index at sample " +
                                  std::to_string(i));
    max_seen = std::max({max_seen, predictions[i], labels[i]});
  }
  std::size_t k = std::max(num_classes, static_cast<std::size_t>(max_seen) + 1);

  MetricsReport rep;
  rep.positive_class = positive_class;
  rep.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    rep.confusion[static_cast<std::size_t>(labels[i])]
                 [static_cast<std::size_t>(predictions[i])]++;
    if (labels[i] == predictions[i]) ++correct;
  }
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());

  const auto pos = static_cast<std::size_t>(positive_class);
  std::size_t tp = rep.confusion[pos][pos], fp = 0, fn = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (c == pos) continue;
    fp += rep.confusion[c][pos];
    fn += rep.confusion[pos][c];
  }
  rep.precision = (tp + fp) ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  rep.recall = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  rep.f1 = (rep.precision + rep.recall > 0.0)
               ? 2.0 * rep.precision * rep.recall / (rep.precision + rep.recall)
               : 0.0;
  return rep;
}

SplitIndices stratified_split(const std::vector<int>& labels, double frac_train,
                              double frac_val, double frac_test, std::uint64_t seed) {
  if (labels.empty()) throw DataError("stratified_split: empty label set");
  if (!(frac_train >= 0.0 && frac_val >= 0.0 && frac_test >= 0.0) ||
      std::abs(frac_train + frac_val + frac_test - 1.0) > 1e-9)
    throw ConfigError("split fractions must be non-negative and sum to 1, got " +
                      std::to_string(frac_train) + "/" + std::to_string(frac_val) + "/" +
                      std::to_string(frac_test));

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0)
      throw DataError("stratified_split: negative label at sample " + std::to_string(i));
    by_class[labels[i]].push_back(i);
  }
  for (const auto& [cls, idx] : by_class)
    if (idx.size() < 3)
      throw DataError("stratified_split: class " + std::to_string(cls) + " has only " +
                      std::to_string(idx.size()) + " sample(s); at least 3 are required");

  SplitIndices out;
  Rng root(seed);
  for (auto& [cls, idx] : by_class) {
    Rng rng = root.derive(static_cast<std::uint64_t>(cls) + 1);
    rng.shuffle(idx.begin(), idx.end());
    const std::size_t n = idx.size();
    const std::size_t n_val = static_cast<std::size_t>(std::floor(frac_val * static_cast<double>(n)));
    const std::size_t n_test = static_cast<std::size_t>(std::floor(frac_test * static_cast<double>(n)));
    out.val.insert(out.val.end(), idx.begin(), idx.begin() + n_val);
    out.test.insert(out.test.end(), idx.begin() + n_val, idx.begin() + n_val + n_test);
    out.train.insert(out.train.end(), idx.begin() + n_val + n_test, idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

PlateauScheduler::PlateauScheduler(double initial_lr, double factor, std::size_t patience,
                                   double threshold, double floor)
    : lr_(initial_lr), factor_(factor), patience_(patience), threshold_(threshold),
      floor_(floor) {
  if (!(initial_lr > 0.0)) throw std::invalid_argument("PlateauScheduler: lr must be > 0");
  if (!(factor > 0.0 && factor < 1.0))
    throw std::invalid_argument("PlateauScheduler: factor must lie in (0,1)");
  if (patience == 0) throw std::invalid_argument("PlateauScheduler: patience must be >= 1");
}

double PlateauScheduler::observe(double val_loss) {
  if (val_loss < best_ - threshold_) {
    best_ = val_loss;
    bad_ = 0;
  } else if (++bad_ >= patience_) {
    lr_ = std::max(floor_, lr_ * factor_);
    ++reductions_;
    bad_ = 0;
  }
  return lr_;
}

EarlyStopper::EarlyStopper(std::size_t patience, double threshold)
    : patience_(patience), threshold_(threshold) {
  if (patience == 0) throw std::invalid_argument("EarlyStopper: patience must be >= 1");
}

bool EarlyStopper::observe(std::size_t epoch, double val_loss) {
  improved_ = val_loss < best_loss_ - threshold_;
  if (improved_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch;
  }
  return epoch >= best_epoch_ + patience_;
}

template <class T>
LossKind resolve_loss(const ModelGraph<T>& model, LossKind requested) {
  if (requested == LossKind::auto_select)
    return model.output_kind() == OutputKind::lengths ? LossKind::margin
                                                      : LossKind::cross_entropy;
  if (requested == LossKind::margin && model.output_kind() != OutputKind::lengths)
    throw ConfigError("margin loss requires a capsule-length head; architecture '" +
                      model.config().architecture + "' emits logits");
  return requested;
}

namespace {

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& out) {
  const std::size_t b = out.shape()[0], k = out.shape()[1];
  auto v = out.values();
  std::vector<int> preds(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (v[i * k + c] > v[i * k + best]) best = c;
    preds[i] = static_cast<int>(best);
  }
  return preds;
}

}  // namespace

template <class T>
std::vector<int> predict(ModelGraph<T>& model, const Dataset& ds,
                         const std::vector<std::size_t>& indices, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("predict: batch_size must be >= 1");
  NoGradGuard ng;
  const bool was_training = model.is_training();
  model.eval();
  Rng unused(0);
  std::vector<int> preds;
  preds.reserve(indices.size());
  for (std::size_t pos = 0; pos < indices.size(); pos += batch_size) {
    const std::size_t bn = std::min(batch_size, indices.size() - pos);
    std::vector<std::size_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(pos),
                                 indices.begin() + static_cast<std::ptrdiff_t>(pos + bn));
    Tensor<T> out = model.forward(gather_images<T>(ds, idx), unused);
    std::vector<int> p = argmax_rows(out);
    preds.insert(preds.end(), p.begin(), p.end());
  }
  if (was_training) model.train();
  return preds;
}

template <class T>
std::pair<double, double> evaluate_split(ModelGraph<T>& model, const Dataset& ds,
                                         const std::vector<std::size_t>& indices,
                                         std::size_t batch_size, LossKind kind) {
  if (indices.empty()) throw std::invalid_argument("evaluate_split: empty index set");
  if (batch_size == 0) throw std::invalid_argument("evaluate_split: batch_size must be >= 1");
  NoGradGuard ng;
  const bool was_training = model.is_training();
  model.eval();
  Rng unused(0);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t pos = 0; pos < indices.size(); pos += batch_size) {
    const std::size_t bn = std::min(batch_size, indices.size() - pos);
    std::vector<std::size_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(pos),
                                 indices.begin() + static_cast<std::ptrdiff_t>(pos + bn));
    Tensor<T> out = model.forward(gather_images<T>(ds, idx), unused);
    std::vector<int> yb = gather_labels(ds, idx);
    loss_sum += static_cast<double>(compute_loss(out, yb, kind).item()) *
                static_cast<double>(bn);
    std::vector<int> p = argmax_rows(out);
    for (std::size_t i = 0; i < bn; ++i)
      if (p[i] == yb[i]) ++correct;
  }
  if (was_training) model.train();
  const auto n = static_cast<double>(indices.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

template <class T>
TrainResult<T> train_loop(ModelGraph<T>& model, const Dataset& ds,
                          const SplitIndices& split, const TrainConfig& cfg,
                          std::ostream* epoch_log,
                          const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  ds.validate();
  if (split.train.size() < 2)
    throw DataError("train_loop: training split needs at least 2 samples, got " +
                    std::to_string(split.train.size()));
  if (split.val.empty()) throw DataError("train_loop: empty validation split");

  const LossKind kind = resolve_loss(model, cfg.loss);
  AdamW<T> opt(model.params(), cfg);
  PlateauScheduler sched(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience,
                         cfg.improvement_threshold, cfg.lr_floor);
  EarlyStopper stopper(cfg.early_stop_patience, cfg.improvement_threshold);

  TrainResult<T> result;
  std::vector<std::vector<T>> best_state = model.state_snapshot();
  std::vector<std::size_t> order(split.train);
  Rng root(cfg.seed);

  const auto t_start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    Rng shuffle_rng = root.derive(2 * epoch);
    Rng forward_rng = root.derive(2 * epoch + 1);
    shuffle_rng.shuffle(order.begin(), order.end());

    model.train();
    const double lr_used = opt.lr();
    double loss_sum = 0.0;
    std::size_t seen = 0, batch_index = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size, ++batch_index) {
      const std::size_t bn = std::min(cfg.batch_size, order.size() - pos);
      if (bn == 1) continue;  // batch statistics need at least 2 samples
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                   order.begin() + static_cast<std::ptrdiff_t>(pos + bn));
      Tensor<T> x = gather_images<T>(ds, idx);
      std::vector<int> yb = gather_labels(ds, idx);
      model.zero_grad();
      Tensor<T> out = model.forward(x, forward_rng);
      Tensor<T> loss = compute_loss(out, yb, kind);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch_index));
      loss.backward();
      clip_gradients(model.params(), cfg.clip_max_norm);
      opt.step();
      loss_sum += lv * static_cast<double>(bn);
      seen += bn;
    }

    auto [val_loss, val_acc] = evaluate_split(model, ds, split.val, cfg.batch_size, kind);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.val_loss = val_loss;
    rec.val_acc = val_acc;
    rec.lr = lr_used;
    rec.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    result.history.push_back(rec);
    if (epoch_log) {
      *epoch_log << epoch_record_jsonl(rec) << '\n';
      epoch_log->flush();
    }
    if (on_epoch) on_epoch(rec);

    const bool stop = stopper.observe(epoch, val_loss);
    if (stopper.improved()) best_state = model.state_snapshot();
    opt.set_lr(sched.observe(val_loss));
    if (stop) {
      result.early_stopped = true;
      break;
    }
  }

  model.load_state(best_state);
  model.eval();
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  if (!split.test.empty()) {
    std::vector<int> preds = predict(model, ds, split.test, cfg.batch_size);
    result.test_metrics =
        compute_metrics(preds, gather_labels(ds, split.test), cfg.positive_class,
                        ds.num_classes());
  }
  result.total_wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

template LossKind resolve_loss<float>(const ModelGraph<float>&, LossKind);
template LossKind resolve_loss<double>(const ModelGraph<double>&, LossKind);
template std::vector<int> predict<float>(ModelGraph<float>&, const Dataset&,
                                         const std::vector<std::size_t>&, std::size_t);
template std::pair<double, double> evaluate_split<float>(ModelGraph<float>&, const Dataset&,
                                                         const std::vector<std::size_t>&,
                                                         std::size_t, LossKind);
template TrainResult<float> train_loop<float>(ModelGraph<float>&, const Dataset&,
                                              const SplitIndices&, const TrainConfig&,
                                              std::ostream*,
                                              const std::function<void(const EpochRecord&)>&);

}  // namespace capskan
