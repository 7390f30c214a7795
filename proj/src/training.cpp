#include "attnorm/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

namespace attnorm {

void Schedule::validate() const {
  if (!(base_lr >= 0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be finite and >= 0");
  if (total_epochs < 1) throw ConfigError("total_epochs must be >= 1");
  if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
  if (warmup_epochs >= total_epochs) throw ConfigError("warmup_epochs must be < total_epochs");
}

double lr_at(const Schedule& s, std::size_t step) {
  s.validate();
  const std::size_t total = s.total_steps();
  if (step >= total) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + ")");
  }
  const std::size_t warm = s.warmup_epochs * s.steps_per_epoch;
  if (step < warm) return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double p = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return 0.5 * s.base_lr * (1.0 + std::cos(std::numbers::pi * p));
}

template <class T>
SGD<T>::SGD(std::vector<NamedParam<T>> params, SGDConfig cfg) : cfg_(cfg) {
  for (auto& np : params) {
    if (np.param->is_buffer()) continue;
    params_.push_back(np);
  }
  bufs_.resize(params_.size());
}

template <class T>
void SGD<T>::step(double lr) {
  const T m = static_cast<T>(cfg_.momentum);
  const T eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param<T>& p = *params_[i].param;
    if (!p.trainable) continue;
    if (p.grad.size() != p.value.size()) {
      throw DimensionError("sgd: gradient of " + params_[i].name + " has " + std::to_string(p.grad.size()) +
                           " elements, parameter has " + std::to_string(p.value.size()));
    }
    auto& buf = bufs_[i];
    if (buf.empty()) buf.assign(p.value.size(), T(0));
    const bool decay = cfg_.decay_norm_params || p.kind != ParamKind::kNormAffine;
    const T wd = decay ? static_cast<T>(cfg_.weight_decay) : T(0);
    for (std::size_t j = 0; j < buf.size(); ++j) {
      buf[j] = m * buf[j] + (p.grad[j] + wd * p.value[j]);
      p.value[j] -= eta * buf[j];
    }
  }
}

template <class T>
std::size_t SGD<T>::num_buffers() const {
  return static_cast<std::size_t>(std::count_if(bufs_.begin(), bufs_.end(), [](const auto& b) { return !b.empty(); }));
}

template <class T>
const std::vector<T>* SGD<T>::buffer(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return bufs_[i].empty() ? nullptr : &bufs_[i];
  }
  return nullptr;
}

template <class T>
LossResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> labels) {
  const auto n = logits.rows();
  const auto l = logits.cols();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw DimensionError("cross_entropy: " + std::to_string(n) + " rows, " + std::to_string(labels.size()) +
                         " labels");
  }
  LossResult<T> r;
  r.grad.resize(n, l);
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= l) throw ConfigError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                           std::to_string(l) + ")");
    Eigen::Index arg = 0;
    const double mx = logits.row(i).maxCoeff(&arg);
    if (arg == y) ++r.correct;
    double z = 0;
    for (Eigen::Index j = 0; j < l; ++j) z += std::exp(static_cast<double>(logits(i, j)) - mx);
    const double logz = mx + std::log(z);
    total += logz - logits(i, y);
    for (Eigen::Index j = 0; j < l; ++j) {
      const double p = std::exp(static_cast<double>(logits(i, j)) - logz);
      r.grad(i, j) = static_cast<T>((p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  r.loss = total / static_cast<double>(n);
  return r;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (warmup_epochs >= epochs) throw ConfigError("train.warmup_epochs must be < train.epochs");
  if (!(base_lr >= 0)) throw ConfigError("train.lr must be >= 0");
  if (sgd.momentum < 0 || sgd.momentum >= 1) throw ConfigError("train.momentum must be in [0, 1)");
  if (sgd.weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (label_smoothing != 0) throw ConfigError("label smoothing is not supported");
  if (mixup != 0) throw ConfigError("mixup is not supported");
}

template <class T>
EvalResult evaluate(Network<T>& net, const Dataset<T>& data, std::size_t batch_size) {
  const Mode prev = net.mode();
  net.set_mode(Mode::kEval);
  EvalResult r;
  double loss = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const std::size_t cnt = std::min(batch_size, data.size() - b);
    const Tensor4<T> x = gather(data.images, rows.data() + b, cnt);
    const Mat<T> logits = net.logits(x);
    const auto res = cross_entropy<T>(logits, std::span<const int>(data.labels.data() + b, cnt));
    loss += res.loss * static_cast<double>(cnt);
    correct += res.correct;
  }
  net.set_mode(prev);
  r.count = data.size();
  if (r.count > 0) {
    r.loss = loss / static_cast<double>(r.count);
    r.top1 = static_cast<double>(correct) / static_cast<double>(r.count);
  }
  return r;
}

template <class T>
EvalResult train_epoch(Network<T>& net, SGD<T>& opt, const Dataset<T>& data, const TrainConfig& cfg,
                       const Schedule& sched, std::size_t epoch, std::mt19937_64& rng) {
  net.set_mode(Mode::kTrain);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  double loss = 0;
  std::size_t correct = 0;
  std::vector<int> labels;
  for (std::size_t b = 0, step = 0; b < data.size(); b += cfg.batch_size, ++step) {
    const std::size_t cnt = std::min(cfg.batch_size, data.size() - b);
    Tensor4<T> x = gather(data.images, order.data() + b, cnt);
    if (cfg.augment) augment_batch(x, cfg.crop_pad, cfg.hflip, rng);
    labels.resize(cnt);
    for (std::size_t i = 0; i < cnt; ++i) labels[i] = data.labels[order[b + i]];

    const Mat<T> logits = net.logits(x);
    auto res = cross_entropy<T>(logits, labels);
    if (!std::isfinite(res.loss)) {
      net.logits_traced(x);
      throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + " step " +
                         std::to_string(step) + " (logits non-finite only after the classifier)");
    }
    net.zero_grad();
    net.backward_logits(res.grad);
    opt.step(lr_at(sched, epoch * sched.steps_per_epoch + step));
    loss += res.loss * static_cast<double>(cnt);
    correct += res.correct;
  }
  EvalResult r;
  r.count = data.size();
  r.loss = loss / static_cast<double>(r.count);
  r.top1 = static_cast<double>(correct) / static_cast<double>(r.count);
  return r;
}

template <class T>
std::vector<EpochMetrics> train_loop(const TrainConfig& cfg, Network<T>& net, const SplitDataset<T>& data,
                                     std::mt19937_64& rng, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.train.size() == 0) throw ConfigError("training set is empty");
  Schedule sched;
  sched.base_lr = cfg.base_lr;
  sched.warmup_epochs = cfg.warmup_epochs;
  sched.total_epochs = cfg.epochs;
  sched.steps_per_epoch = (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  SGD<T> opt(net.named_params(), cfg.sgd);
  std::vector<EpochMetrics> history;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e + 1;
    m.lr = lr_at(sched, e * sched.steps_per_epoch);
    const EvalResult tr = train_epoch(net, opt, data.train, cfg, sched, e, rng);
    m.train_loss = tr.loss;
    m.train_top1 = tr.top1;
    if (data.val.size() > 0) {
      const EvalResult va = evaluate(net, data.val, cfg.eval_batch_size);
      m.val_loss = va.loss;
      m.val_top1 = va.top1;
    }
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::string out = "epoch,lr,train_loss,train_top1,val_loss,val_top1\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_loss, r.train_top1,
                  r.val_loss, r.val_top1);
    out += line;
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows) {
  write_file_atomic(path, metrics_csv(rows));
}

#define ATTNORM_INSTANTIATE(T)                                                                                \
  template class SGD<T>;                                                                                      \
  template LossResult<T> cross_entropy(const Mat<T>&, std::span<const int>);                                 \
  template EvalResult evaluate(Network<T>&, const Dataset<T>&, std::size_t);                                  \
  template EvalResult train_epoch(Network<T>&, SGD<T>&, const Dataset<T>&, const TrainConfig&, const Schedule&, \
                                  std::size_t, std::mt19937_64&);                                             \
  template std::vector<EpochMetrics> train_loop(const TrainConfig&, Network<T>&, const SplitDataset<T>&,       \
                                                std::mt19937_64&, const EpochCallback&);

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm
