#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "attnorm/data.hpp"
#include "attnorm/network.hpp"

namespace attnorm {

struct Schedule {
  double base_lr = 0.1;
  std::size_t warmup_epochs = 2;
  std::size_t total_epochs = 30;
  std::size_t steps_per_epoch = 1;

  void validate() const;
  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
};

/// Linear warm-up to base_lr, then half-cosine decay over the remaining steps.
double lr_at(const Schedule& s, std::size_t step);

struct SGDConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool decay_norm_params = true;
};

/// buf = momentum * buf + (grad + wd * param); param -= lr * buf.
/// Parameters with trainable == false are skipped and get no buffer.
template <class T>
class SGD {
 public:
  SGD(std::vector<NamedParam<T>> params, SGDConfig cfg);

  void step(double lr);
  std::size_t num_buffers() const;
  const std::vector<T>* buffer(const std::string& name) const;
  const SGDConfig& config() const { return cfg_; }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<std::vector<T>> bufs_;
  SGDConfig cfg_;
};

template <class T>
struct LossResult {
  double loss = 0;  // mean over the batch
  Mat<T> grad;      // d loss / d logits
  std::size_t correct = 0;
};

/// Mean softmax cross-entropy with max subtraction.
template <class T>
LossResult<T> cross_entropy(const Mat<T>& logits, std::span<const int> labels);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  std::size_t warmup_epochs = 2;
  double base_lr = 0.1;
  SGDConfig sgd{};
  std::uint64_t seed = 1;
  bool augment = true;
  std::size_t crop_pad = 4;
  bool hflip = true;
  double label_smoothing = 0;  // unsupported, must stay 0
  double mixup = 0;            // unsupported, must stay 0
  std::size_t eval_batch_size = 256;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_top1 = 0;
  double val_loss = 0;
  double val_top1 = 0;
};

struct EvalResult {
  double loss = 0;
  double top1 = 0;
  std::size_t count = 0;
};

template <class T>
EvalResult evaluate(Network<T>& net, const Dataset<T>& data, std::size_t batch_size = 256);

/// One pass over `data` in train mode. Returns the mean loss and accuracy.
template <class T>
EvalResult train_epoch(Network<T>& net, SGD<T>& opt, const Dataset<T>& data, const TrainConfig& cfg,
                       const Schedule& sched, std::size_t epoch, std::mt19937_64& rng);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs cfg.epochs epochs, evaluating on data.val after each one. rng carries
/// the shuffle/augmentation stream and is advanced in place.
template <class T>
std::vector<EpochMetrics> train_loop(const TrainConfig& cfg, Network<T>& net, const SplitDataset<T>& data,
                                     std::mt19937_64& rng, const EpochCallback& on_epoch = {});

std::string metrics_csv(const std::vector<EpochMetrics>& rows);
void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows);

}  // namespace attnorm
