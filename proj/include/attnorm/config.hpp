#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "attnorm/data.hpp"
#include "attnorm/network.hpp"
#include "attnorm/training.hpp"

namespace attnorm {

enum class DType { kF32, kF64 };

/// Everything needed to rebuild a run. Text form is `section.key = value`
/// lines with `#` comments; sections are net, norm, an, train, data.
struct RunConfig {
  // net
  std::string arch = "toy";  // toy | resnet34 | resnet50 | resnet101
  std::size_t num_classes = 4;
  bool zero_gamma = true;  // last norm scale of each residual branch starts at 0
  std::vector<std::size_t> k_per_stage{10, 20, 20};
  DType dtype = DType::kF32;
  // norm
  std::string norm = "bn";
  std::size_t gn_groups = 0;
  std::size_t se_r = 16;
  double eps = kDefaultNormEps;
  double momentum = kDefaultMomentum;
  // an
  AttentionConfig attention{};
  // train
  TrainConfig train{};
  int threads = 0;  // 0 = OpenMP default
  std::string metrics_path = "metrics.csv";
  std::string checkpoint_path = "model.ckpt";
  // data
  std::string data_source = "blobs";  // blobs | idx
  BlobDatasetSpec blobs{};
  std::string train_images, train_labels, val_images, val_labels;

  NetSpec net_spec() const;
  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
/// Canonical text: every key, fixed order, round-trip exact values.
std::string serialize_config(const RunConfig& cfg);

/// Sets one `section.key` from its text value; throws ConfigError.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

/// Blob dataset or IDX files as configured.
template <class T>
SplitDataset<T> load_dataset(const RunConfig& cfg);

}  // namespace attnorm
