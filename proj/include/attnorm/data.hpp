#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "attnorm/tensor.hpp"

namespace attnorm {

template <class T>
struct Dataset {
  Tensor4<T> images;  // N x C x H x W, values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
};

template <class T>
struct SplitDataset {
  Dataset<T> train;
  Dataset<T> val;
};

struct BlobDatasetSpec {
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 1250;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.15;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Each class has its own mean colour and its own oriented grating; every
/// sample draws a random phase and contrast sign and adds Gaussian noise.
/// Pixels are clipped to [0, 1]. The split keeps the class balance exact.
template <class T>
SplitDataset<T> gen_blobs(const BlobDatasetSpec& spec);

/// Copies the given rows into a new batch tensor.
template <class T>
Tensor4<T> gather(const Tensor4<T>& images, const std::size_t* rows, std::size_t count);

/// Random crop from a zero-padded image plus horizontal flip, in place.
template <class T>
void augment_batch(Tensor4<T>& batch, std::size_t pad, bool hflip, std::mt19937_64& rng);

/// Reads an IDX image file (magic 0x00000803, N x H x W bytes) and an
/// optional label file (magic 0x00000801). Pixels are scaled by 1/255 and
/// replicated over `channels`.
template <class T>
Dataset<T> read_idx(const std::string& image_path, const std::string& label_path, std::size_t channels = 1,
                    std::size_t num_classes = 0);
template <class T>
Tensor4<T> read_idx_images(const std::string& path, std::size_t channels = 1);
std::vector<int> read_idx_labels(const std::string& path);

/// Writes N x H x W bytes (first channel, scaled by 255 and rounded).
template <class T>
void write_idx_images(const std::string& path, const Tensor4<T>& images);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

/// Writes bytes to `path` through a temporary file and a rename.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace attnorm
