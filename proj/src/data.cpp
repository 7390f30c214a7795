#include "attnorm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>
#include <unistd.h>

#include "attnorm/common.hpp"

namespace attnorm {

void BlobDatasetSpec::validate() const {
  if (num_classes < 2) throw ConfigError("blob dataset needs at least 2 classes");
  if (samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("image extents must be >= 1");
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("val_fraction must be in [0, 1)");
  if (!(noise >= 0)) throw ConfigError("noise must be >= 0");
}

namespace {

double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double gauss(std::mt19937_64& rng) {
  // Box-Muller on the raw stream, so the data do not depend on the
  // standard library's distribution implementations.
  const double u1 = 1.0 - unit(rng);
  const double u2 = unit(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2 * std::numbers::pi * u2);
}

struct ClassPattern {
  std::vector<double> color;
  double theta = 0;
  double freq = 0;
};

}  // namespace

template <class T>
SplitDataset<T> gen_blobs(const BlobDatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t L = spec.num_classes;
  std::vector<ClassPattern> classes(L);
  for (std::size_t c = 0; c < L; ++c) {
    auto& p = classes[c];
    for (std::size_t ch = 0; ch < spec.channels; ++ch) p.color.push_back(0.35 + 0.3 * unit(rng));
    // Orientations spread evenly with jitter; frequencies between 2 and 5 cycles.
    p.theta = std::numbers::pi * (static_cast<double>(c) + 0.3 * unit(rng)) / static_cast<double>(L);
    p.freq = 2.0 + 3.0 * unit(rng);
  }
  const std::size_t n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * spec.samples_per_class));
  const std::size_t n_train = spec.samples_per_class - n_val;
  const Shape4 one{1, spec.channels, spec.height, spec.width};
  SplitDataset<T> out;
  out.train.num_classes = out.val.num_classes = L;
  out.train.images = Tensor4<T>(Shape4{std::max<std::size_t>(n_train * L, 1), one.c, one.h, one.w});
  out.val.images = Tensor4<T>(Shape4{std::max<std::size_t>(n_val * L, 1), one.c, one.h, one.w});
  std::size_t ti = 0;
  std::size_t vi = 0;
  const double amp = 0.18;
  // Interleave classes so any prefix is nearly balanced.
  for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
    for (std::size_t c = 0; c < L; ++c) {
      const auto& p = classes[c];
      const bool is_val = s >= n_train;
      Tensor4<T>& dst = is_val ? out.val.images : out.train.images;
      const std::size_t row = is_val ? vi++ : ti++;
      (is_val ? out.val.labels : out.train.labels).push_back(static_cast<int>(c));
      const double phase = 2 * std::numbers::pi * unit(rng);
      const double sign = (rng() & 1) ? 1.0 : -1.0;
      std::vector<double> jitter(spec.channels);
      for (auto& j : jitter) j = 0.06 * gauss(rng);
      const double kx = 2 * std::numbers::pi * p.freq * std::cos(p.theta) / static_cast<double>(spec.width);
      const double ky = 2 * std::numbers::pi * p.freq * std::sin(p.theta) / static_cast<double>(spec.height);
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        for (std::size_t h = 0; h < spec.height; ++h) {
          for (std::size_t w = 0; w < spec.width; ++w) {
            const double g = std::sin(kx * static_cast<double>(w) + ky * static_cast<double>(h) + phase);
            const double v = p.color[ch] + jitter[ch] + sign * amp * g + spec.noise * gauss(rng);
            dst(row, ch, h, w) = static_cast<T>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
    }
  }
  return out;
}

template <class T>
Tensor4<T> gather(const Tensor4<T>& images, const std::size_t* rows, std::size_t count) {
  const Shape4 s = images.shape();
  Tensor4<T> out(Shape4{count, s.c, s.h, s.w});
  const std::size_t stride = s.c * s.plane();
  for (std::size_t i = 0; i < count; ++i) {
    if (rows[i] >= s.n) throw DimensionError("gather: row " + std::to_string(rows[i]) + " of " + std::to_string(s.n));
    std::copy_n(images.data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  return out;
}

template <class T>
void augment_batch(Tensor4<T>& batch, std::size_t pad, bool hflip, std::mt19937_64& rng) {
  const Shape4 s = batch.shape();
  std::vector<T> tmp(s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::size_t oy = static_cast<std::size_t>(rng() % (2 * pad + 1));
    const std::size_t ox = static_cast<std::size_t>(rng() % (2 * pad + 1));
    const bool flip = hflip && (rng() & 1);
    for (std::size_t c = 0; c < s.c; ++c) {
      T* plane = batch.plane(n, c);
      for (std::size_t h = 0; h < s.h; ++h) {
        for (std::size_t w = 0; w < s.w; ++w) {
          const long sh = static_cast<long>(h + oy) - static_cast<long>(pad);
          const std::size_t wf = flip ? s.w - 1 - w : w;
          const long sw = static_cast<long>(wf + ox) - static_cast<long>(pad);
          const bool inside = sh >= 0 && sw >= 0 && sh < static_cast<long>(s.h) && sw < static_cast<long>(s.w);
          tmp[h * s.w + w] = inside ? plane[static_cast<std::size_t>(sh) * s.w + static_cast<std::size_t>(sw)] : T(0);
        }
      }
      std::copy(tmp.begin(), tmp.end(), plane);
    }
  }
}

// ---------------------------------------------------------------------------

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw FormatError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
  }
}

namespace {

std::string hex_bytes(const std::string& b, std::size_t n) {
  std::string out;
  char buf[4];
  for (std::size_t i = 0; i < std::min(n, b.size()); ++i) {
    std::snprintf(buf, sizeof buf, "%02x", static_cast<unsigned char>(b[i]));
    if (!out.empty()) out += ' ';
    out += buf;
  }
  return out.empty() ? "<empty>" : out;
}

std::uint32_t be32(const std::string& b, std::size_t off) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b[off + i]);
  return v;
}

void put_be32(std::string& b, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Validates the header and returns the extents.
std::vector<std::size_t> parse_idx_header(const std::string& b, std::size_t rank, const std::string& path) {
  const unsigned char want = static_cast<unsigned char>(rank);
  if (b.size() < 4 || b[0] != 0 || b[1] != 0 || static_cast<unsigned char>(b[2]) != 0x08 ||
      static_cast<unsigned char>(b[3]) != want) {
    char expect[32];
    std::snprintf(expect, sizeof expect, "00 00 08 %02x", want);
    throw FormatError("'" + path + "': bad IDX magic, observed bytes " + hex_bytes(b, 4) + ", expected " + expect);
  }
  if (b.size() < 4 + 4 * rank) throw FormatError("'" + path + "': truncated IDX header");
  std::vector<std::size_t> dims;
  std::size_t payload = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims.push_back(be32(b, 4 + 4 * i));
    payload *= dims.back();
  }
  const std::size_t have = b.size() - 4 - 4 * rank;
  if (have < payload) {
    throw FormatError("'" + path + "': IDX payload length " + std::to_string(have) + " bytes, header requires " +
                      std::to_string(payload));
  }
  return dims;
}

}  // namespace

template <class T>
Tensor4<T> read_idx_images(const std::string& path, std::size_t channels) {
  if (channels < 1) throw ConfigError("channels must be >= 1");
  const std::string b = read_file(path);
  const auto dims = parse_idx_header(b, 3, path);
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw FormatError("'" + path + "': zero IDX extent");
  Tensor4<T> out(Shape4{dims[0], channels, dims[1], dims[2]});
  const std::size_t plane = dims[1] * dims[2];
  const auto* px = reinterpret_cast<const unsigned char*>(b.data() + 16);
  for (std::size_t n = 0; n < dims[0]; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>(px[n * plane + i]) / T(255);
    }
  }
  return out;
}

std::vector<int> read_idx_labels(const std::string& path) {
  const std::string b = read_file(path);
  const auto dims = parse_idx_header(b, 1, path);
  std::vector<int> out(dims[0]);
  for (std::size_t i = 0; i < dims[0]; ++i) out[i] = static_cast<unsigned char>(b[8 + i]);
  return out;
}

template <class T>
Dataset<T> read_idx(const std::string& image_path, const std::string& label_path, std::size_t channels,
                    std::size_t num_classes) {
  Dataset<T> d;
  d.images = read_idx_images<T>(image_path, channels);
  d.labels = read_idx_labels(label_path);
  if (d.labels.size() != d.images.shape().n) {
    throw FormatError("IDX label count " + std::to_string(d.labels.size()) + " differs from image count " +
                      std::to_string(d.images.shape().n));
  }
  const int max_label = d.labels.empty() ? -1 : *std::max_element(d.labels.begin(), d.labels.end());
  d.num_classes = num_classes > 0 ? num_classes : static_cast<std::size_t>(max_label + 1);
  if (max_label >= static_cast<int>(d.num_classes)) {
    throw FormatError("IDX label " + std::to_string(max_label) + " outside " + std::to_string(d.num_classes) +
                      " classes");
  }
  return d;
}

template <class T>
void write_idx_images(const std::string& path, const Tensor4<T>& images) {
  const Shape4 s = images.shape();
  std::string b{'\0', '\0', '\x08', '\x03'};
  put_be32(b, static_cast<std::uint32_t>(s.n));
  put_be32(b, static_cast<std::uint32_t>(s.h));
  put_be32(b, static_cast<std::uint32_t>(s.w));
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* p = images.plane(n, 0);
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const double v = std::clamp(static_cast<double>(p[i]), 0.0, 1.0);
      b.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  write_file_atomic(path, b);
}

void write_idx_labels(const std::string& path, const std::vector<int>& labels) {
  std::string b{'\0', '\0', '\x08', '\x01'};
  put_be32(b, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) {
    if (l < 0 || l > 255) throw ConfigError("IDX labels must fit in one byte");
    b.push_back(static_cast<char>(static_cast<unsigned char>(l)));
  }
  write_file_atomic(path, b);
}

#define ATTNORM_INSTANTIATE(T)                                                                           \
  template SplitDataset<T> gen_blobs(const BlobDatasetSpec&);                                            \
  template Tensor4<T> gather(const Tensor4<T>&, const std::size_t*, std::size_t);                        \
  template void augment_batch(Tensor4<T>&, std::size_t, bool, std::mt19937_64&);                         \
  template Dataset<T> read_idx(const std::string&, const std::string&, std::size_t, std::size_t);       \
  template Tensor4<T> read_idx_images(const std::string&, std::size_t);                                 \
  template void write_idx_images(const std::string&, const Tensor4<T>&);

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm
