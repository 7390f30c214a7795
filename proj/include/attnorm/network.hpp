#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "attnorm/attentive_norm.hpp"
#include "attnorm/layers.hpp"

namespace attnorm {

enum class BlockKind { kBasic, kBottleneck };
/// Which branch normalization(s) receive SE or AN.
enum class Placement { kBN2, kBN3, kAll };

std::string to_string(Placement p);
std::string to_string(BlockKind b);

struct NormKind {
  enum class Base { kBN, kGN };
  enum class Attach { kNone, kSE, kAN };

  Base base = Base::kBN;
  std::size_t groups = 0;  // GN groups, 0 = default rule
  Attach attach = Attach::kNone;
  Placement which = Placement::kBN2;
  std::size_t se_r = 16;
  AttentionConfig attention{};

  static NormKind vanilla_bn() { return {}; }
  static NormKind vanilla_gn(std::size_t groups = 0) {
    NormKind n;
    n.base = Base::kGN;
    n.groups = groups;
    return n;
  }
  static NormKind se(Placement p, std::size_t r = 16) {
    NormKind n;
    n.attach = Attach::kSE;
    n.which = p;
    n.se_r = r;
    return n;
  }
  static NormKind an(Placement p, AttentionConfig cfg = {}) {
    NormKind n;
    n.attach = Attach::kAN;
    n.which = p;
    n.attention = cfg;
    return n;
  }

  /// bn, gn, se-bn2, se-bn3, se-all, an-bn2, an-bn3, an-all.
  static NormKind parse(const std::string& s);
  std::string str() const;

  /// True when the branch normalization at 1-based `index` is modified.
  bool applies_to(std::size_t index, std::size_t norms_in_branch) const;
};

struct BlockSpec {
  BlockKind kind = BlockKind::kBasic;
  std::size_t in_channels = 0;
  std::size_t mid_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  NormKind norm{};
  std::size_t k = 10;  // AN mixture components
  double eps = kDefaultNormEps;
  double momentum = kDefaultMomentum;

  bool has_projection() const { return stride != 1 || in_channels != out_channels; }
  std::size_t norms_in_branch() const { return kind == BlockKind::kBasic ? 2 : 3; }
  void validate() const;
};

struct StageSpec {
  std::size_t width = 64;  // mid channels
  std::size_t depth = 1;
  std::size_t stride = 1;
};

struct NetSpec {
  enum class Stem { kConv3x3, kConv7x7Pool };

  BlockKind block = BlockKind::kBasic;
  Stem stem = Stem::kConv3x3;
  std::size_t in_channels = 3;
  std::size_t stem_width = 16;
  std::vector<StageSpec> stages;
  std::vector<std::size_t> k_per_stage;
  std::size_t num_classes = 4;
  bool zero_gamma = false;
  NormKind norm{};
  double eps = kDefaultNormEps;
  double momentum = kDefaultMomentum;

  void validate() const;

  /// 3x3 stem, widths (16,32,64), two basic blocks per stage, K = (10,20,20).
  static NetSpec toy(NormKind norm = {}, std::size_t num_classes = 4);
  /// ImageNet ResNet-34/50/101 with 7x7 stem, K = (10,10,20,20).
  static NetSpec resnet(int depth, NormKind norm = {}, std::size_t num_classes = 1000);
};

/// Builds one residual block. The block's parameter names are relative
/// (conv1.weight, bn2.mixture.gamma, shortcut.conv.weight, ...).
template <class T>
std::unique_ptr<ResidualBlock<T>> build_block(const BlockSpec& spec, std::uint64_t seed);

template <class T>
class Network final : public Sequential<T> {
 public:
  explicit Network(NetSpec spec) : spec_(std::move(spec)) {}

  const NetSpec& spec() const { return spec_; }

  /// forward followed by reshaping to N x num_classes.
  Mat<T> logits(const Tensor4<T>& x);
  /// Like logits() but names the first layer producing a non-finite value.
  Mat<T> logits_traced(const Tensor4<T>& x);
  /// Backward from an N x num_classes cotangent; returns the input cotangent.
  Tensor4<T> backward_logits(const Mat<T>& dlogits);

  std::vector<AttentiveNorm<T>*>& an_layers() { return an_layers_; }
  std::vector<NormModule<T>*>& norm_layers() { return norm_layers_; }

  void set_finetune_frozen();
  /// Declares every running statistic usable, e.g. after loading from disk.
  void mark_running_initialized();

  // Registration used by the builder.
  void register_an(AttentiveNorm<T>* a) { an_layers_.push_back(a); }
  void register_norm(NormModule<T>* n) { norm_layers_.push_back(n); }

 private:
  NetSpec spec_;
  std::vector<AttentiveNorm<T>*> an_layers_;
  std::vector<NormModule<T>*> norm_layers_;
};

template <class T>
std::unique_ptr<Network<T>> build_resnet(const NetSpec& spec, std::uint64_t seed);

/// Number of trainable and affine elements; running statistics are excluded.
template <class T>
std::size_t param_count(Module<T>& net);

/// Sum of running statistics, for mode-propagation checks.
template <class T>
double running_stat_checksum(Module<T>& net);

}  // namespace attnorm
