#include "attnorm/network.hpp"

#include <cmath>

#include "attnorm/init.hpp"

namespace attnorm {

std::string to_string(Placement p) {
  switch (p) {
    case Placement::kBN2: return "bn2";
    case Placement::kBN3: return "bn3";
    case Placement::kAll: return "all";
  }
  return "?";
}

std::string to_string(BlockKind b) { return b == BlockKind::kBasic ? "basic" : "bottleneck"; }

NormKind NormKind::parse(const std::string& s) {
  if (s == "bn") return vanilla_bn();
  if (s == "gn") return vanilla_gn();
  const auto dash = s.find('-');
  if (dash != std::string::npos) {
    const std::string head = s.substr(0, dash);
    const std::string tail = s.substr(dash + 1);
    Placement p{};
    if (tail == "bn2") {
      p = Placement::kBN2;
    } else if (tail == "bn3") {
      p = Placement::kBN3;
    } else if (tail == "all") {
      p = Placement::kAll;
    } else {
      throw ConfigError("unknown norm placement '" + tail + "' in '" + s + "'");
    }
    if (head == "se") return se(p);
    if (head == "an") return an(p);
  }
  throw ConfigError("unknown norm kind '" + s + "' (bn|gn|se-bn2|se-bn3|se-all|an-bn2|an-bn3|an-all)");
}

std::string NormKind::str() const {
  switch (attach) {
    case Attach::kNone: return base == Base::kBN ? "bn" : "gn";
    case Attach::kSE: return "se-" + to_string(which);
    case Attach::kAN: return "an-" + to_string(which);
  }
  return "?";
}

bool NormKind::applies_to(std::size_t index, std::size_t norms_in_branch) const {
  if (attach == Attach::kNone) return false;
  switch (which) {
    case Placement::kBN2: return index == 2;
    case Placement::kBN3: return index == 3 && norms_in_branch >= 3;
    case Placement::kAll: return true;
  }
  return false;
}

void BlockSpec::validate() const {
  if (in_channels < 1 || mid_channels < 1 || out_channels < 1) throw ConfigError("block channels must be >= 1");
  if (stride < 1) throw ConfigError("block stride must be >= 1");
  if (kind == BlockKind::kBasic && mid_channels != out_channels) {
    throw ConfigError("basic block needs mid == out channels");
  }
  if (kind == BlockKind::kBottleneck && out_channels != 4 * mid_channels) {
    throw ConfigError("bottleneck needs out == 4 * mid channels");
  }
  if (norm.attach != NormKind::Attach::kNone && norm.which == Placement::kBN3 && kind == BlockKind::kBasic) {
    throw ConfigError("placement bn3 is invalid for a basic block (it has bn1, bn2)");
  }
  if (norm.attach == NormKind::Attach::kAN && k < 1) throw ConfigError("AN needs K >= 1");
  if (norm.attach == NormKind::Attach::kSE && norm.se_r < 1) throw ConfigError("SE reduction must be >= 1");
}

void NetSpec::validate() const {
  if (stages.empty()) throw ConfigError("network needs at least one stage");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (in_channels < 1 || stem_width < 1) throw ConfigError("stem channels must be >= 1");
  for (const auto& st : stages) {
    if (st.width < 1 || st.depth < 1 || st.stride < 1) throw ConfigError("stage width/depth/stride must be >= 1");
  }
  if (norm.attach == NormKind::Attach::kAN && k_per_stage.size() != stages.size()) {
    throw ConfigError("k_per_stage has " + std::to_string(k_per_stage.size()) + " entries for " +
                      std::to_string(stages.size()) + " stages");
  }
}

NetSpec NetSpec::toy(NormKind norm, std::size_t num_classes) {
  NetSpec s;
  s.block = BlockKind::kBasic;
  s.stem = Stem::kConv3x3;
  s.stem_width = 16;
  s.stages = {{16, 2, 1}, {32, 2, 2}, {64, 2, 2}};
  s.k_per_stage = {10, 20, 20};
  s.num_classes = num_classes;
  s.norm = norm;
  return s;
}

NetSpec NetSpec::resnet(int depth, NormKind norm, std::size_t num_classes) {
  NetSpec s;
  s.stem = Stem::kConv7x7Pool;
  s.stem_width = 64;
  std::vector<std::size_t> depths;
  switch (depth) {
    case 34:
      s.block = BlockKind::kBasic;
      depths = {3, 4, 6, 3};
      break;
    case 50:
      s.block = BlockKind::kBottleneck;
      depths = {3, 4, 6, 3};
      break;
    case 101:
      s.block = BlockKind::kBottleneck;
      depths = {3, 4, 23, 3};
      break;
    default: throw ConfigError("unsupported ResNet depth " + std::to_string(depth) + " (34, 50, 101)");
  }
  const std::size_t widths[] = {64, 128, 256, 512};
  for (std::size_t i = 0; i < 4; ++i) s.stages.push_back({widths[i], depths[i], i == 0 ? 1u : 2u});
  s.k_per_stage = {10, 10, 20, 20};
  s.num_classes = num_classes;
  s.norm = norm;
  return s;
}

namespace {

template <class T>
struct Built {
  std::vector<AttentiveNorm<T>*> an;
  std::vector<NormModule<T>*> norms;
};

template <class T>
std::unique_ptr<NormModule<T>> base_norm(const NormKind& nk, std::size_t c, double eps, double momentum) {
  if (nk.base == NormKind::Base::kGN) {
    const std::size_t g = nk.groups == 0 ? default_gn_groups(c) : nk.groups;
    return std::make_unique<GroupNorm<T>>(c, g, static_cast<T>(eps));
  }
  return std::make_unique<BatchNorm2d<T>>(c, static_cast<T>(eps), static_cast<T>(momentum));
}

template <class T>
void add_norm(Sequential<T>& seq, const BlockSpec& spec, std::size_t index, std::size_t c, init::Rng& rng,
              Built<T>& reg) {
  const std::string name = "bn" + std::to_string(index);
  const bool modified = spec.norm.applies_to(index, spec.norms_in_branch());
  if (modified && spec.norm.attach == NormKind::Attach::kAN) {
    ANConfig cfg;
    cfg.k = spec.k;
    cfg.attention = spec.norm.attention;
    cfg.backbone = spec.norm.base == NormKind::Base::kGN ? BlockScheme::group(spec.norm.groups) : BlockScheme::batch();
    cfg.eps = spec.eps;
    cfg.momentum = spec.momentum;
    auto& a = seq.emplace(name, std::make_unique<AttentiveNorm<T>>(c, cfg, rng()));
    reg.an.push_back(&a);
    reg.norms.push_back(&a);
    return;
  }
  auto& n = seq.emplace(name, base_norm<T>(spec.norm, c, spec.eps, spec.momentum));
  reg.norms.push_back(&n);
  if (modified && spec.norm.attach == NormKind::Attach::kSE) {
    const std::size_t hidden = se_hidden_width(spec.out_channels, spec.norm.se_r);
    seq.emplace("se" + std::to_string(index), std::make_unique<SqueezeExcite<T>>(c, hidden, rng()));
  }
}

template <class T>
std::unique_ptr<ResidualBlock<T>> build_block_impl(const BlockSpec& spec, std::uint64_t seed, Built<T>& reg) {
  spec.validate();
  init::Rng rng(seed);
  auto blk = std::make_unique<ResidualBlock<T>>();
  auto& br = blk->branch();
  const std::size_t in = spec.in_channels;
  const std::size_t mid = spec.mid_channels;
  const std::size_t out = spec.out_channels;
  if (spec.kind == BlockKind::kBasic) {
    br.emplace("conv1", std::make_unique<Conv2d<T>>(in, mid, 3, spec.stride, 1, rng()));
    add_norm(br, spec, 1, mid, rng, reg);
    br.emplace("relu1", std::make_unique<ReLU<T>>());
    br.emplace("conv2", std::make_unique<Conv2d<T>>(mid, out, 3, 1, 1, rng()));
    add_norm(br, spec, 2, out, rng, reg);
  } else {
    br.emplace("conv1", std::make_unique<Conv2d<T>>(in, mid, 1, 1, 0, rng()));
    add_norm(br, spec, 1, mid, rng, reg);
    br.emplace("relu1", std::make_unique<ReLU<T>>());
    br.emplace("conv2", std::make_unique<Conv2d<T>>(mid, mid, 3, spec.stride, 1, rng()));
    add_norm(br, spec, 2, mid, rng, reg);
    br.emplace("relu2", std::make_unique<ReLU<T>>());
    br.emplace("conv3", std::make_unique<Conv2d<T>>(mid, out, 1, 1, 0, rng()));
    add_norm(br, spec, 3, out, rng, reg);
  }
  if (spec.has_projection()) {
    auto& sc = blk->shortcut();
    sc.emplace("conv", std::make_unique<Conv2d<T>>(in, out, 1, spec.stride, 0, rng()));
    auto& n = sc.emplace("bn", base_norm<T>(spec.norm, out, spec.eps, spec.momentum));
    reg.norms.push_back(&n);
  }
  return blk;
}

}  // namespace

template <class T>
std::unique_ptr<ResidualBlock<T>> build_block(const BlockSpec& spec, std::uint64_t seed) {
  Built<T> reg;
  return build_block_impl<T>(spec, seed, reg);
}

template <class T>
std::unique_ptr<Network<T>> build_resnet(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  init::Rng rng(seed);
  auto net = std::make_unique<Network<T>>(spec);
  if (spec.stem == NetSpec::Stem::kConv7x7Pool) {
    auto& c = net->emplace("conv1", std::make_unique<Conv2d<T>>(spec.in_channels, spec.stem_width, 7, 2, 3, rng()));
    c.set_needs_input_grad(false);
  } else {
    auto& c = net->emplace("conv1", std::make_unique<Conv2d<T>>(spec.in_channels, spec.stem_width, 3, 1, 1, rng()));
    c.set_needs_input_grad(false);
  }
  net->register_norm(&net->emplace("bn1", base_norm<T>(spec.norm, spec.stem_width, spec.eps, spec.momentum)));
  net->emplace("relu", std::make_unique<ReLU<T>>());
  if (spec.stem == NetSpec::Stem::kConv7x7Pool) net->emplace("maxpool", std::make_unique<MaxPool2d<T>>(3, 2, 1));

  const std::size_t expansion = spec.block == BlockKind::kBottleneck ? 4 : 1;
  std::size_t in = spec.stem_width;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const StageSpec& st = spec.stages[s];
    auto& stage = net->emplace("layer" + std::to_string(s + 1), std::make_unique<Sequential<T>>());
    for (std::size_t b = 0; b < st.depth; ++b) {
      BlockSpec bs;
      bs.kind = spec.block;
      bs.in_channels = in;
      bs.mid_channels = st.width;
      bs.out_channels = st.width * expansion;
      bs.stride = b == 0 ? st.stride : 1;
      bs.norm = spec.norm;
      bs.k = s < spec.k_per_stage.size() ? spec.k_per_stage[s] : 10;
      bs.eps = spec.eps;
      bs.momentum = spec.momentum;
      Built<T> reg;
      auto blk = build_block_impl<T>(bs, rng(), reg);
      if (spec.zero_gamma) {
        auto& br = blk->branch();
        const std::string last = "bn" + std::to_string(bs.norms_in_branch());
        for (std::size_t i = 0; i < br.size(); ++i) {
          if (br.name_at(i) == last) dynamic_cast<NormModule<T>&>(br.at(i)).zero_scale();
        }
      }
      for (auto* a : reg.an) net->register_an(a);
      for (auto* n : reg.norms) net->register_norm(n);
      stage.add(std::to_string(b), std::move(blk));
      in = bs.out_channels;
    }
  }
  net->emplace("avgpool", std::make_unique<GlobalAvgPool<T>>());
  auto& fc = net->emplace("fc", std::make_unique<Linear<T>>(in, spec.num_classes, true, rng()));
  // Small classifier weights keep the initial loss close to ln(L).
  init::Rng fc_rng(rng());
  init::normal<T>(fc.weight().value, 0.0, 0.01, fc_rng);
  return net;
}

template <class T>
Mat<T> Network<T>::logits(const Tensor4<T>& x) {
  return matrix_from_tensor(this->forward(x));
}

template <class T>
Mat<T> Network<T>::logits_traced(const Tensor4<T>& x) {
  return matrix_from_tensor(this->forward_traced(x, ""));
}

template <class T>
Tensor4<T> Network<T>::backward_logits(const Mat<T>& dlogits) {
  return this->backward(tensor_from_matrix(dlogits));
}

template <class T>
void Network<T>::set_finetune_frozen() {
  for (auto* n : norm_layers_) {
    if (auto* a = dynamic_cast<AttentiveNorm<T>*>(n)) {
      a->set_finetune_frozen();
    } else if (auto* b = dynamic_cast<BatchNorm2d<T>*>(n)) {
      b->standardizer().set_frozen(true);
    }
  }
}

template <class T>
void Network<T>::mark_running_initialized() {
  for (auto* n : norm_layers_) {
    if (auto* a = dynamic_cast<AttentiveNorm<T>*>(n)) {
      a->standardizer().mark_initialized();
      if (auto* s = a->attention().bn_standardizer()) s->mark_initialized();
    } else if (auto* b = dynamic_cast<BatchNorm2d<T>*>(n)) {
      b->standardizer().mark_initialized();
    }
  }
}

template <class T>
std::size_t param_count(Module<T>& net) {
  std::size_t total = 0;
  for (const auto& np : net.named_params()) {
    if (!np.param->is_buffer()) total += np.param->numel();
  }
  return total;
}

template <class T>
double running_stat_checksum(Module<T>& net) {
  double acc = 0;
  for (const auto& np : net.named_params()) {
    if (!np.param->is_buffer()) continue;
    const auto& v = np.param->value;
    for (std::size_t i = 0; i < v.size(); ++i) acc += static_cast<double>(v[i]) * static_cast<double>(i % 97 + 1);
  }
  return acc;
}

#define ATTNORM_INSTANTIATE(T)                                                                     \
  template std::unique_ptr<ResidualBlock<T>> build_block<T>(const BlockSpec&, std::uint64_t);      \
  template std::unique_ptr<Network<T>> build_resnet<T>(const NetSpec&, std::uint64_t);             \
  template class Network<T>;                                                                       \
  template std::size_t param_count<T>(Module<T>&);                                                 \
  template double running_stat_checksum<T>(Module<T>&);

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm
