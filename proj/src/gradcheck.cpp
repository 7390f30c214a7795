#include "attnorm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "attnorm/attentive_norm.hpp"
#include "attnorm/init.hpp"
#include "attnorm/layers.hpp"
#include "attnorm/network.hpp"

namespace attnorm {

std::string FdReport::str() const {
  std::ostringstream os;
  os << label << ": max_rel=" << max_rel << " (tol " << tol << ", " << checked << " coords)";
  if (checked > 0) {
    os << " worst " << worst.tensor << "[" << worst.index << "] analytic=" << worst.analytic
       << " numeric=" << worst.numeric;
  }
  return os.str();
}

double fd_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return denom == 0 ? 0.0 : std::abs(analytic - numeric) / denom;
}

namespace {

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t max_coords, init::Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (max_coords == 0 || n <= max_coords) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double central_difference(double& v, double h_rel, const std::function<double()>& loss) {
  const double saved = v;
  const double h = h_rel * std::max(std::abs(saved), 1.0);
  v = saved + h;
  const double fp = loss();
  v = saved - h;
  const double fm = loss();
  v = saved;
  return (fp - fm) / (2 * h);
}

struct Target {
  std::string name;
  double* values;
  std::size_t size;
  std::vector<double> analytic;
};

FdReport compare(const std::string& label, std::vector<Target>& targets, const std::function<double()>& loss,
                 const FdOptions& opt) {
  FdReport rep;
  rep.label = label;
  init::Rng rng(opt.seed ^ 0x5bd1e995ULL);
  double scale = 0;
  for (const auto& t : targets) {
    for (double a : t.analytic) scale = std::max(scale, std::abs(a));
  }
  const double floor = std::max(opt.floor_frac * scale, 1e-12);
  for (auto& t : targets) {
    for (std::size_t i : sample_indices(t.size, opt.max_coords, rng)) {
      const double num = central_difference(t.values[i], opt.h, loss);
      const double rel = fd_relative_error(t.analytic[i], num, floor);
      ++rep.checked;
      if (rel >= rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = {t.name, i, t.analytic[i], num, rel};
      }
    }
  }
  return rep;
}

}  // namespace

FdReport fd_check_module(Module<double>& m, const Tensor4<double>& x0, const std::string& label,
                         const FdOptions& opt) {
  init::Rng rng(opt.seed);
  Tensor4<double> x = x0;
  const Tensor4<double> y = m.forward(x);
  Tensor4<double> w(y.shape());
  init::normal<double>(w.vec(), 0.0, 1.0, rng);

  m.zero_grad();
  const Tensor4<double> dx = m.backward(w);

  std::vector<Target> targets;
  targets.push_back({"input", x.data(), x.size(), dx.vec()});
  for (auto& np : m.named_params()) {
    if (np.param->is_buffer() || !np.param->trainable) continue;
    targets.push_back({np.name, np.param->value.data(), np.param->numel(), np.param->grad});
  }
  auto loss = [&]() {
    const Tensor4<double> yy = m.forward(x);
    long double acc = 0;
    for (std::size_t i = 0; i < yy.size(); ++i) acc += static_cast<long double>(w[i]) * yy[i];
    return static_cast<double>(acc);
  };
  return compare(label, targets, loss, opt);
}

FdReport fd_check_function(const std::string& label, const std::function<double(const std::vector<double>&)>& f,
                           const std::vector<double>& x0, const std::vector<double>& grad, const FdOptions& opt) {
  if (x0.size() != grad.size()) throw DimensionError("fd_check_function: gradient length mismatch");
  std::vector<double> x = x0;
  std::vector<Target> targets{{"x", x.data(), x.size(), grad}};
  return compare(label, targets, [&] { return f(x); }, opt);
}

namespace {

Tensor4<double> random_input(const Shape4& s, init::Rng& rng, double mean = 0.0, double std = 1.0) {
  Tensor4<double> x(s);
  init::normal<double>(x.vec(), mean, std, rng);
  return x;
}

FdReport run(Module<double>& m, const Tensor4<double>& x, const std::string& label, std::uint64_t seed,
             double tol = 1e-4) {
  FdOptions opt;
  opt.seed = seed;
  FdReport r = fd_check_module(m, x, label, opt);
  r.tol = tol;
  return r;
}

}  // namespace

std::vector<FdReport> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<FdReport> out;
  init::Rng rng(seed);

  {
    Conv2d<double> c(3, 4, 3, 1, 1, rng());
    out.push_back(run(c, random_input({2, 3, 6, 5}, rng), "conv3x3/s1", rng()));
    Conv2d<double> c2(4, 5, 3, 2, 1, rng());
    out.push_back(run(c2, random_input({2, 4, 7, 7}, rng), "conv3x3/s2", rng()));
    Conv2d<double> c3(4, 6, 1, 2, 0, rng());
    out.push_back(run(c3, random_input({2, 4, 6, 6}, rng), "conv1x1/s2", rng()));
  }
  {
    Linear<double> fc(12, 5, true, rng());
    out.push_back(run(fc, random_input({3, 12, 1, 1}, rng), "fc", rng()));
    MaxPool2d<double> mp(3, 2, 1);
    out.push_back(run(mp, random_input({2, 3, 7, 7}, rng), "maxpool3x3/s2", rng()));
    GlobalAvgPool<double> gap;
    out.push_back(run(gap, random_input({2, 3, 4, 5}, rng), "avgpool", rng()));
    ReLU<double> relu;
    out.push_back(run(relu, random_input({2, 3, 4, 4}, rng), "relu", rng()));
  }
  {
    BatchNorm2d<double> bn(5);
    init::normal<double>(bn.named_params()[0].param->value, 1.0, 0.3, rng);
    init::normal<double>(bn.named_params()[1].param->value, 0.0, 0.3, rng);
    const Tensor4<double> x = random_input({4, 5, 4, 4}, rng, 0.5, 2.0);
    out.push_back(run(bn, x, "bn/train", rng()));
    bn.set_mode(Mode::kEval);
    out.push_back(run(bn, x, "bn/eval", rng()));
    GroupNorm<double> gn(8, 4);
    init::normal<double>(gn.named_params()[0].param->value, 1.0, 0.3, rng);
    out.push_back(run(gn, random_input({3, 8, 4, 4}, rng, 0.5, 2.0), "gn", rng()));
    SqueezeExcite<double> se(8, 3, rng());
    out.push_back(run(se, random_input({3, 8, 4, 4}, rng), "se", rng()));
  }
  for (const auto& backbone : {BlockScheme::batch(), BlockScheme::group(4)}) {
    for (auto choice : {AttentionChoice::kChoice1, AttentionChoice::kChoice2}) {
      for (auto act : {Activation::kReLU, Activation::kSigmoid, Activation::kSoftmax, Activation::kHSigmoid}) {
        ANConfig cfg;
        cfg.k = 3;
        cfg.backbone = backbone;
        cfg.attention.choice = choice;
        cfg.attention.activation = act;
        AttentiveNorm<double> an(8, cfg, rng());
        const std::string label = "an/" + std::string(backbone.kind == BlockScheme::Kind::kBatch ? "bn" : "gn") +
                                  "/" + to_string(choice) + "/" + to_string(act);
        out.push_back(run(an, random_input({4, 8, 4, 4}, rng, 0.5, 1.0), label, rng()));
      }
    }
  }
  for (auto kind : {Summarizer::Kind::kMean, Summarizer::Kind::kMeanStd}) {
    ANConfig cfg;
    cfg.k = 3;
    cfg.attention.summarizer.kind = kind;
    AttentiveNorm<double> an(8, cfg, rng());
    out.push_back(run(an, random_input({4, 8, 4, 4}, rng, 0.5, 1.0), "an/bn/summary-" + to_string(kind), rng()));
  }
  for (const NormKind& nk : {NormKind::an(Placement::kBN2), NormKind::se(Placement::kAll, 4)}) {
    NetSpec spec;
    spec.block = BlockKind::kBasic;
    spec.stem_width = 8;
    spec.stages = {{8, 2, 1}};
    spec.k_per_stage = {3};
    spec.num_classes = 3;
    spec.norm = nk;
    auto net = build_resnet<double>(spec, rng());
    dynamic_cast<Conv2d<double>&>(net->at(0)).set_needs_input_grad(true);
    out.push_back(run(*net, random_input({4, 3, 6, 6}, rng), "micronet/" + nk.str(), rng(), 1e-3));
  }
  return out;
}

}  // namespace attnorm
