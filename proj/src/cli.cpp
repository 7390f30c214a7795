#include "attnorm/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "attnorm/checkpoint.hpp"
#include "attnorm/config.hpp"
#include "attnorm/gradcheck.hpp"
#include "attnorm/init.hpp"
#include "attnorm/kernels.hpp"
#include "attnorm/reference.hpp"

namespace attnorm {

namespace {

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::string millions(std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(n) / 1e6);
  return buf;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.validate();
}

void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, std::size_t show, std::ostream& out) {
  auto reports = run_gradcheck_suite(seed);
  bool ok = true;
  double worst = 0;
  for (const auto& r : reports) {
    out << (r.passed() ? "ok   " : "FAIL ") << r.str() << "\n";
    ok = ok && r.passed();
    if (r.tol <= 1e-4) worst = std::max(worst, r.max_rel);
  }
  std::sort(reports.begin(), reports.end(), [](const auto& a, const auto& b) { return a.max_rel > b.max_rel; });
  out << "worst offenders:\n";
  for (std::size_t i = 0; i < std::min(show, reports.size()); ++i) out << "  " << reports[i].str() << "\n";
  out << "max relative error (layer checks): " << worst << "\n";
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << "\n";
  return ok ? kExitOk : kExitNumeric;
}

NormKind paramcount_norm(const std::string& norm, std::size_t r, const std::string& choice,
                         const std::string& summarizer) {
  NormKind nk = NormKind::parse(norm);
  nk.se_r = r;
  nk.attention.choice = parse_choice(choice);
  nk.attention.summarizer.kind = parse_summarizer(summarizer);
  return nk;
}

int cmd_paramcount(const std::string& arch, const NormKind& nk, const std::vector<std::size_t>& k,
                   std::size_t classes, std::ostream& out) {
  if (arch.rfind("resnet", 0) != 0) throw ConfigError("--arch must be resnet34, resnet50 or resnet101");
  int depth = 0;
  try {
    depth = std::stoi(arch.substr(6));
  } catch (const std::exception&) {
    throw ConfigError("--arch must be resnet34, resnet50 or resnet101");
  }
  NetSpec spec = NetSpec::resnet(depth, nk, classes);
  if (!k.empty()) spec.k_per_stage = k;
  auto net = build_resnet<float>(spec, 0);
  const std::size_t n = param_count(*net);
  out << arch << " " << nk.str() << " params: " << n << " (" << millions(n) << ")\n";
  return kExitOk;
}

template <class T>
int run_train(const RunConfig& cfg, bool quiet, std::ostream& out) {
  set_threads(cfg.threads);
  const SplitDataset<T> data = load_dataset<T>(cfg);
  auto net = build_resnet<T>(cfg.net_spec(), cfg.train.seed);
  std::mt19937_64 rng(cfg.train.seed ^ 0xa0761d6478bd642fULL);
  std::vector<EpochMetrics> rows;
  if (!quiet) {
    out << "training " << cfg.arch << "/" << cfg.norm << " (" << param_count(*net) << " params) on "
        << data.train.size() << " images, validating on " << data.val.size() << "\n";
  }
  train_loop<T>(cfg.train, *net, data, rng, [&](const EpochMetrics& m) {
    rows.push_back(m);
    write_metrics_csv(cfg.metrics_path, rows);
    if (!quiet) {
      out << "epoch " << m.epoch << " lr " << m.lr << " train_loss " << m.train_loss << " train_top1 "
          << m.train_top1 << " val_loss " << m.val_loss << " val_top1 " << m.val_top1 << std::endl;
    }
  });
  save_checkpoint(cfg.checkpoint_path, *net, cfg, rng_state(rng));
  if (!quiet) out << "wrote " << cfg.metrics_path << " and " << cfg.checkpoint_path << "\n";
  return kExitOk;
}

template <class T>
int run_eval(const Checkpoint& ck, const std::string& data_arg, std::ostream& out) {
  const RunConfig cfg = parse_config(ck.config_text);
  auto net = load_network<T>(ck);
  Dataset<T> d;
  if (data_arg == "val" || data_arg == "train") {
    if (cfg.data_source != "blobs" && data_arg == "val" && cfg.val_images.empty()) {
      throw ConfigError("checkpoint config has no validation files");
    }
    SplitDataset<T> s = load_dataset<T>(cfg);
    d = data_arg == "val" ? std::move(s.val) : std::move(s.train);
  } else {
    const auto comma = data_arg.find(',');
    if (comma == std::string::npos) throw ConfigError("--data must be val, train or IMAGES.idx,LABELS.idx");
    d = read_idx<T>(data_arg.substr(0, comma), data_arg.substr(comma + 1), cfg.blobs.channels, cfg.num_classes);
  }
  const EvalResult r = evaluate(*net, d, cfg.train.eval_batch_size);
  out << "images " << r.count << " loss " << r.loss << " top1 " << r.top1 << "\n";
  return kExitOk;
}

struct Variant {
  std::string name;
  RunConfig cfg;
};

std::vector<std::size_t> scale_k(const std::vector<std::size_t>& k, double f) {
  std::vector<std::size_t> out;
  for (auto v : k) out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(v * f))));
  return out;
}

std::string k_str(const std::vector<std::size_t>& k) {
  std::string s = "K=(";
  for (std::size_t i = 0; i < k.size(); ++i) s += (i ? "," : "") + std::to_string(k[i]);
  return s + ")";
}

std::vector<Variant> ablation_variants(const RunConfig& base, bool full) {
  RunConfig b = base;
  b.norm = "an-bn2";
  b.attention.summarizer.kind = Summarizer::Kind::kRSD;
  b.attention.choice = AttentionChoice::kChoice2;
  b.attention.activation = Activation::kHSigmoid;
  const std::vector<std::vector<std::size_t>> ks = {scale_k(base.k_per_stage, 0.5), base.k_per_stage,
                                                    scale_k(base.k_per_stage, 2.0)};
  auto name_of = [](const RunConfig& c) {
    return to_string(c.attention.summarizer.kind) + " + " + to_string(c.attention.choice) + " + " +
           to_string(c.attention.activation) + " + " + k_str(c.k_per_stage) + (c.norm == "an-all" ? " (all BNs)" : "");
  };
  std::vector<Variant> out;
  auto push = [&](RunConfig c) { out.push_back({name_of(c), std::move(c)}); };
  if (full) {
    for (auto s : {Summarizer::Kind::kMean, Summarizer::Kind::kMeanStd, Summarizer::Kind::kRSD})
      for (auto ch : {AttentionChoice::kChoice1, AttentionChoice::kChoice2})
        for (auto a : {Activation::kReLU, Activation::kSigmoid, Activation::kSoftmax, Activation::kHSigmoid})
          for (const auto& k : ks) {
            RunConfig c = b;
            c.attention.summarizer.kind = s;
            c.attention.choice = ch;
            c.attention.activation = a;
            c.k_per_stage = k;
            push(c);
          }
    return out;
  }
  // One change at a time away from the default combination.
  RunConfig c = b;
  c.attention.summarizer.kind = Summarizer::Kind::kMean;
  push(c);
  c = b;
  c.attention.summarizer.kind = Summarizer::Kind::kMeanStd;
  push(c);
  c = b;
  c.attention.choice = AttentionChoice::kChoice1;
  push(c);
  for (auto a : {Activation::kSoftmax, Activation::kReLU, Activation::kSigmoid}) {
    c = b;
    c.attention.activation = a;
    push(c);
  }
  c = b;
  c.k_per_stage = ks[0];
  push(c);
  c = b;
  c.k_per_stage = ks[2];
  push(c);
  push(b);
  c = b;
  c.norm = "an-all";
  push(c);
  return out;
}

int cmd_ablate(RunConfig base, bool full, std::ostream& out) {
  set_threads(base.threads);
  const auto variants = ablation_variants(base, full);
  const SplitDataset<float> data = load_dataset<float>(base);
  struct Row {
    std::string name;
    std::size_t params;
    double val_top1;
    double val_loss;
  };
  std::vector<Row> rows;
  for (const auto& v : variants) {
    auto net = build_resnet<float>(v.cfg.net_spec(), v.cfg.train.seed);
    std::mt19937_64 rng(v.cfg.train.seed ^ 0xa0761d6478bd642fULL);
    const auto hist = train_loop<float>(v.cfg.train, *net, data, rng);
    rows.push_back({v.name, param_count(*net), hist.back().val_top1, hist.back().val_loss});
    out << "  " << v.name << ": val_top1 " << hist.back().val_top1 << std::endl;
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.val_top1 > b.val_top1; });
  out << "rank | variant | params | val_top1 | val_loss\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << i + 1 << " | " << rows[i].name << " | " << rows[i].params << " | " << std::fixed << std::setprecision(4)
        << rows[i].val_top1 << " | " << rows[i].val_loss << std::defaultfloat << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

template <class F>
double time_ms(std::size_t reps, F&& f) {
  f();
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < reps; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / static_cast<double>(reps);
}

int cmd_bench(const std::string& norm, std::size_t batch, std::size_t reps, std::ostream& out) {
  auto net = build_resnet<float>(NetSpec::toy(NormKind::parse(norm)), 1);
  Tensor4<float> x(Shape4{batch, 3, 32, 32});
  std::mt19937_64 rng(3);
  init::normal<float>(x.vec(), 0.0, 1.0, rng);

  // Flatten stages into blocks so each row is a block or a stem/head layer.
  std::vector<std::pair<std::string, Module<float>*>> units;
  for (std::size_t i = 0; i < net->size(); ++i) {
    if (auto* st = dynamic_cast<Sequential<float>*>(&net->at(i))) {
      for (std::size_t j = 0; j < st->size(); ++j) units.push_back({net->name_at(i) + "." + st->name_at(j), &st->at(j)});
    } else {
      units.push_back({net->name_at(i), &net->at(i)});
    }
  }
  std::vector<Tensor4<float>> inputs{x};
  for (auto& [name, m] : units) inputs.push_back(m->forward(inputs.back()));
  out << "toy/" << norm << " batch " << batch << " threads " << omp_get_max_threads() << "\n";
  out << std::left << std::setw(16) << "layer" << std::right << std::setw(14) << "forward ms" << std::setw(14)
      << "backward ms" << "\n";
  double tf = 0;
  double tb = 0;
  for (std::size_t u = 0; u < units.size(); ++u) {
    Module<float>* m = units[u].second;
    const Tensor4<float>& in = inputs[u];
    Tensor4<float> dy(inputs[u + 1].shape(), 1.0f);
    const double f = time_ms(reps, [&] { m->forward(in); });
    const double b = time_ms(reps, [&] {
      m->forward(in);
      m->backward(dy);
    }) - f;
    tf += f;
    tb += b;
    out << std::left << std::setw(16) << units[u].first << std::right << std::fixed << std::setprecision(3)
        << std::setw(14) << f << std::setw(14) << b << std::defaultfloat << "\n";
  }
  out << std::left << std::setw(16) << "total" << std::right << std::fixed << std::setprecision(3) << std::setw(14)
      << tf << std::setw(14) << tb << std::defaultfloat << "\n";

  const kernels::ConvGeometry g{32, 32, 3, 1, 1};
  Tensor4<float> cx(Shape4{batch, 32, 16, 16});
  init::normal<float>(cx.vec(), 0.0, 1.0, rng);
  std::vector<float> w(g.weight_numel());
  init::normal<float>(w, 0.0, 0.1, rng);
  const double fast = time_ms(reps, [&] { kernels::conv2d_forward<float>(cx, w, g); });
  const double slow = time_ms(1, [&] { ref::conv2d_forward<float>(cx, w, g); });
  out << "conv3x3 32->32 @16x16: parallel " << fast << " ms, serial reference " << slow << " ms\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attentive normalization toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads (0 = default)")->check(CLI::NonNegativeNumber);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t gc_seed = 7;
  std::size_t gc_show = 5;
  gc->add_option("--seed", gc_seed, "suite seed");
  gc->add_option("--show", gc_show, "worst offenders to list");

  auto* pc = app.add_subcommand("paramcount", "parameter count of an ImageNet ResNet");
  std::string pc_arch = "resnet50";
  std::string pc_norm = "bn";
  std::vector<std::size_t> pc_k;
  std::size_t pc_r = 16;
  std::size_t pc_classes = 1000;
  std::string pc_choice = "2";
  std::string pc_summary = "rsd";
  pc->add_option("--arch", pc_arch, "resnet34|resnet50|resnet101")->required();
  pc->add_option("--norm", pc_norm, "bn|gn|se-bn2|se-bn3|se-all|an-bn2|an-bn3|an-all");
  pc->add_option("--k", pc_k, "AN components per stage, e.g. 10,10,20,20")->delimiter(',');
  pc->add_option("--r", pc_r, "SE reduction ratio");
  pc->add_option("--classes", pc_classes, "classifier outputs");
  pc->add_option("--choice", pc_choice, "attention choice 1|2");
  pc->add_option("--summarizer", pc_summary, "mean|meanstd|rsd");

  auto* tr = app.add_subcommand("train", "train a network from a config file");
  std::string tr_config;
  std::vector<std::string> tr_sets;
  bool tr_quiet = false;
  tr->add_option("--config", tr_config, "config file")->required();
  tr->add_option("--set", tr_sets, "override section.key=value");
  tr->add_flag("--quiet", tr_quiet, "only write files");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt;
  std::string ev_data = "val";
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "val | train | IMAGES.idx,LABELS.idx");

  auto* ab = app.add_subcommand("ablate", "attention-variant sweep on the toy dataset");
  std::string ab_config;
  std::vector<std::string> ab_sets;
  bool ab_full = false;
  ab->add_option("--config", ab_config, "base config file")->required();
  ab->add_option("--set", ab_sets, "override section.key=value");
  ab->add_flag("--full", ab_full, "full summarizer x choice x activation x K grid");

  auto* bn = app.add_subcommand("bench", "per-layer forward/backward timings of the toy net");
  std::string bn_norm = "an-bn2";
  std::size_t bn_batch = 64;
  std::size_t bn_reps = 5;
  bn->add_option("--norm", bn_norm, "norm kind");
  bn->add_option("--batch", bn_batch, "batch size")->check(CLI::PositiveNumber);
  bn->add_option("--reps", bn_reps, "repetitions")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    set_threads(threads);
    if (*gc) return cmd_gradcheck(gc_seed, gc_show, out);
    if (*pc) return cmd_paramcount(pc_arch, paramcount_norm(pc_norm, pc_r, pc_choice, pc_summary), pc_k, pc_classes, out);
    if (*tr) {
      RunConfig cfg = load_config(tr_config);
      apply_overrides(cfg, tr_sets);
      if (threads > 0) cfg.threads = threads;
      return cfg.dtype == DType::kF32 ? run_train<float>(cfg, tr_quiet, out) : run_train<double>(cfg, tr_quiet, out);
    }
    if (*ev) {
      const Checkpoint ck = read_checkpoint(ev_ckpt);
      return ck.compute_dtype == DType::kF32 ? run_eval<float>(ck, ev_data, out) : run_eval<double>(ck, ev_data, out);
    }
    if (*ab) {
      RunConfig cfg = load_config(ab_config);
      apply_overrides(cfg, ab_sets);
      if (threads > 0) cfg.threads = threads;
      return cmd_ablate(cfg, ab_full, out);
    }
    if (*bn) return cmd_bench(bn_norm, bn_batch, bn_reps, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace attnorm
