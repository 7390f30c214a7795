#include "attnorm/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

namespace attnorm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

struct Entry {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_ENTRY(K, F) \
  {K, [](RunConfig& c, const std::string& k, const std::string& v) { c.F = parse_size(k, v); }, \
   [](const RunConfig& c) { return std::to_string(c.F); }}
#define DOUBLE_ENTRY(K, F) \
  {K, [](RunConfig& c, const std::string& k, const std::string& v) { c.F = parse_double(k, v); }, \
   [](const RunConfig& c) { return fmt_double(c.F); }}
#define BOOL_ENTRY(K, F) \
  {K, [](RunConfig& c, const std::string& k, const std::string& v) { c.F = parse_bool(k, v); }, \
   [](const RunConfig& c) { return fmt_bool(c.F); }}
#define STRING_ENTRY(K, F) \
  {K, [](RunConfig& c, const std::string&, const std::string& v) { c.F = v; }, \
   [](const RunConfig& c) { return c.F; }}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      {"net.arch",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "toy" && v != "resnet34" && v != "resnet50" && v != "resnet101") {
           throw ConfigError(k + ": unknown architecture '" + v + "'");
         }
         c.arch = v;
       },
       [](const RunConfig& c) { return c.arch; }},
      SIZE_ENTRY("net.num_classes", num_classes),
      BOOL_ENTRY("net.zero_gamma", zero_gamma),
      {"net.k", [](RunConfig& c, const std::string& k, const std::string& v) { c.k_per_stage = parse_list(k, v); },
       [](const RunConfig& c) { return fmt_list(c.k_per_stage); }},
      {"net.dtype",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "f32") {
           c.dtype = DType::kF32;
         } else if (v == "f64") {
           c.dtype = DType::kF64;
         } else {
           throw ConfigError(k + ": expected f32 or f64, got '" + v + "'");
         }
       },
       [](const RunConfig& c) { return std::string(c.dtype == DType::kF32 ? "f32" : "f64"); }},
      {"norm.kind",
       [](RunConfig& c, const std::string&, const std::string& v) {
         NormKind::parse(v);
         c.norm = v;
       },
       [](const RunConfig& c) { return c.norm; }},
      SIZE_ENTRY("norm.groups", gn_groups),
      SIZE_ENTRY("norm.se_r", se_r),
      DOUBLE_ENTRY("norm.eps", eps),
      DOUBLE_ENTRY("norm.momentum", momentum),
      {"an.summarizer",
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.attention.summarizer.kind = parse_summarizer(v);
       },
       [](const RunConfig& c) { return to_string(c.attention.summarizer.kind); }},
      DOUBLE_ENTRY("an.rsd_eps", attention.summarizer.eps),
      {"an.choice",
       [](RunConfig& c, const std::string&, const std::string& v) { c.attention.choice = parse_choice(v); },
       [](const RunConfig& c) { return to_string(c.attention.choice); }},
      {"an.activation",
       [](RunConfig& c, const std::string&, const std::string& v) { c.attention.activation = parse_activation(v); },
       [](const RunConfig& c) { return to_string(c.attention.activation); }},
      SIZE_ENTRY("train.epochs", train.epochs),
      SIZE_ENTRY("train.batch_size", train.batch_size),
      SIZE_ENTRY("train.eval_batch_size", train.eval_batch_size),
      SIZE_ENTRY("train.warmup_epochs", train.warmup_epochs),
      DOUBLE_ENTRY("train.lr", train.base_lr),
      DOUBLE_ENTRY("train.momentum", train.sgd.momentum),
      DOUBLE_ENTRY("train.weight_decay", train.sgd.weight_decay),
      BOOL_ENTRY("train.decay_norm_params", train.sgd.decay_norm_params),
      {"train.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_u64(k, v); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      BOOL_ENTRY("train.augment", train.augment),
      SIZE_ENTRY("train.crop_pad", train.crop_pad),
      BOOL_ENTRY("train.hflip", train.hflip),
      DOUBLE_ENTRY("train.label_smoothing", train.label_smoothing),
      DOUBLE_ENTRY("train.mixup", train.mixup),
      {"train.threads",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.threads = static_cast<int>(parse_size(k, v)); },
       [](const RunConfig& c) { return std::to_string(c.threads); }},
      STRING_ENTRY("train.metrics", metrics_path),
      STRING_ENTRY("train.checkpoint", checkpoint_path),
      {"data.source",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "blobs" && v != "idx") throw ConfigError(k + ": expected blobs or idx, got '" + v + "'");
         c.data_source = v;
       },
       [](const RunConfig& c) { return c.data_source; }},
      SIZE_ENTRY("data.classes", blobs.num_classes),
      SIZE_ENTRY("data.samples_per_class", blobs.samples_per_class),
      SIZE_ENTRY("data.channels", blobs.channels),
      SIZE_ENTRY("data.height", blobs.height),
      SIZE_ENTRY("data.width", blobs.width),
      DOUBLE_ENTRY("data.noise", blobs.noise),
      DOUBLE_ENTRY("data.val_fraction", blobs.val_fraction),
      {"data.seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.blobs.seed = parse_u64(k, v); },
       [](const RunConfig& c) { return std::to_string(c.blobs.seed); }},
      STRING_ENTRY("data.train_images", train_images),
      STRING_ENTRY("data.train_labels", train_labels),
      STRING_ENTRY("data.val_images", val_images),
      STRING_ENTRY("data.val_labels", val_labels),
  };
  return table;
}

#undef SIZE_ENTRY
#undef DOUBLE_ENTRY
#undef BOOL_ENTRY
#undef STRING_ENTRY

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& e : entries()) {
    if (key == e.key) {
      e.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& e : entries()) out.emplace_back(e.key);
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'section.key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : entries()) {
    const std::string key = e.key;
    const std::string sec = key.substr(0, key.find('.'));
    if (sec != section) {
      if (!section.empty()) out += "\n";
      section = sec;
    }
    out += key + " = " + e.get(cfg) + "\n";
  }
  return out;
}

NetSpec RunConfig::net_spec() const {
  NormKind nk = NormKind::parse(norm);
  nk.groups = gn_groups;
  nk.se_r = se_r;
  nk.attention = attention;
  NetSpec spec;
  if (arch == "toy") {
    spec = NetSpec::toy(nk, num_classes);
  } else {
    spec = NetSpec::resnet(std::stoi(arch.substr(6)), nk, num_classes);
  }
  spec.in_channels = blobs.channels;
  spec.k_per_stage = k_per_stage;
  spec.zero_gamma = zero_gamma;
  spec.eps = eps;
  spec.momentum = momentum;
  return spec;
}

void RunConfig::validate() const {
  net_spec().validate();
  train.validate();
  if (data_source == "blobs") {
    blobs.validate();
    if (blobs.num_classes != num_classes) {
      throw ConfigError("data.classes (" + std::to_string(blobs.num_classes) + ") differs from net.num_classes (" +
                        std::to_string(num_classes) + ")");
    }
  } else if (train_images.empty() || train_labels.empty()) {
    throw ConfigError("data.source = idx needs data.train_images and data.train_labels");
  }
  if (eps <= 0) throw ConfigError("norm.eps must be > 0");
  if (momentum < 0 || momentum > 1) throw ConfigError("norm.momentum must be in [0, 1]");
}

template <class T>
SplitDataset<T> load_dataset(const RunConfig& cfg) {
  if (cfg.data_source == "blobs") return gen_blobs<T>(cfg.blobs);
  SplitDataset<T> d;
  d.train = read_idx<T>(cfg.train_images, cfg.train_labels, cfg.blobs.channels, cfg.num_classes);
  if (!cfg.val_images.empty()) d.val = read_idx<T>(cfg.val_images, cfg.val_labels, cfg.blobs.channels, cfg.num_classes);
  return d;
}

template SplitDataset<float> load_dataset(const RunConfig&);
template SplitDataset<double> load_dataset(const RunConfig&);

}  // namespace attnorm
