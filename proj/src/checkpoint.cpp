#include "attnorm/checkpoint.hpp"

#include <bit>
#include <cstring>

namespace attnorm {

namespace {

void put_u8(std::string& b, std::uint8_t v) { b.push_back(static_cast<char>(v)); }

void put_le(std::string& b, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_str(std::string& b, const std::string& s, int len_bytes) {
  put_le(b, s.size(), len_bytes);
  b += s;
}

class Reader {
 public:
  explicit Reader(const std::string& b) : b_(b) {}

  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(int len_bytes) {
    const std::size_t n = le(len_bytes);
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                        " more)");
    }
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string b = "ANCK";
  put_u8(b, ck.version);
  put_u8(b, ck.compute_dtype == DType::kF32 ? 0 : 1);
  put_str(b, ck.config_text, 4);
  put_str(b, ck.rng_state, 4);
  put_le(b, ck.records.size(), 4);
  for (const auto& r : ck.records) {
    put_str(b, r.name, 2);
    put_u8(b, static_cast<std::uint8_t>(r.dims.size()));
    std::size_t numel = 1;
    for (auto d : r.dims) {
      put_le(b, d, 4);
      numel *= d;
    }
    if (numel != r.values.size()) throw DimensionError("checkpoint record " + r.name + ": value count mismatch");
    put_u8(b, 0);
    put_u8(b, static_cast<std::uint8_t>(r.kind));
    for (float v : r.values) put_le(b, std::bit_cast<std::uint32_t>(v), 4);
  }
  return b;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "ANCK") != 0) throw FormatError("not a checkpoint (bad magic)");
  Reader rd(bytes);
  rd.le(4);
  Checkpoint ck;
  ck.version = static_cast<std::uint8_t>(rd.le(1));
  if (ck.version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(ck.version));
  }
  const auto dt = rd.le(1);
  if (dt > 1) throw FormatError("bad compute dtype byte " + std::to_string(dt));
  ck.compute_dtype = dt == 0 ? DType::kF32 : DType::kF64;
  ck.config_text = rd.str(4);
  ck.rng_state = rd.str(4);
  const std::size_t n = rd.le(4);
  for (std::size_t i = 0; i < n; ++i) {
    CheckpointRecord r;
    r.name = rd.str(2);
    const std::size_t rank = rd.le(1);
    std::size_t numel = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      r.dims.push_back(rd.le(4));
      numel *= r.dims.back();
    }
    if (rd.le(1) != 0) throw FormatError("record " + r.name + ": unsupported value dtype");
    const auto kind = rd.le(1);
    if (kind > static_cast<std::uint64_t>(ParamKind::kRunningStat)) throw FormatError("record " + r.name + ": bad kind");
    r.kind = static_cast<ParamKind>(kind);
    rd.need(4 * numel);
    r.values.resize(numel);
    for (auto& v : r.values) v = std::bit_cast<float>(static_cast<std::uint32_t>(rd.le(4)));
    ck.records.push_back(std::move(r));
  }
  if (!rd.done()) throw FormatError("trailing bytes after checkpoint records");
  return ck;
}

template <class T>
Checkpoint make_checkpoint(Network<T>& net, const RunConfig& cfg, const std::string& rng_state) {
  Checkpoint ck;
  ck.compute_dtype = std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
  ck.config_text = serialize_config(cfg);
  ck.rng_state = rng_state;
  for (const auto& np : net.named_params()) {
    CheckpointRecord r;
    r.name = np.name;
    r.dims = np.param->dims;
    r.kind = np.param->kind;
    r.values.assign(np.param->value.begin(), np.param->value.end());
    ck.records.push_back(std::move(r));
  }
  return ck;
}

template <class T>
void apply_checkpoint(const Checkpoint& ck, Network<T>& net) {
  auto params = net.named_params();
  if (params.size() != ck.records.size()) {
    throw FormatError("checkpoint has " + std::to_string(ck.records.size()) + " records, network has " +
                      std::to_string(params.size()) + " tensors");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& r = ck.records[i];
    Param<T>& p = *params[i].param;
    if (r.name != params[i].name || r.dims != p.dims) {
      throw FormatError("checkpoint record " + std::to_string(i) + " '" + r.name + "' does not match '" +
                        params[i].name + "'");
    }
    for (std::size_t j = 0; j < r.values.size(); ++j) p.value[j] = static_cast<T>(r.values[j]);
  }
  net.mark_running_initialized();
}

template <class T>
void save_checkpoint(const std::string& path, Network<T>& net, const RunConfig& cfg, const std::string& rng_state) {
  write_file_atomic(path, encode_checkpoint(make_checkpoint(net, cfg, rng_state)));
}

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

template <class T>
std::unique_ptr<Network<T>> load_network(const Checkpoint& ck) {
  const RunConfig cfg = parse_config(ck.config_text);
  auto net = build_resnet<T>(cfg.net_spec(), cfg.train.seed);
  apply_checkpoint(ck, *net);
  return net;
}

#define ATTNORM_INSTANTIATE(T)                                                                              \
  template Checkpoint make_checkpoint(Network<T>&, const RunConfig&, const std::string&);                  \
  template void apply_checkpoint(const Checkpoint&, Network<T>&);                                          \
  template void save_checkpoint(const std::string&, Network<T>&, const RunConfig&, const std::string&);    \
  template std::unique_ptr<Network<T>> load_network(const Checkpoint&);

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm
