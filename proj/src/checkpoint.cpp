#include "actnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace actnet {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

ModelState capture(const UNet& model) {
  ModelState s;
  s.spec = model.spec();
  for (const auto& p : model.parameters()) s.params.emplace_back(p.name, p.value);
  for (const auto& b : model.buffers()) s.buffers.emplace_back(b.name, b.value);
  return s;
}

void load_into(UNet& model, const ModelState& state) {
  if (!(model.spec() == state.spec))
    throw ShapeError("checkpoint spec " + to_string(state.spec) + " does not match model " + to_string(model.spec()));
  auto copy = [](auto& dst, const std::vector<NamedTensor>& src, const char* what) {
    if (dst.size() != src.size()) throw ShapeError(std::string("checkpoint ") + what + " count mismatch");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (dst[i].name != src[i].first)
        throw ShapeError(std::string("checkpoint ") + what + " '" + src[i].first + "' where '" + dst[i].name +
                         "' was expected");
      require_same_shape(dst[i].value.shape(), src[i].second.shape(), dst[i].name.c_str());
    }
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].value = src[i].second;
  };
  copy(model.parameters(), state.params, "parameter");
  copy(model.buffers(), state.buffers, "buffer");
}

UNet make_model(const ModelState& state) {
  UNet model(state.spec, 0);
  load_into(model, state);
  return model;
}

namespace {

constexpr char kMagic[8] = {'A', 'C', 'T', 'N', 'E', 'T', 'C', 'K'};

class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  template <typename T>
  void tensor(const BasicTensor<T>& t) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) pod<std::int64_t>(d);
    const auto* p = reinterpret_cast<const char*>(t.ptr());
    buf_.insert(buf_.end(), p, p + t.size() * sizeof(T));
  }
  void named(const std::vector<NamedTensor>& v) {
    pod<std::uint64_t>(v.size());
    for (const auto& [name, t] : v) {
      str(name);
      tensor(t);
    }
  }
  void model(const ModelState& s) {
    for (int x : {s.spec.num_encoder_layers, s.spec.initial_channels, s.spec.in_channels, s.spec.num_classes,
                  s.spec.input_side})
      pod<std::int32_t>(x);
    named(s.params);
    named(s.buffers);
  }
  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t begin, std::size_t end, std::string origin)
      : buf_(buf), pos_(begin), end_(end), origin_(std::move(origin)) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  BasicTensor<T> tensor() {
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) fail("bad tensor rank");
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = pod<std::int64_t>();
      if (d < 0 || d > (1LL << 40)) fail("bad tensor dimension");
      count *= static_cast<std::size_t>(d);
    }
    need(count * sizeof(T));
    BasicTensor<T> t(shape);
    std::memcpy(t.ptr(), buf_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
    return t;
  }
  std::vector<NamedTensor> named() {
    const auto n = pod<std::uint64_t>();
    if (n > 100000) fail("bad tensor count");
    std::vector<NamedTensor> v;
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = str();
      v.emplace_back(std::move(name), tensor<float>());
    }
    return v;
  }
  ModelState model() {
    ModelState s;
    s.spec.num_encoder_layers = pod<std::int32_t>();
    s.spec.initial_channels = pod<std::int32_t>();
    s.spec.in_channels = pod<std::int32_t>();
    s.spec.num_classes = pod<std::int32_t>();
    s.spec.input_side = pod<std::int32_t>();
    s.params = named();
    s.buffers = named();
    return s;
  }
  bool done() const { return pos_ == end_; }
  [[noreturn]] void fail(const std::string& what) const { throw DataError(origin_ + ": " + what); }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) fail("truncated checkpoint");
  }
  const std::vector<char>& buf_;
  std::size_t pos_, end_;
  std::string origin_;
};

std::uint64_t fnv1a(const char* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  Writer w;
  for (char ch : kMagic) w.pod(ch);
  w.pod<std::uint32_t>(Checkpoint::kVersion);
  w.str(c.config_text);
  w.str(c.config_digest);
  w.pod<std::int64_t>(c.iteration);
  w.model(c.student);
  w.pod<std::uint64_t>(c.velocity.size());
  for (const auto& t : c.velocity) w.tensor(t);
  w.pod<std::uint8_t>(c.has_ema);
  if (c.has_ema) {
    w.pod<double>(c.ema_decay);
    w.pod<std::uint8_t>(c.ema_warmup);
    w.pod<std::int64_t>(c.ema_steps);
    w.pod<std::uint64_t>(c.ema_shadow.size());
    for (const auto& t : c.ema_shadow) w.tensor(t);
    w.named(c.ema_buffers);
  }
  w.pod<std::uint8_t>(c.has_best);
  if (c.has_best) {
    w.pod<std::int64_t>(c.best_iteration);
    w.pod<double>(c.best_val_dsc);
    w.model(c.best);
  }
  const auto& body = w.bytes();
  const std::uint64_t sum = fnv1a(body.data(), body.size());

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.write(reinterpret_cast<const char*>(&sum), sizeof sum);
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string origin = path.string();
  if (buf.size() < sizeof kMagic + 4 + 8 || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(origin + ": not a checkpoint file");
  const std::size_t body = buf.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof stored);
  if (stored != fnv1a(buf.data(), body)) throw DataError(origin + ": checkpoint checksum mismatch");

  Reader r(buf, sizeof kMagic, body, origin);
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_text = r.str();
  c.config_digest = r.str();
  c.iteration = r.pod<std::int64_t>();
  c.student = r.model();
  const auto nv = r.pod<std::uint64_t>();
  if (nv > 100000) r.fail("bad velocity count");
  for (std::uint64_t i = 0; i < nv; ++i) c.velocity.push_back(r.tensor<float>());
  c.has_ema = r.pod<std::uint8_t>() != 0;
  if (c.has_ema) {
    c.ema_decay = r.pod<double>();
    c.ema_warmup = r.pod<std::uint8_t>() != 0;
    c.ema_steps = r.pod<std::int64_t>();
    const auto ns = r.pod<std::uint64_t>();
    if (ns > 100000) r.fail("bad shadow count");
    for (std::uint64_t i = 0; i < ns; ++i) c.ema_shadow.push_back(r.tensor<double>());
    c.ema_buffers = r.named();
  }
  c.has_best = r.pod<std::uint8_t>() != 0;
  if (c.has_best) {
    c.best_iteration = r.pod<std::int64_t>();
    c.best_val_dsc = r.pod<double>();
    c.best = r.model();
  }
  if (!r.done()) r.fail("trailing bytes in checkpoint");
  return c;
}

}  // namespace actnet
