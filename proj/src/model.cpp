#include "actnet/model.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <random>

#include "actnet/kernels.hpp"

namespace actnet {

void validate(const ModelSpec& spec) {
  if (spec.num_encoder_layers < 2)
    throw InvalidSpecError("num_encoder_layers must be >= 2, got " + std::to_string(spec.num_encoder_layers));
  if (spec.num_encoder_layers > 24)
    throw InvalidSpecError("num_encoder_layers " + std::to_string(spec.num_encoder_layers) + " is too large");
  if (spec.initial_channels < 1)
    throw InvalidSpecError("initial_channels must be >= 1, got " + std::to_string(spec.initial_channels));
  if (spec.in_channels < 1) throw InvalidSpecError("in_channels must be >= 1");
  if (spec.num_classes < 1 || spec.num_classes > 255)
    throw InvalidSpecError("num_classes must be in [1, 255], got " + std::to_string(spec.num_classes));
  if (spec.input_side < 1) throw InvalidSpecError("input_side must be >= 1");
}

std::vector<std::int64_t> channel_schedule(const ModelSpec& spec) {
  validate(spec);
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(spec.num_encoder_layers));
  for (int i = 0; i < spec.num_encoder_layers; ++i)
    out.push_back(static_cast<std::int64_t>(spec.initial_channels) << i);
  return out;
}

std::string to_string(const ModelSpec& spec) {
  return "U-Net[" + std::to_string(spec.num_encoder_layers) + "," + std::to_string(spec.initial_channels) + "]";
}

ModelSpec parse_spec(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw InvalidSpecError("spec must look like L,N1; got '" + text + "'");
  auto parse_int = [&](std::string_view s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw InvalidSpecError("spec must look like L,N1; got '" + text + "'");
    return v;
  };
  ModelSpec spec;
  const std::string_view sv(text);
  spec.num_encoder_layers = parse_int(sv.substr(0, comma));
  spec.initial_channels = parse_int(sv.substr(comma + 1));
  validate(spec);
  return spec;
}

std::int64_t analytic_parameter_count(const ModelSpec& spec) {
  const auto ch = channel_schedule(spec);
  const std::int64_t L = spec.num_encoder_layers;
  auto conv = [](std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k * k + out; };
  auto norm = [](std::int64_t c) { return 2 * c; };
  std::int64_t total = 0;
  std::int64_t prev = spec.in_channels;
  for (std::int64_t i = 0; i < L; ++i) {
    total += conv(prev, ch[i], 3) + norm(ch[i]) + conv(ch[i], ch[i], 3) + norm(ch[i]);
    prev = ch[i];
  }
  for (std::int64_t i = 0; i + 1 < L; ++i) {
    total += ch[i + 1] * ch[i] * 4 + ch[i];  // 2x2 transposed conv
    total += conv(2 * ch[i], ch[i], 3) + norm(ch[i]) + conv(ch[i], ch[i], 3) + norm(ch[i]);
  }
  total += conv(ch[0], spec.num_classes, 1);
  return total;
}

std::int64_t conv2d_flops(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                          std::int64_t height, std::int64_t width) {
  return 2 * in_channels * out_channels * kernel * kernel * height * width;
}

ComplexityReport complexity(const ModelSpec& spec) {
  const auto ch = channel_schedule(spec);
  const int L = spec.num_encoder_layers;
  const std::int64_t div = std::int64_t{1} << (L - 1);
  if (spec.input_side % div != 0)
    throw InvalidSpecError("input_side " + std::to_string(spec.input_side) + " is not divisible by 2^(L-1) = " +
                           std::to_string(div));
  ComplexityReport r;
  auto stage = [&](std::int64_t in, std::int64_t c, std::int64_t side) {
    const std::int64_t px = side * side;
    r.conv_flops += conv2d_flops(in, c, 3, side, side) + conv2d_flops(c, c, 3, side, side);
    r.norm_flops += 2 * (2 * c * px);
    r.activation_flops += 2 * c * px;
  };
  std::int64_t prev = spec.in_channels;
  for (int i = 0; i < L; ++i) {
    stage(prev, ch[i], spec.input_side >> i);
    prev = ch[i];
  }
  for (int i = 0; i + 1 < L; ++i) {
    const std::int64_t side = spec.input_side >> i;
    // each output pixel receives one tap per input channel
    r.conv_flops += 2 * ch[i + 1] * ch[i] * side * side;
    stage(2 * ch[i], ch[i], side);
  }
  r.conv_flops += conv2d_flops(ch[0], spec.num_classes, 1, spec.input_side, spec.input_side);
  r.flops = r.conv_flops + r.norm_flops + r.activation_flops;
  r.param_count = analytic_parameter_count(spec);
  r.model_size_bytes = 4 * r.param_count;
  return r;
}

std::int64_t estimate_flops(const ModelSpec& spec) { return complexity(spec).flops; }

// ---------------------------------------------------------------------------

template <typename T>
BasicUNet<T>::BasicUNet(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  channels_ = channel_schedule(spec);
  const int L = spec.num_encoder_layers;
  int prev = spec.in_channels;
  for (int i = 0; i < L; ++i) {
    const int c = static_cast<int>(channels_[static_cast<std::size_t>(i)]);
    encoder_.push_back(add_stage("enc" + std::to_string(i + 1), prev, c));
    prev = c;
  }
  up_.resize(static_cast<std::size_t>(L - 1));
  decoder_.resize(static_cast<std::size_t>(L - 1));
  for (int i = L - 2; i >= 0; --i) {
    const int hi = static_cast<int>(channels_[static_cast<std::size_t>(i + 1)]);
    const int lo = static_cast<int>(channels_[static_cast<std::size_t>(i)]);
    const std::string name = std::to_string(i + 1);
    Up u{params_.size(), params_.size() + 1, hi, lo};
    params_.push_back({"up" + name + ".weight", BasicTensor<T>({hi, lo, 2, 2}), {}});
    params_.push_back({"up" + name + ".bias", BasicTensor<T>({lo}), {}});
    up_[static_cast<std::size_t>(i)] = u;
    decoder_[static_cast<std::size_t>(i)] = add_stage("dec" + name, 2 * lo, lo);
  }
  head_ = add_conv("head", static_cast<int>(channels_[0]), spec.num_classes, 1);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& p : params_) {
    p.grad = BasicTensor<T>(p.value.shape());
    const bool is_norm = p.name.find(".bn") != std::string::npos;
    if (p.value.rank() == 4 && !is_norm) {
      // He-normal over fan-in
      const auto& s = p.value.shape();
      const bool transposed = p.name.rfind("up", 0) == 0;
      const double fan_in = transposed ? static_cast<double>(s[0]) : static_cast<double>(s[1] * s[2] * s[3]);
      const double stddev = std::sqrt(2.0 / fan_in);
      for (auto& v : p.value.storage()) v = static_cast<T>(normal(rng) * stddev);
    } else if (is_norm && p.name.ends_with(".weight")) {
      p.value.fill(T{1});
    }
  }
}

template <typename T>
typename BasicUNet<T>::Conv BasicUNet<T>::add_conv(const std::string& name, int in, int out, int kernel) {
  Conv c{params_.size(), params_.size() + 1, in, out, kernel};
  params_.push_back({name + ".weight", BasicTensor<T>({out, in, kernel, kernel}), {}});
  params_.push_back({name + ".bias", BasicTensor<T>({out}), {}});
  return c;
}

template <typename T>
typename BasicUNet<T>::Norm BasicUNet<T>::add_norm(const std::string& name, int channels) {
  Norm n{params_.size(), params_.size() + 1, buffers_.size(), buffers_.size() + 1, channels};
  params_.push_back({name + ".weight", BasicTensor<T>({channels}), {}});
  params_.push_back({name + ".bias", BasicTensor<T>({channels}), {}});
  buffers_.push_back({name + ".running_mean", BasicTensor<T>({channels})});
  buffers_.push_back({name + ".running_var", BasicTensor<T>({channels}, T{1})});
  return n;
}

template <typename T>
typename BasicUNet<T>::DoubleConv BasicUNet<T>::add_stage(const std::string& name, int in, int out) {
  DoubleConv s{};
  s.conv1 = add_conv(name + ".conv1", in, out, 3);
  s.norm1 = add_norm(name + ".bn1", out);
  s.conv2 = add_conv(name + ".conv2", out, out, 3);
  s.norm2 = add_norm(name + ".bn2", out);
  return s;
}

template <typename T>
std::int64_t BasicUNet<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += static_cast<std::int64_t>(p.value.size());
  return n;
}

template <typename T>
void BasicUNet<T>::check_input(const Shape& shape) const {
  const std::int64_t div = std::int64_t{1} << (spec_.num_encoder_layers - 1);
  if (shape.size() != 4 || shape[0] < 1 || shape[1] != spec_.in_channels)
    throw ShapeError("expected images [B, " + std::to_string(spec_.in_channels) + ", H, W], got " +
                     to_string(shape));
  if (shape[2] < div || shape[3] < div || shape[2] % div != 0 || shape[3] % div != 0)
    throw ShapeError("image size " + std::to_string(shape[2]) + "x" + std::to_string(shape[3]) +
                     " is not divisible by 2^(L-1) = " + std::to_string(div) + " for " + to_string(spec_));
}

template <typename T>
BasicTensor<T> BasicUNet<T>::conv_forward(const Conv& c, const BasicTensor<T>& x) {
  const kernels::ConvGeometry g{static_cast<int>(x.dim(0)), c.in, c.out, static_cast<int>(x.dim(2)),
                                static_cast<int>(x.dim(3)), c.kernel};
  BasicTensor<T> y({x.dim(0), c.out, x.dim(2), x.dim(3)});
  kernels::conv2d_forward<T>(g, x.span(), params_[c.weight].value.span(), params_[c.bias].value.span(),
                             y.span());
  return y;
}

template <typename T>
BasicTensor<T> BasicUNet<T>::norm_relu_forward(const Norm& n, const BasicTensor<T>& x, Phase phase,
                                               BasicTensor<T>* xhat, BasicTensor<T>* inv_std) {
  const kernels::PlaneGeometry g{static_cast<int>(x.dim(0)), n.channels, static_cast<int>(x.dim(2)),
                                 static_cast<int>(x.dim(3))};
  BasicTensor<T> y(x.shape());
  if (phase == Phase::Train) {
    BasicTensor<T> local_xhat(x.shape()), local_istd({n.channels});
    kernels::batchnorm_forward_train<T>(g, x.span(), params_[n.gamma].value.span(), params_[n.beta].value.span(),
                                        kNormEps, kNormMomentum, buffers_[n.mean].value.span(),
                                        buffers_[n.var].value.span(), y.span(), local_xhat.span(),
                                        local_istd.span());
    if (xhat) *xhat = std::move(local_xhat);
    if (inv_std) *inv_std = std::move(local_istd);
  } else {
    kernels::batchnorm_forward_eval<T>(g, x.span(), params_[n.gamma].value.span(), params_[n.beta].value.span(),
                                       buffers_[n.mean].value.span(), buffers_[n.var].value.span(), kNormEps,
                                       y.span());
  }
  kernels::relu_forward<T>(y.span());
  return y;
}

template <typename T>
BasicTensor<T> BasicUNet<T>::run_stage(const DoubleConv& s, const BasicTensor<T>& x, Phase phase,
                                       StageCache* cache) {
  BasicTensor<T> mid = norm_relu_forward(s.norm1, conv_forward(s.conv1, x), phase,
                                         cache ? &cache->xhat1 : nullptr, cache ? &cache->inv_std1 : nullptr);
  BasicTensor<T> out = norm_relu_forward(s.norm2, conv_forward(s.conv2, mid), phase,
                                         cache ? &cache->xhat2 : nullptr, cache ? &cache->inv_std2 : nullptr);
  if (cache) {
    cache->input = x;
    cache->mid = std::move(mid);
    cache->output = out;
    cache->height = static_cast<int>(x.dim(2));
    cache->width = static_cast<int>(x.dim(3));
  }
  return out;
}

template <typename T>
BasicTensor<T> BasicUNet<T>::forward(const BasicTensor<T>& images, Phase phase) {
  check_input(images.shape());
  const int L = spec_.num_encoder_layers;
  const bool train = phase == Phase::Train;
  has_cache_ = false;
  batch_ = static_cast<int>(images.dim(0));
  enc_cache_.assign(train ? static_cast<std::size_t>(L) : 0, {});
  dec_cache_.assign(train ? static_cast<std::size_t>(L - 1) : 0, {});
  up_input_.assign(train ? static_cast<std::size_t>(L - 1) : 0, {});
  pool_argmax_.assign(train ? static_cast<std::size_t>(L - 1) : 0, {});

  std::vector<BasicTensor<T>> skips(static_cast<std::size_t>(L));
  BasicTensor<T> x = images;
  for (int i = 0; i < L; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    skips[ui] = run_stage(encoder_[ui], x, phase, train ? &enc_cache_[ui] : nullptr);
    if (i + 1 < L) {
      const auto& h = skips[ui];
      const kernels::PlaneGeometry g{batch_, static_cast<int>(h.dim(1)), static_cast<int>(h.dim(2)),
                                     static_cast<int>(h.dim(3))};
      BasicTensor<T> pooled({h.dim(0), h.dim(1), h.dim(2) / 2, h.dim(3) / 2});
      std::vector<std::uint8_t> argmax(pooled.size());
      kernels::maxpool2x2_forward<T>(g, h.span(), pooled.span(), argmax);
      if (train) pool_argmax_[ui] = std::move(argmax);
      x = std::move(pooled);
    }
  }

  BasicTensor<T> h = std::move(skips[static_cast<std::size_t>(L - 1)]);
  for (int i = L - 2; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    const Up& u = up_[ui];
    const kernels::UpGeometry ug{batch_, u.in, u.out, static_cast<int>(h.dim(2)), static_cast<int>(h.dim(3))};
    BasicTensor<T> up({h.dim(0), u.out, h.dim(2) * 2, h.dim(3) * 2});
    kernels::upconv2x2_forward<T>(ug, h.span(), params_[u.weight].value.span(), params_[u.bias].value.span(),
                                  up.span());
    if (train) up_input_[ui] = std::move(h);
    const auto& skip = skips[ui];
    BasicTensor<T> cat({skip.dim(0), skip.dim(1) + u.out, skip.dim(2), skip.dim(3)});
    kernels::concat_channels<T>(batch_, static_cast<int>(skip.dim(1)), u.out, skip.dim(2) * skip.dim(3),
                                skip.span(), up.span(), cat.span());
    skips[ui] = {};
    h = run_stage(decoder_[ui], cat, phase, train ? &dec_cache_[ui] : nullptr);
  }

  BasicTensor<T> logits = conv_forward(head_, h);
  if (train) {
    head_input_ = std::move(h);
    has_cache_ = true;
  }
  return logits;
}

template <typename T>
BasicTensor<T> BasicUNet<T>::stage_backward(const DoubleConv& s, StageCache& cache, BasicTensor<T> grad,
                                            bool skip_input_grad) {
  const kernels::PlaneGeometry pg{batch_, s.conv2.out, cache.height, cache.width};
  auto norm_backward = [&](const Norm& n, const BasicTensor<T>& xhat, const BasicTensor<T>& istd,
                           const BasicTensor<T>& dy) {
    BasicTensor<T> dx(dy.shape());
    kernels::batchnorm_backward<T>(pg, dy.span(), xhat.span(), params_[n.gamma].value.span(), istd.span(),
                                   dx.span(), params_[n.gamma].grad.span(), params_[n.beta].grad.span());
    return dx;
  };
  auto conv_backward = [&](const Conv& c, const BasicTensor<T>& x, const BasicTensor<T>& dy, bool want_dx) {
    const kernels::ConvGeometry g{batch_, c.in, c.out, cache.height, cache.width, c.kernel};
    BasicTensor<T> dx = want_dx ? BasicTensor<T>(x.shape()) : BasicTensor<T>();
    kernels::conv2d_backward<T>(g, x.span(), params_[c.weight].value.span(), dy.span(), dx.span(),
                                params_[c.weight].grad.span(), params_[c.bias].grad.span());
    return dx;
  };

  kernels::relu_backward<T>(cache.output.span(), grad.span());
  BasicTensor<T> d = norm_backward(s.norm2, cache.xhat2, cache.inv_std2, grad);
  BasicTensor<T> dmid = conv_backward(s.conv2, cache.mid, d, true);
  kernels::relu_backward<T>(cache.mid.span(), dmid.span());
  d = norm_backward(s.norm1, cache.xhat1, cache.inv_std1, dmid);
  BasicTensor<T> dx = conv_backward(s.conv1, cache.input, d, !skip_input_grad);
  cache = {};
  return dx;
}

template <typename T>
void BasicUNet<T>::backward(const BasicTensor<T>& grad_logits) {
  if (!has_cache_) throw Error("backward() requires a preceding forward(Phase::Train)");
  const Shape expected{batch_, spec_.num_classes, head_input_.dim(2), head_input_.dim(3)};
  require_same_shape(grad_logits.shape(), expected, "UNet::backward");
  const int L = spec_.num_encoder_layers;

  BasicTensor<T> dh(head_input_.shape());
  {
    const kernels::ConvGeometry g{batch_, head_.in, head_.out, static_cast<int>(head_input_.dim(2)),
                                  static_cast<int>(head_input_.dim(3)), 1};
    kernels::conv2d_backward<T>(g, head_input_.span(), params_[head_.weight].value.span(), grad_logits.span(),
                                dh.span(), params_[head_.weight].grad.span(), params_[head_.bias].grad.span());
  }

  std::vector<BasicTensor<T>> dskip(static_cast<std::size_t>(L - 1));
  for (int i = 0; i + 1 < L; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    const Up& u = up_[ui];
    BasicTensor<T> dcat = stage_backward(decoder_[ui], dec_cache_[ui], std::move(dh), false);
    const auto& x = up_input_[ui];
    const std::int64_t plane = dcat.dim(2) * dcat.dim(3);
    BasicTensor<T> dup({batch_, u.out, dcat.dim(2), dcat.dim(3)});
    dskip[ui] = BasicTensor<T>({batch_, u.out, dcat.dim(2), dcat.dim(3)});
    kernels::split_channels<T>(batch_, u.out, u.out, plane, dcat.span(), dskip[ui].span(), dup.span());
    dh = BasicTensor<T>(x.shape());
    const kernels::UpGeometry ug{batch_, u.in, u.out, static_cast<int>(x.dim(2)), static_cast<int>(x.dim(3))};
    kernels::upconv2x2_backward<T>(ug, x.span(), params_[u.weight].value.span(), dup.span(), dh.span(),
                                   params_[u.weight].grad.span(), params_[u.bias].grad.span());
  }

  BasicTensor<T> dpooled;
  for (int i = L - 1; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    BasicTensor<T> dout;
    if (i == L - 1) {
      dout = std::move(dh);
    } else {
      dout = std::move(dskip[ui]);
      const kernels::PlaneGeometry g{batch_, static_cast<int>(dout.dim(1)), static_cast<int>(dout.dim(2)),
                                     static_cast<int>(dout.dim(3))};
      BasicTensor<T> dpool(dout.shape());
      kernels::maxpool2x2_backward<T>(g, dpooled.span(), pool_argmax_[ui], dpool.span());
      auto& o = dout.storage();
      const auto& q = dpool.storage();
      for (std::size_t k = 0; k < o.size(); ++k) o[k] += q[k];
    }
    dpooled = stage_backward(encoder_[ui], enc_cache_[ui], std::move(dout), i == 0);
  }

  has_cache_ = false;
  head_input_ = {};
  up_input_.clear();
  pool_argmax_.clear();
}

template <typename T>
void BasicUNet<T>::zero_grad() {
  for (auto& p : params_) p.grad.fill(T{0});
}

template <typename T>
std::uint64_t parameter_checksum(const BasicUNet<T>& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const BasicTensor<T>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
    for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : model.parameters()) mix(p.value);
  for (const auto& b : model.buffers()) mix(b.value);
  return h;
}

template class BasicUNet<float>;
template class BasicUNet<double>;
template std::uint64_t parameter_checksum(const BasicUNet<float>&);
template std::uint64_t parameter_checksum(const BasicUNet<double>&);

}  // namespace actnet
