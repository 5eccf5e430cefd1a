#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adk/checkpoint.hpp"
#include "adk/nn.hpp"
#include "adk/rng.hpp"
#include "adk/schedule.hpp"
#include "adk/tensor.hpp"

namespace adk {

// Sinusoidal timestep embedding: interleaved [sin(t w_k), cos(t w_k)] pairs
// with w_k = 10000^(-2k/dim).
template <typename T>
Tensor<T> time_embedding(std::span<const int> ts, int dim) {
  if (dim <= 0 || dim % 2 != 0)
    throw std::invalid_argument("time_embedding: dim must be positive and even");
  for (int t : ts)
    if (t < 0) throw std::invalid_argument("time_embedding: t must be >= 0");
  const std::int64_t n = static_cast<std::int64_t>(ts.size());
  std::vector<T> out(static_cast<std::size_t>(n * dim));
  for (std::int64_t i = 0; i < n; ++i) {
    for (int k = 0; k < dim / 2; ++k) {
      const double omega = std::pow(10000.0, -2.0 * k / static_cast<double>(dim));
      const double phase = static_cast<double>(ts[static_cast<std::size_t>(i)]) * omega;
      out[static_cast<std::size_t>(i * dim + 2 * k)] = static_cast<T>(std::sin(phase));
      out[static_cast<std::size_t>(i * dim + 2 * k + 1)] = static_cast<T>(std::cos(phase));
    }
  }
  return Tensor<T>::from_vector({n, dim}, std::move(out));
}

template <typename T>
Tensor<T> time_embedding(int t, int dim) {
  const int ts[1] = {t};
  return reshape(time_embedding<T>(std::span<const int>(ts, 1), dim), {dim});
}

struct DenoiserConfig {
  int in_channels = 3;
  int base_channels = 32;
  int depth = 2;  // number of down/up stages
  int time_embed_dim = 128;
  bool attention_at_lowest = true;

  void validate() const {
    if (depth < 1) throw std::invalid_argument("DenoiserConfig: depth must be >= 1");
    if (base_channels < 8)
      throw std::invalid_argument("DenoiserConfig: base_channels must be >= 8");
    if (time_embed_dim <= 0 || time_embed_dim % 2 != 0)
      throw std::invalid_argument("DenoiserConfig: time_embed_dim must be a positive multiple of 2");
    if (in_channels < 1) throw std::invalid_argument("DenoiserConfig: in_channels must be >= 1");
  }
};

struct SegmenterConfig {
  int in_channels = 6;  // 2 x image channels
  int base_channels = 32;
  int depth = 2;

  void validate() const {
    if (depth < 1) throw std::invalid_argument("SegmenterConfig: depth must be >= 1");
    if (in_channels < 2 || in_channels % 2 != 0)
      throw std::invalid_argument("SegmenterConfig: in_channels must be even");
    if (base_channels < 8)
      throw std::invalid_argument("SegmenterConfig: base_channels must be >= 8");
  }
};

namespace detail {

inline int norm_groups(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0) return g;
  return 1;
}

}  // namespace detail

template <typename T>
struct Conv2dLayer {
  Tensor<T> weight;  // [K,C,kh,kw]
  Tensor<T> bias;    // [K]
  int stride = 1;
  int padding = 1;

  static Conv2dLayer make(int in_ch, int out_ch, int k, int stride, int padding,
                          Rng& rng, bool zero_init = false) {
    Conv2dLayer layer;
    layer.stride = stride;
    layer.padding = padding;
    if (zero_init) {
      layer.weight = Tensor<T>::zeros({out_ch, in_ch, k, k}, true);
    } else {
      const double std = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k));
      layer.weight = mul_scalar(randn<T>(rng, {out_ch, in_ch, k, k}), static_cast<T>(std));
      layer.weight.node_mut().requires_grad = true;
    }
    layer.bias = Tensor<T>::zeros({out_ch}, true);
    return layer;
  }

  Tensor<T> operator()(Tensor<T> x) const { return conv2d(std::move(x), weight, bias, stride, padding); }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [Dout,Din]
  Tensor<T> bias;    // [Dout]

  static LinearLayer make(int din, int dout, Rng& rng) {
    LinearLayer layer;
    const double std = std::sqrt(2.0 / static_cast<double>(din));
    layer.weight = mul_scalar(randn<T>(rng, {dout, din}), static_cast<T>(std));
    layer.weight.node_mut().requires_grad = true;
    layer.bias = Tensor<T>::zeros({dout}, true);
    return layer;
  }

  Tensor<T> operator()(Tensor<T> x) const { return linear(std::move(x), weight, bias); }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <typename T>
struct GroupNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  int groups = 8;

  static GroupNormLayer make(int channels) {
    GroupNormLayer layer;
    layer.groups = detail::norm_groups(channels);
    layer.gamma = Tensor<T>::full({channels}, T(1), true);
    layer.beta = Tensor<T>::zeros({channels}, true);
    return layer;
  }

  Tensor<T> operator()(Tensor<T> x) const { return group_norm(std::move(x), gamma, beta, groups); }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

// GN -> SiLU -> conv twice, additive time injection after the first conv,
// identity or 1x1 shortcut.
template <typename T>
struct ResBlock {
  GroupNormLayer<T> norm1, norm2;
  Conv2dLayer<T> conv1, conv2;
  LinearLayer<T> temb_proj;
  Conv2dLayer<T> shortcut;
  bool has_time = false;
  bool has_shortcut = false;

  static ResBlock make(int in_ch, int out_ch, int time_dim, Rng& rng) {
    ResBlock b;
    b.norm1 = GroupNormLayer<T>::make(in_ch);
    b.conv1 = Conv2dLayer<T>::make(in_ch, out_ch, 3, 1, 1, rng);
    b.norm2 = GroupNormLayer<T>::make(out_ch);
    b.conv2 = Conv2dLayer<T>::make(out_ch, out_ch, 3, 1, 1, rng);
    b.has_time = time_dim > 0;
    if (b.has_time) b.temb_proj = LinearLayer<T>::make(time_dim, out_ch, rng);
    b.has_shortcut = in_ch != out_ch;
    if (b.has_shortcut) b.shortcut = Conv2dLayer<T>::make(in_ch, out_ch, 1, 1, 0, rng);
    return b;
  }

  Tensor<T> forward(Tensor<T> x, const Tensor<T>& temb) const {
    Tensor<T> h = conv1(silu(norm1(x)));
    if (has_time) h = add_per_sample_channel(std::move(h), temb_proj(silu(temb)));
    h = conv2(silu(norm2(std::move(h))));
    Tensor<T> s = has_shortcut ? shortcut(x) : x;
    return add(std::move(h), std::move(s));
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    norm1.collect(prefix + ".norm1", out);
    conv1.collect(prefix + ".conv1", out);
    norm2.collect(prefix + ".norm2", out);
    conv2.collect(prefix + ".conv2", out);
    if (has_time) temb_proj.collect(prefix + ".temb_proj", out);
    if (has_shortcut) shortcut.collect(prefix + ".shortcut", out);
  }
};

// Multi-head self-attention over the spatial plane, pre-normalised, with a
// residual connection.
template <typename T>
struct SelfAttention {
  GroupNormLayer<T> norm;
  Conv2dLayer<T> q, k, v;  // 1x1
  Conv2dLayer<T> proj;     // 1x1
  int heads = 4;

  static SelfAttention make(int channels, int heads, Rng& rng) {
    if (channels % heads != 0)
      throw std::invalid_argument("SelfAttention: channels must divide into heads");
    SelfAttention a;
    a.heads = heads;
    a.norm = GroupNormLayer<T>::make(channels);
    a.q = Conv2dLayer<T>::make(channels, channels, 1, 1, 0, rng);
    a.k = Conv2dLayer<T>::make(channels, channels, 1, 1, 0, rng);
    a.v = Conv2dLayer<T>::make(channels, channels, 1, 1, 0, rng);
    a.proj = Conv2dLayer<T>::make(channels, channels, 1, 1, 0, rng);
    return a;
  }

  Tensor<T> forward(Tensor<T> x) const {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t dk = c / heads, hw = h * w, b = n * heads;
    Tensor<T> normed = norm(x);
    auto to_tokens = [&](Tensor<T> t) {  // [N,C,H,W] -> [B,HW,dk]
      return permute(reshape(std::move(t), {b, dk, hw}), {0, 2, 1});
    };
    Tensor<T> qs = to_tokens(q(normed));
    Tensor<T> ks = reshape(k(normed), {b, dk, hw});  // stays [B,dk,HW]
    Tensor<T> vs = to_tokens(v(normed));
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor<T> attn = softmax_lastdim(mul_scalar(matmul(qs, ks), scale));
    Tensor<T> mixed = matmul(std::move(attn), std::move(vs));  // [B,HW,dk]
    Tensor<T> merged = reshape(permute(std::move(mixed), {0, 2, 1}), {n, c, h, w});
    return add(proj(std::move(merged)), std::move(x));
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    norm.collect(prefix + ".norm", out);
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    proj.collect(prefix + ".proj", out);
  }
};

// Residual U-Net shared by both sub-networks: stride-2 convolutions down,
// nearest-neighbour x2 + conv up, skip concatenation, optional attention at
// the lowest resolution, optional timestep conditioning, zero-initialised
// output head.
template <typename T>
struct UNet {
  int in_channels = 0, out_channels = 0, base = 0, depth = 0, time_dim = 0;
  bool attention = false;
  Conv2dLayer<T> conv_in;
  LinearLayer<T> time_fc1, time_fc2;
  std::vector<ResBlock<T>> down_blocks;
  std::vector<Conv2dLayer<T>> downs;
  ResBlock<T> mid1, mid2;
  SelfAttention<T> mid_attn;
  std::vector<Conv2dLayer<T>> ups;
  std::vector<ResBlock<T>> up_blocks;
  GroupNormLayer<T> norm_out;
  Conv2dLayer<T> conv_out;

  static UNet make(int in_ch, int out_ch, int base, int depth, int time_dim,
                   bool attention, Rng& rng) {
    UNet net;
    net.in_channels = in_ch;
    net.out_channels = out_ch;
    net.base = base;
    net.depth = depth;
    net.time_dim = time_dim;
    net.attention = attention;
    auto ch = [&](int stage) { return base << stage; };
    net.conv_in = Conv2dLayer<T>::make(in_ch, base, 3, 1, 1, rng);
    if (time_dim > 0) {
      net.time_fc1 = LinearLayer<T>::make(time_dim, time_dim, rng);
      net.time_fc2 = LinearLayer<T>::make(time_dim, time_dim, rng);
    }
    for (int i = 0; i < depth; ++i) {
      net.down_blocks.push_back(ResBlock<T>::make(ch(i), ch(i), time_dim, rng));
      net.downs.push_back(Conv2dLayer<T>::make(ch(i), ch(i + 1), 3, 2, 1, rng));
    }
    net.mid1 = ResBlock<T>::make(ch(depth), ch(depth), time_dim, rng);
    if (attention) net.mid_attn = SelfAttention<T>::make(ch(depth), 4, rng);
    net.mid2 = ResBlock<T>::make(ch(depth), ch(depth), time_dim, rng);
    for (int i = depth - 1; i >= 0; --i) {
      net.ups.push_back(Conv2dLayer<T>::make(ch(i + 1), ch(i), 3, 1, 1, rng));
      net.up_blocks.push_back(ResBlock<T>::make(2 * ch(i), ch(i), time_dim, rng));
    }
    net.norm_out = GroupNormLayer<T>::make(base);
    net.conv_out = Conv2dLayer<T>::make(base, out_ch, 3, 1, 1, rng, /*zero_init=*/true);
    return net;
  }

  // temb: raw sinusoidal embedding [N, time_dim]; undefined when time_dim==0.
  Tensor<T> forward(Tensor<T> x, Tensor<T> temb) const {
    if (x.ndim() != 4 || x.dim(1) != in_channels)
      throw std::invalid_argument("unet: expected [N," + std::to_string(in_channels) +
                                  ",H,W], got " + shape_str(x.shape()));
    const std::int64_t div = std::int64_t{1} << depth;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
      throw std::invalid_argument("unet: spatial dims must be divisible by 2^depth");
    Tensor<T> cond;
    if (time_dim > 0) {
      if (!temb.defined() || temb.ndim() != 2 || temb.dim(0) != x.dim(0) ||
          temb.dim(1) != time_dim)
        throw std::invalid_argument("unet: time embedding must be [N,time_dim]");
      cond = time_fc2(silu(time_fc1(std::move(temb))));
    }
    Tensor<T> h = conv_in(std::move(x));
    std::vector<Tensor<T>> skips;
    skips.reserve(static_cast<std::size_t>(depth));
    for (int i = 0; i < depth; ++i) {
      h = down_blocks[static_cast<std::size_t>(i)].forward(std::move(h), cond);
      skips.push_back(h);
      h = downs[static_cast<std::size_t>(i)](std::move(h));
    }
    h = mid1.forward(std::move(h), cond);
    if (attention) h = mid_attn.forward(std::move(h));
    h = mid2.forward(std::move(h), cond);
    for (int i = 0; i < depth; ++i) {
      h = ups[static_cast<std::size_t>(i)](upsample_nearest2(std::move(h)));
      h = concat_channels(h, skips[static_cast<std::size_t>(depth - 1 - i)]);
      h = up_blocks[static_cast<std::size_t>(i)].forward(std::move(h), cond);
    }
    return conv_out(silu(norm_out(std::move(h))));
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    conv_in.collect(prefix + ".conv_in", out);
    if (time_dim > 0) {
      time_fc1.collect(prefix + ".time_fc1", out);
      time_fc2.collect(prefix + ".time_fc2", out);
    }
    for (std::size_t i = 0; i < down_blocks.size(); ++i) {
      down_blocks[i].collect(prefix + ".down." + std::to_string(i) + ".block", out);
      downs[i].collect(prefix + ".down." + std::to_string(i) + ".pool", out);
    }
    mid1.collect(prefix + ".mid1", out);
    if (attention) mid_attn.collect(prefix + ".mid_attn", out);
    mid2.collect(prefix + ".mid2", out);
    for (std::size_t i = 0; i < up_blocks.size(); ++i) {
      ups[i].collect(prefix + ".up." + std::to_string(i) + ".conv", out);
      up_blocks[i].collect(prefix + ".up." + std::to_string(i) + ".block", out);
    }
    norm_out.collect(prefix + ".norm_out", out);
    conv_out.collect(prefix + ".conv_out", out);
  }
};

// The denoiser eps_theta(x_t, t) and the segmenter over concat(x0, xhat0),
// plus checkpoint plumbing.
template <typename T>
struct ModelBundle {
  DenoiserConfig denoiser_config;
  SegmenterConfig segmenter_config;
  UNet<T> denoiser;
  UNet<T> segmenter;
  int format_version = static_cast<int>(kCheckpointVersion);

  static ModelBundle create(const DenoiserConfig& dcfg, const SegmenterConfig& scfg,
                            Rng& rng) {
    dcfg.validate();
    scfg.validate();
    if (scfg.in_channels != 2 * dcfg.in_channels)
      throw std::invalid_argument(
          "ModelBundle: segmenter input must be twice the image channels");
    ModelBundle b;
    b.denoiser_config = dcfg;
    b.segmenter_config = scfg;
    Rng drng = rng.fork("denoiser-init");
    Rng srng = rng.fork("segmenter-init");
    b.denoiser = UNet<T>::make(dcfg.in_channels, dcfg.in_channels, dcfg.base_channels,
                               dcfg.depth, dcfg.time_embed_dim,
                               dcfg.attention_at_lowest, drng);
    b.segmenter = UNet<T>::make(scfg.in_channels, 1, scfg.base_channels, scfg.depth,
                                0, false, srng);
    return b;
  }

  // eps prediction; one timestep per sample.
  Tensor<T> denoise(Tensor<T> x_t, std::span<const int> ts) const {
    if (x_t.dim(0) != static_cast<std::int64_t>(ts.size()))
      throw std::invalid_argument("denoise: one timestep per sample required");
    Tensor<T> temb = time_embedding<T>(ts, denoiser_config.time_embed_dim);
    return denoiser.forward(std::move(x_t), std::move(temb));
  }

  // Pixel-wise anomaly scores in [0,1] from the channel-wise concatenation.
  Tensor<T> segment(Tensor<T> x0, Tensor<T> x0_hat) const {
    if (x0.shape() != x0_hat.shape())
      throw std::invalid_argument("segment: inputs must have matching shapes");
    return sigmoid(segmenter.forward(concat_channels(std::move(x0), std::move(x0_hat)),
                                     Tensor<T>{}));
  }

  // The handle shares parameters with this bundle and stays valid however
  // the bundle itself is moved around.
  Denoiser<T> denoiser_handle() const {
    Denoiser<T> d;
    UNet<T> net = denoiser;
    const int tdim = denoiser_config.time_embed_dim;
    d.fn = [net, tdim](Tensor<T> x_t, std::span<const int> ts) {
      if (x_t.dim(0) != static_cast<std::int64_t>(ts.size()))
        throw std::invalid_argument("denoise: one timestep per sample required");
      Tensor<T> temb = time_embedding<T>(ts, tdim);
      return net.forward(std::move(x_t), std::move(temb));
    };
    return d;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    denoiser.collect("denoiser", out);
    segmenter.collect("segmenter", out);
    return out;
  }

  std::vector<Tensor<T>> params() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  bool all_finite() const {
    for (const auto& [name, t] : named_params())
      for (T v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
  }

  void save(const std::string& path) const { save_checkpoint<T>(path, named_params()); }

  // Rebuilds from configs and overwrites every parameter from the file.
  static ModelBundle load(const std::string& path, const DenoiserConfig& dcfg,
                          const SegmenterConfig& scfg) {
    Rng init_rng(0, "load");
    ModelBundle b = create(dcfg, scfg, init_rng);
    auto stored = load_checkpoint<T>(path);
    auto named = b.named_params();
    if (stored.size() != named.size())
      throw std::runtime_error("checkpoint: parameter count mismatch (file " +
                               std::to_string(stored.size()) + ", model " +
                               std::to_string(named.size()) + ")");
    for (auto& [name, param] : named) {
      auto it = stored.find(name);
      if (it == stored.end())
        throw std::runtime_error("checkpoint: missing parameter " + name);
      if (it->second.shape() != param.shape())
        throw std::runtime_error("checkpoint: shape mismatch for " + name);
      std::copy(it->second.data().begin(), it->second.data().end(),
                param.data_mut().begin());
    }
    return b;
  }
};

}  // namespace adk
