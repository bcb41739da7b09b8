// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Noise predictor: a small UNet shared across views. Every level injects the
// timestep embedding in its residual blocks, adds the input-image embedding,
// and attends along the depth axis of the view's frustum feature level.

#pragma once


#include "json.hpp"
#include "morphdiff/nn.hpp"

namespace morphdiff::unet {

using ad::ParamSet;
using ad::Var;

struct DenoiserConfig {
  Index levels = 3;
  std::vector<Index> channels{32, 64, 128};
  /// Query/key width of the depth attention (d) and frustum feature width (d_r).
  Index attention_dim = 64;
  Index kv_dim = 64;
  Index embed_dim = 64;
  Index time_dim = 64;
  /// Strided conv widths of the input-image encoder.
  std::vector<Index> encoder_channels{16, 32, 64};
  Index views = 8;
  Index image_size = 32;
};

inline void validate(const DenoiserConfig& c) {
  if (c.levels < 2) throw ConfigError("denoiser needs at least 2 levels");
  if (static_cast<Index>(c.channels.size()) != c.levels) throw ConfigError("denoiser channels must list one width per level");
  for (Index ch : c.channels) {
    if (ch < 1) throw ConfigError("denoiser widths must be positive");
  }
  if (c.attention_dim < 1 || c.kv_dim < 1 || c.embed_dim < 1 || c.time_dim < 2 || c.time_dim % 2 != 0 ||
      c.views < 1 || c.encoder_channels.empty()) {
    throw ConfigError("denoiser widths must be positive (time_dim even)");
  }
  if (c.image_size < 1 || c.image_size % (Index{1} << (c.levels - 1)) != 0) {
    throw ConfigError("image size " + std::to_string(c.image_size) + " must be divisible by 2^(levels-1)");
  }
}

inline nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"levels", c.levels},         {"channels", c.channels},   {"attention_dim", c.attention_dim},
          {"kv_dim", c.kv_dim},         {"embed_dim", c.embed_dim}, {"time_dim", c.time_dim},
          {"encoder_channels", c.encoder_channels}, {"views", c.views}, {"image_size", c.image_size}};
}

inline DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.levels = j.value("levels", c.levels);
  c.channels = j.value("channels", c.channels);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.kv_dim = j.value("kv_dim", c.kv_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.time_dim = j.value("time_dim", c.time_dim);
  c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
  c.views = j.value("views", c.views);
  c.image_size = j.value("image_size", c.image_size);
  return c;
}

/// Sinusoidal features [sin(t w_k), cos(t w_k)], w_k = 10000^(-k / half).
template <typename T>
Tensor<T> timestep_features(Index t, Index dim) {
  Tensor<T> out({1, dim});
  const Index half = dim / 2;
  for (Index k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    out[k] = static_cast<T>(std::sin(static_cast<double>(t) * w));
    out[half + k] = static_cast<T>(std::cos(static_cast<double>(t) * w));
  }
  return out;
}

template <typename T>
struct Norm {
  Var<T> gamma, beta;
  Index groups = 1;

  static Norm create(ParamSet<T>& ps, const std::string& p, Index channels) {
    Norm n;
    n.gamma = ps.add(p + "gamma", Tensor<T>({channels}, T{1}));
    n.beta = nn::zero_param<T>(ps, p + "beta", {channels});
    n.groups = nn::norm_groups(channels);
    return n;
  }

  Var<T> operator()(const Var<T>& x) const { return ad::group_norm(x, gamma, beta, groups); }
};

template <typename T>
struct ResBlock {
  Norm<T> norm1, norm2;
  Var<T> w1, b1, wt, bt, w2, b2, skip;

  static ResBlock create(ParamSet<T>& ps, const std::string& p, Index cin, Index cout, Index time_dim, Rng& rng) {
    ResBlock r;
    r.norm1 = Norm<T>::create(ps, p + "norm1.", cin);
    r.norm2 = Norm<T>::create(ps, p + "norm2.", cout);
    r.w1 = nn::he_param<T>(ps, p + "conv1.weight", {cout, cin, 3, 3}, 9 * cin, rng);
    r.b1 = nn::zero_param<T>(ps, p + "conv1.bias", {cout});
    r.wt = nn::he_param<T>(ps, p + "time.weight", {cout, time_dim}, time_dim, rng);
    r.bt = nn::zero_param<T>(ps, p + "time.bias", {cout});
    r.w2 = nn::he_param<T>(ps, p + "conv2.weight", {cout, cout, 3, 3}, 9 * cout, rng);
    r.b2 = nn::zero_param<T>(ps, p + "conv2.bias", {cout});
    if (cin != cout) r.skip = nn::he_param<T>(ps, p + "skip.weight", {cout, cin}, cin, rng);
    return r;
  }

  /// temb: [1, time_dim] (already passed through the time MLP).
  Var<T> operator()(const Var<T>& x, const Var<T>& temb) const {
    auto h = ad::conv2d(ad::silu(norm1(x)), w1, b1);
    const Index cout = w1.dim(0);
    h = ad::add_channel_bias(h, ad::reshape(ad::linear(ad::silu(temb), wt, bt), {cout}));
    h = ad::conv2d(ad::silu(norm2(h)), w2, b2);
    return ad::add(skip.defined() ? ad::channel_linear(x, skip) : x, h);
  }
};

/// Depth-wise cross-attention of one level: queries from the UNet features,
/// keys/values from the frustum grid, softmax over depth only, projected back
/// and added residually.
template <typename T>
struct DepthAttention {
  Var<T> wq, wk, wv, wo;

  static DepthAttention create(ParamSet<T>& ps, const std::string& p, Index channels, Index d, Index d_r, Rng& rng) {
    DepthAttention a;
    a.wq = nn::he_param<T>(ps, p + "q.weight", {d, channels}, 2 * channels, rng);
    a.wk = nn::he_param<T>(ps, p + "k.weight", {d, d_r}, 2 * d_r, rng);
    a.wv = nn::he_param<T>(ps, p + "v.weight", {d, d_r}, 2 * d_r, rng);
    a.wo = nn::he_param<T>(ps, p + "out.weight", {channels, d}, 2 * d, rng);
    return a;
  }

  /// Attention output before the residual add. phi: [N, c, h, w], frustum: [N, d_r, D, h, w].
  Var<T> attend(const Var<T>& phi, const Var<T>& frustum) const {
    const Index n = phi.dim(0), h = phi.dim(2), w = phi.dim(3);
    if (frustum.shape().size() != 5 || frustum.dim(0) != n || frustum.dim(3) != h || frustum.dim(4) != w) {
      throw ConfigError("frustum level " + shape_str(frustum.shape()) + " does not match features " +
                        shape_str(phi.shape()));
    }
    const Index d = wq.dim(0);
    const Index depth = frustum.dim(2);
    auto q = ad::reshape(ad::channel_linear(phi, wq), {n, d, h * w});
    auto k = ad::reshape(ad::channel_linear(frustum, wk), {n, d, depth, h * w});
    auto v = ad::reshape(ad::channel_linear(frustum, wv), {n, d, depth, h * w});
    auto o = ad::depth_attention(q, k, v, static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    return ad::channel_linear(ad::reshape(o, {n, d, h, w}), wo);
  }

  Var<T> operator()(const Var<T>& phi, const Var<T>& frustum) const { return ad::add(phi, attend(phi, frustum)); }
};

template <typename T>
struct ImageEncoder {
  std::vector<Var<T>> conv_w, conv_b;
  Var<T> proj_w, proj_b;

  static ImageEncoder create(ParamSet<T>& ps, const std::string& p, const DenoiserConfig& c, Rng& rng) {
    ImageEncoder e;
    Index cin = 3;
    for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) {
      const Index cout = c.encoder_channels[i];
      e.conv_w.push_back(nn::he_param<T>(ps, p + "conv" + std::to_string(i) + ".weight", {cout, cin, 3, 3}, 9 * cin, rng));
      e.conv_b.push_back(nn::zero_param<T>(ps, p + "conv" + std::to_string(i) + ".bias", {cout}));
      cin = cout;
    }
    e.proj_w = nn::he_param<T>(ps, p + "proj.weight", {c.embed_dim, cin}, cin, rng);
    e.proj_b = nn::zero_param<T>(ps, p + "proj.bias", {c.embed_dim});
    return e;
  }

  /// [1, 3, H, W] -> [1, embed_dim]: strided convs, global average pool, projection.
  Var<T> operator()(const Var<T>& image) const {
    Var<T> h = image;
    for (std::size_t i = 0; i < conv_w.size(); ++i) h = ad::silu(ad::conv2d(h, conv_w[i], conv_b[i], 2, 1));
    return ad::linear(ad::mean_spatial(h), proj_w, proj_b);
  }
};

template <typename T>
struct Denoiser {
  DenoiserConfig config;
  Var<T> time_w1, time_b1, time_w2, time_b2;
  Var<T> in_w, in_b;
  std::vector<ResBlock<T>> down_blocks, up_blocks;
  std::vector<Var<T>> down_w, down_b, up_w, up_b;
  ResBlock<T> mid;
  std::vector<Var<T>> image_w_down, image_b_down, image_w_up, image_b_up;
  std::vector<DepthAttention<T>> attn_down, attn_up;
  Norm<T> out_norm;
  Var<T> out_w, out_b;

  static Denoiser create(const DenoiserConfig& c, ParamSet<T>& ps, const std::string& p, Rng& rng) {
    validate(c);
    Denoiser u;
    u.config = c;
    const Index td = c.time_dim;
    u.time_w1 = nn::he_param<T>(ps, p + "time.fc1.weight", {td, td}, td, rng);
    u.time_b1 = nn::zero_param<T>(ps, p + "time.fc1.bias", {td});
    u.time_w2 = nn::he_param<T>(ps, p + "time.fc2.weight", {td, td}, td, rng);
    u.time_b2 = nn::zero_param<T>(ps, p + "time.fc2.bias", {td});
    const auto& ch = c.channels;
    u.in_w = nn::he_param<T>(ps, p + "in.weight", {ch[0], 3, 3, 3}, 27, rng);
    u.in_b = nn::zero_param<T>(ps, p + "in.bias", {ch[0]});
    Index prev = ch[0];
    for (Index j = 0; j < c.levels; ++j) {
      const std::string lp = p + "down" + std::to_string(j) + ".";
      u.down_blocks.push_back(ResBlock<T>::create(ps, lp + "res.", prev, ch[j], td, rng));
      u.image_w_down.push_back(nn::he_param<T>(ps, lp + "image.weight", {ch[j], c.embed_dim}, c.embed_dim, rng));
      u.image_b_down.push_back(nn::zero_param<T>(ps, lp + "image.bias", {ch[j]}));
      u.attn_down.push_back(DepthAttention<T>::create(ps, lp + "attn.", ch[j], c.attention_dim, c.kv_dim, rng));
      if (j + 1 < c.levels) {
        u.down_w.push_back(nn::he_param<T>(ps, lp + "downsample.weight", {ch[j], ch[j], 3, 3}, 9 * ch[j], rng));
        u.down_b.push_back(nn::zero_param<T>(ps, lp + "downsample.bias", {ch[j]}));
      }
      prev = ch[j];
    }
    u.mid = ResBlock<T>::create(ps, p + "mid.", prev, prev, td, rng);
    for (Index j = c.levels - 1; j >= 0; --j) {
      const std::string lp = p + "up" + std::to_string(j) + ".";
      u.up_blocks.push_back(ResBlock<T>::create(ps, lp + "res.", 2 * ch[j], ch[j], td, rng));
      u.image_w_up.push_back(nn::he_param<T>(ps, lp + "image.weight", {ch[j], c.embed_dim}, c.embed_dim, rng));
      u.image_b_up.push_back(nn::zero_param<T>(ps, lp + "image.bias", {ch[j]}));
      u.attn_up.push_back(DepthAttention<T>::create(ps, lp + "attn.", ch[j], c.attention_dim, c.kv_dim, rng));
      if (j > 0) {
        u.up_w.push_back(nn::he_param<T>(ps, lp + "upsample.weight", {ch[j - 1], ch[j], 3, 3}, 9 * ch[j], rng));
        u.up_b.push_back(nn::zero_param<T>(ps, lp + "upsample.bias", {ch[j - 1]}));
      }
    }
    u.out_norm = Norm<T>::create(ps, p + "out_norm.", ch[0]);
    u.out_w = nn::zero_param<T>(ps, p + "out.weight", {3, ch[0], 3, 3});
    u.out_b = nn::zero_param<T>(ps, p + "out.bias", {3});
    return u;
  }

  Var<T> time_embedding(Index t) const {
    auto f = Var<T>::constant(timestep_features<T>(t, config.time_dim));
    return ad::linear(ad::silu(ad::linear(f, time_w1, time_b1)), time_w2, time_b2);
  }

  /// x_t: [N, 3, H, W]; image_embedding: [1, embed_dim]; frustum[j]: [N, d_r, D_j, H / 2^j, W / 2^j].
  Var<T> operator()(const Var<T>& x_t, Index t, const Var<T>& image_embedding, const std::vector<Var<T>>& frustum) const {
    if (static_cast<Index>(frustum.size()) != config.levels) {
      throw ConfigError("expected " + std::to_string(config.levels) + " frustum levels, got " +
                        std::to_string(frustum.size()));
    }
    if (x_t.shape().size() != 4 || x_t.dim(1) != 3) throw ConfigError("denoiser input must be [N, 3, H, W]");
    const auto temb = time_embedding(t);
    auto add_image = [&](const Var<T>& h, const Var<T>& w, const Var<T>& b) {
      return ad::add_channel_bias(h, ad::reshape(ad::linear(image_embedding, w, b), {w.dim(0)}));
    };
    Var<T> h = ad::conv2d(x_t, in_w, in_b);
    std::vector<Var<T>> skips;
    for (Index j = 0; j < config.levels; ++j) {
      const auto sj = static_cast<std::size_t>(j);
      h = down_blocks[sj](h, temb);
      h = add_image(h, image_w_down[sj], image_b_down[sj]);
      h = attn_down[sj](h, frustum[sj]);
      skips.push_back(h);
      if (j + 1 < config.levels) h = ad::conv2d(h, down_w[sj], down_b[sj], 2, 1);
    }
    h = mid(h, temb);
    for (Index k = 0; k < config.levels; ++k) {
      const Index j = config.levels - 1 - k;
      const auto sk = static_cast<std::size_t>(k);
      h = up_blocks[sk](ad::concat_channels(h, skips[static_cast<std::size_t>(j)]), temb);
      h = add_image(h, image_w_up[sk], image_b_up[sk]);
      h = attn_up[sk](h, frustum[static_cast<std::size_t>(j)]);
      if (j > 0) h = ad::conv2d(ad::upsample2x(h), up_w[sk], up_b[sk]);
    }
    return ad::conv2d(ad::silu(out_norm(h)), out_w, out_b);
  }
};

}  // namespace morphdiff::unet
