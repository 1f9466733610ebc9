#include "casdiff/unet.hpp"

#include <algorithm>
#include <set>

#include "casdiff/image_ops.hpp"
#include "casdiff/ops.hpp"

namespace casdiff {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

int heads_for(int embed_dim) { return std::max(1, embed_dim / 16); }

}  // namespace

void UNetSpec::validate() const {
  check(!stages.empty(), "unet: at least one stage required");
  check(in_channels >= 1 && out_channels >= 1, "unet: channel counts must be positive");
  check(embed_dim >= 1 && heads >= 1 && norm_groups >= 1, "unet: embed_dim, heads, norm_groups must be positive");
  check(stages.front().channels % 2 == 0, "unet: stage-0 width must be even for the time embedding");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    check(st.channels >= 1 && st.res_blocks >= 1, "unet: stage " + std::to_string(s) + " needs channels and blocks");
    if (st.cross_attn || st.self_attn)
      check(st.channels % heads == 0, "unet: stage " + std::to_string(s) + " width not divisible by head count");
  }
  if (lowres_concat) check(scale_factor >= 1, "unet: scale_factor must be positive");
}

UNetSpec BaseUNetConfig::spec() const {
  validate();
  UNetSpec s;
  s.in_channels = in_channels;
  s.out_channels = in_channels;
  s.embed_dim = embed_dim;
  s.norm_groups = norm_groups;
  s.heads = heads_for(embed_dim);
  const std::set<int> cross(cross_attn_stages.begin(), cross_attn_stages.end());
  for (int i = 0; i < num_stages; ++i) {
    s.stages.push_back({base_width * channel_mult[static_cast<std::size_t>(i)], res_blocks_per_stage,
                        cross.count(i) > 0, false});
  }
  return s;
}

void BaseUNetConfig::validate() const {
  check(in_channels >= 1 && base_width >= 2, "base unet: bad widths");
  check(num_stages >= 1 && static_cast<int>(channel_mult.size()) == num_stages,
        "base unet: channel_mult must have num_stages entries");
  check(res_blocks_per_stage >= 1, "base unet: res_blocks_per_stage must be >= 1");
  for (int s : cross_attn_stages) check(s >= 0 && s < num_stages, "base unet: cross-attention stage out of range");
}

bool BaseUNetConfig::reference_topology() const {
  std::set<int> cross(cross_attn_stages.begin(), cross_attn_stages.end());
  return num_stages == 4 && res_blocks_per_stage == 3 && cross == std::set<int>{1, 2, 3};
}

UNetSpec SRUNetConfig::spec() const {
  validate();
  UNetSpec s;
  s.in_channels = in_channels;
  s.out_channels = image_channels();
  s.embed_dim = embed_dim;
  s.norm_groups = norm_groups;
  s.heads = heads_for(embed_dim);
  s.lowres_concat = true;
  s.scale_factor = scale_factor;
  s.aug_embedding = true;
  const std::set<int> self(self_attn_stages.begin(), self_attn_stages.end());
  for (int i = 0; i < num_stages; ++i) {
    const bool last = i == num_stages - 1;
    s.stages.push_back({base_width * channel_mult[static_cast<std::size_t>(i)], res_blocks[static_cast<std::size_t>(i)],
                        keep_text_cross_attn && last, self.count(i) > 0});
  }
  return s;
}

void SRUNetConfig::validate() const {
  check(in_channels >= 2 && in_channels % 2 == 0, "sr unet: in_channels must be twice the image channels");
  check(base_width >= 2 && num_stages >= 1, "sr unet: bad widths");
  check(static_cast<int>(channel_mult.size()) == num_stages && static_cast<int>(res_blocks.size()) == num_stages,
        "sr unet: channel_mult and res_blocks must have num_stages entries");
  for (int s : self_attn_stages) check(s == num_stages - 1, "sr unet: self-attention is only allowed in the last stage");
  check(scale_factor >= 1, "sr unet: scale_factor must be >= 1");
}

BaseUNetConfig base_desk_preset(int embed_dim) {
  BaseUNetConfig c;
  c.base_width = 16;
  c.channel_mult = {1, 2, 2, 2};
  c.embed_dim = embed_dim;
  return c;
}

SRUNetConfig sr_desk_preset(int embed_dim) {
  SRUNetConfig c;
  c.base_width = 16;
  c.channel_mult = {1, 2, 4};
  c.res_blocks = {1, 2, 2};
  c.num_stages = 3;
  c.self_attn_stages = {2};
  c.embed_dim = embed_dim;
  return c;
}

BaseUNetConfig base_tiny_preset(int embed_dim) {
  BaseUNetConfig c;
  c.base_width = 4;
  c.channel_mult = {1, 1, 1, 1};
  c.res_blocks_per_stage = 1;
  c.embed_dim = embed_dim;
  c.norm_groups = 2;
  return c;
}

SRUNetConfig sr_tiny_preset(int embed_dim) {
  SRUNetConfig c;
  c.base_width = 4;
  c.channel_mult = {1, 1, 1};
  c.res_blocks = {1, 1, 1};
  c.num_stages = 3;
  c.self_attn_stages = {2};
  c.embed_dim = embed_dim;
  c.norm_groups = 2;
  return c;
}

SRUNetConfig sr_full_scale_preset(int embed_dim) {
  SRUNetConfig c;
  c.base_width = 128;
  c.channel_mult = {1, 2, 4, 8};
  c.res_blocks = {2, 4, 8, 8};
  c.num_stages = 4;
  c.self_attn_stages = {3};
  c.embed_dim = embed_dim;
  c.norm_groups = 32;
  return c;
}

// --------------------------------------------------------------------------
// Serialization

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

void to_json(nlohmann::json& j, const BaseUNetConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},         {"base_width", c.base_width},
                     {"channel_mult", c.channel_mult},       {"num_stages", c.num_stages},
                     {"res_blocks_per_stage", c.res_blocks_per_stage}, {"cross_attn_stages", c.cross_attn_stages},
                     {"embed_dim", c.embed_dim},             {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, BaseUNetConfig& c) {
  reject_unknown(j,
                 {"in_channels", "base_width", "channel_mult", "num_stages", "res_blocks_per_stage",
                  "cross_attn_stages", "embed_dim", "norm_groups"},
                 "base_model");
  read_opt(j, "in_channels", c.in_channels);
  read_opt(j, "base_width", c.base_width);
  read_opt(j, "channel_mult", c.channel_mult);
  read_opt(j, "num_stages", c.num_stages);
  read_opt(j, "res_blocks_per_stage", c.res_blocks_per_stage);
  read_opt(j, "cross_attn_stages", c.cross_attn_stages);
  read_opt(j, "embed_dim", c.embed_dim);
  read_opt(j, "norm_groups", c.norm_groups);
}

void to_json(nlohmann::json& j, const SRUNetConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"base_width", c.base_width},
                     {"channel_mult", c.channel_mult},
                     {"res_blocks", c.res_blocks},
                     {"num_stages", c.num_stages},
                     {"self_attn_stages", c.self_attn_stages},
                     {"keep_text_cross_attn", c.keep_text_cross_attn},
                     {"embed_dim", c.embed_dim},
                     {"scale_factor", c.scale_factor},
                     {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, SRUNetConfig& c) {
  reject_unknown(j,
                 {"in_channels", "base_width", "channel_mult", "res_blocks", "num_stages", "self_attn_stages",
                  "keep_text_cross_attn", "embed_dim", "scale_factor", "norm_groups"},
                 "sr_model");
  read_opt(j, "in_channels", c.in_channels);
  read_opt(j, "base_width", c.base_width);
  read_opt(j, "channel_mult", c.channel_mult);
  read_opt(j, "res_blocks", c.res_blocks);
  read_opt(j, "num_stages", c.num_stages);
  read_opt(j, "self_attn_stages", c.self_attn_stages);
  read_opt(j, "keep_text_cross_attn", c.keep_text_cross_attn);
  read_opt(j, "embed_dim", c.embed_dim);
  read_opt(j, "scale_factor", c.scale_factor);
  read_opt(j, "norm_groups", c.norm_groups);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  if (c.kind == ModelKind::base)
    j = nlohmann::json{{"kind", "base"}, {"base", c.base}};
  else
    j = nlohmann::json{{"kind", "sr"}, {"sr", c.sr}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "base") {
    c.kind = ModelKind::base;
    c.base = j.at("base").get<BaseUNetConfig>();
  } else if (kind == "sr") {
    c.kind = ModelKind::sr;
    c.sr = j.at("sr").get<SRUNetConfig>();
  } else {
    throw ConfigError("unknown model kind '" + kind + "'");
  }
}

// --------------------------------------------------------------------------
// Model

namespace {

template <typename T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;
  Linear<T> emb_proj;
  Conv2d<T> skip;
  bool has_skip = false;

  ResBlock(ParameterStore<T>& p, const std::string& name, int cin, int cout, int temb, int groups)
      : norm1(p, name + ".norm1", cin, groups),
        norm2(p, name + ".norm2", cout, groups),
        conv1(p, name + ".conv1", cin, cout, 3),
        conv2(p, name + ".conv2", cout, cout, 3, 1, /*zero_init=*/true),
        emb_proj(p, name + ".emb", temb, cout),
        has_skip(cin != cout) {
    if (has_skip) skip = Conv2d<T>(p, name + ".skip", cin, cout, 1);
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& emb_act) const {
    Var<T> h = conv1(ops::silu(norm1(x)));
    h = ops::add_channel(h, emb_proj(emb_act));
    h = conv2(ops::silu(norm2(h)));
    return ops::add(has_skip ? skip(x) : x, h);
  }
};

// Text context for cross-attention: constant token matrix plus key masks.
template <typename T>
struct TextContext {
  Var<T> tokens;  // (N, L, E)
  std::vector<std::vector<int>> valid;
};

template <typename T>
struct AttnBlock {
  bool cross = false;
  int heads = 1;
  GroupNorm<T> norm;
  LayerNorm<T> text_norm;
  Linear<T> q, k, v, out;

  AttnBlock(ParameterStore<T>& p, const std::string& name, int channels, int embed_dim, int heads_, int groups,
            bool cross_)
      : cross(cross_),
        heads(heads_),
        norm(p, name + ".norm", channels, groups),
        q(p, name + ".q", channels, channels) {
    const int kv_in = cross ? embed_dim : channels;
    if (cross) text_norm = LayerNorm<T>(p, name + ".text_norm", embed_dim);
    k = Linear<T>(p, name + ".k", kv_in, channels);
    v = Linear<T>(p, name + ".v", kv_in, channels);
    out = Linear<T>(p, name + ".out", channels, channels, /*zero_init=*/true);
  }

  Var<T> operator()(const Var<T>& x, const TextContext<T>& text) const {
    const int h = x->value.dim(2), w = x->value.dim(3);
    Var<T> tok = ops::to_tokens(norm(x));
    Var<T> a;
    if (cross) {
      Var<T> ctx = text_norm(text.tokens);
      a = ops::attention(q(tok), k(ctx), v(ctx), heads, text.valid);
    } else {
      a = ops::attention(q(tok), k(tok), v(tok), heads);
    }
    return ops::add(x, ops::from_tokens(out(a), h, w));
  }
};

template <typename T>
struct Level {
  std::vector<ResBlock<T>> res;
  std::vector<std::vector<AttnBlock<T>>> attn;  // per res block
};

}  // namespace

template <typename T>
struct UNet<T>::Impl {
  UNetSpec spec;
  ParameterStore<T> store;
  Conv2d<T> conv_in;
  Linear<T> time1, time2, aug1, aug2, pooled_proj;
  LayerNorm<T> pooled_norm;
  std::vector<Level<T>> down, up;
  std::vector<Conv2d<T>> downsample, upsample;
  std::vector<ResBlock<T>> mid;
  std::vector<AttnBlock<T>> mid_attn;
  GroupNorm<T> out_norm;
  Conv2d<T> conv_out;

  Impl(const UNetSpec& s, std::uint64_t seed, bool allocate) : spec(s), store(seed, allocate) {
    spec.validate();
    auto& p = store;
    const int c0 = spec.stages.front().channels;
    const int temb = spec.time_embed_dim();
    const int groups = spec.norm_groups;
    const int stages = static_cast<int>(spec.stages.size());

    conv_in = Conv2d<T>(p, "conv_in", spec.in_channels, c0, 3);
    time1 = Linear<T>(p, "time.fc1", c0, temb);
    time2 = Linear<T>(p, "time.fc2", temb, temb);
    if (spec.aug_embedding) {
      aug1 = Linear<T>(p, "aug.fc1", c0, temb);
      aug2 = Linear<T>(p, "aug.fc2", temb, temb);
    }
    pooled_norm = LayerNorm<T>(p, "text_pool.norm", spec.embed_dim);
    pooled_proj = Linear<T>(p, "text_pool.proj", spec.embed_dim, temb, /*zero_init=*/true);

    auto make_attn = [&](const std::string& name, const StageSpec& st) {
      std::vector<AttnBlock<T>> blocks;
      if (st.self_attn)
        blocks.emplace_back(p, name + ".self", st.channels, spec.embed_dim, spec.heads, groups, false);
      if (st.cross_attn)
        blocks.emplace_back(p, name + ".cross", st.channels, spec.embed_dim, spec.heads, groups, true);
      return blocks;
    };

    int ch = c0;
    for (int s = 0; s < stages; ++s) {
      const auto& st = spec.stages[static_cast<std::size_t>(s)];
      Level<T> level;
      for (int b = 0; b < st.res_blocks; ++b) {
        const std::string name = "down." + std::to_string(s) + "." + std::to_string(b);
        level.res.emplace_back(p, name + ".res", ch, st.channels, temb, groups);
        level.attn.push_back(make_attn(name, st));
        ch = st.channels;
      }
      down.push_back(std::move(level));
      if (s + 1 < stages) downsample.emplace_back(p, "down." + std::to_string(s) + ".downsample", ch, ch, 3, 2);
    }

    const auto& last = spec.stages.back();
    mid.emplace_back(p, "mid.res1", ch, ch, temb, groups);
    mid_attn = make_attn("mid", last);
    mid.emplace_back(p, "mid.res2", ch, ch, temb, groups);

    for (int s = stages - 1; s >= 0; --s) {
      const auto& st = spec.stages[static_cast<std::size_t>(s)];
      Level<T> level;
      for (int b = 0; b < st.res_blocks; ++b) {
        const std::string name = "up." + std::to_string(s) + "." + std::to_string(b);
        level.res.emplace_back(p, name + ".res", ch + st.channels, st.channels, temb, groups);
        level.attn.push_back(make_attn(name, st));
        ch = st.channels;
      }
      up.push_back(std::move(level));
      if (s > 0) upsample.emplace_back(p, "up." + std::to_string(s) + ".upsample", ch, ch, 3);
    }

    out_norm = GroupNorm<T>(p, "out.norm", ch, groups);
    conv_out = Conv2d<T>(p, "out.conv", ch, spec.out_channels, 3, 1, /*zero_init=*/true);
  }

  Var<T> forward(const ModelInput<T>& in) const {
    const auto& zs = in.z.shape();
    check(zs.size() == 4, "unet: z must be (N,C,H,W)");
    const int n = zs[0], height = zs[2], width = zs[3];
    const int stages = static_cast<int>(spec.stages.size());
    const int div = 1 << (stages - 1);
    check(height % div == 0 && width % div == 0,
          "unet: spatial size " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by " +
              std::to_string(div));
    check(in.t.size() == static_cast<std::size_t>(n) && in.cond.size() == static_cast<std::size_t>(n),
          "unet: need one time and one conditioning per batch item");

    Var<T> x = constant(in.z);
    if (spec.lowres_concat) {
      check(in.lowres.has_value(), "unet: super-resolution model needs a low-resolution image");
      const auto& ls = in.lowres->shape();
      check(ls.size() == 4 && ls[0] == n && ls[2] * spec.scale_factor == height && ls[3] * spec.scale_factor == width,
            "unet: low-resolution image " + Tensor<T>::shape_string(ls) + " does not match scale factor " +
                std::to_string(spec.scale_factor) + " for " + Tensor<T>::shape_string(zs));
      x = ops::concat_channels(x, constant(resize_bilinear(*in.lowres, height, width)));
    }
    check(x->value.dim(1) == spec.in_channels, "unet: expected " + std::to_string(spec.in_channels) +
                                                   " input channels, got " + std::to_string(x->value.dim(1)));

    // Conditioning vector: timestep (+ augmentation level) + pooled text.
    const int c0 = spec.stages.front().channels;
    std::vector<double> tt(in.t.size());
    std::transform(in.t.begin(), in.t.end(), tt.begin(), [](double t) { return 1000.0 * t; });
    Var<T> emb = time2(ops::silu(time1(constant(sinusoidal_embedding<T>(tt, c0)))));
    if (spec.aug_embedding) {
      check(in.aug_level.size() == static_cast<std::size_t>(n), "unet: need one augmentation level per item");
      std::vector<double> aa(in.aug_level.size());
      std::transform(in.aug_level.begin(), in.aug_level.end(), aa.begin(), [](double a) { return 1000.0 * a; });
      emb = ops::add(emb, aug2(ops::silu(aug1(constant(sinusoidal_embedding<T>(aa, c0))))));
    }

    const int e = spec.embed_dim;
    int max_tokens = 0;
    for (const auto* c : in.cond) {
      check(c != nullptr && c->embed_dim == e, "unet: conditioning embed_dim mismatch");
      max_tokens = std::max(max_tokens, c->max_tokens);
    }
    Tensor<T> pooled({n, e});
    TextContext<T> text;
    Tensor<T> tokens({n, max_tokens, e});
    text.valid.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto& c = *in.cond[static_cast<std::size_t>(i)];
      for (int k = 0; k < e; ++k) pooled[static_cast<std::size_t>(i * e + k)] = static_cast<T>(c.pooled[static_cast<std::size_t>(k)]);
      for (int r = 0; r < c.max_tokens; ++r) {
        if (!c.mask[static_cast<std::size_t>(r)]) continue;
        text.valid[static_cast<std::size_t>(i)].push_back(r);
        for (int k = 0; k < e; ++k)
          tokens[(static_cast<std::size_t>(i) * max_tokens + r) * e + k] = static_cast<T>(c.row(r)[k]);
      }
    }
    text.tokens = constant(std::move(tokens));
    emb = ops::add(emb, pooled_proj(pooled_norm(constant(std::move(pooled)))));
    const Var<T> emb_act = ops::silu(emb);

    Var<T> h = conv_in(x);
    std::vector<Var<T>> skips;
    for (int s = 0; s < stages; ++s) {
      const auto& level = down[static_cast<std::size_t>(s)];
      for (std::size_t b = 0; b < level.res.size(); ++b) {
        h = level.res[b](h, emb_act);
        for (const auto& a : level.attn[b]) h = a(h, text);
        skips.push_back(h);
      }
      if (s + 1 < stages) h = downsample[static_cast<std::size_t>(s)](h);
    }

    h = mid[0](h, emb_act);
    for (const auto& a : mid_attn) h = a(h, text);
    h = mid[1](h, emb_act);

    for (int u = 0; u < stages; ++u) {
      const auto& level = up[static_cast<std::size_t>(u)];
      for (std::size_t b = 0; b < level.res.size(); ++b) {
        h = ops::concat_channels(h, skips.back());
        skips.pop_back();
        h = level.res[b](h, emb_act);
        for (const auto& a : level.attn[b]) h = a(h, text);
      }
      if (u + 1 < stages) h = upsample[static_cast<std::size_t>(u)](ops::upsample_nearest2x(h));
    }
    return conv_out(ops::silu(out_norm(h)));
  }
};

std::size_t parameter_count(const UNetSpec& spec) {
  const UNet<float>::Impl shapes_only(spec, 0, false);
  return shapes_only.store.count();
}

template <typename T>
UNet<T>::UNet(const UNetSpec& spec, std::uint64_t seed) : impl_(std::make_unique<Impl>(spec, seed, true)) {}

template <typename T>
UNet<T>::~UNet() = default;
template <typename T>
UNet<T>::UNet(UNet&&) noexcept = default;
template <typename T>
UNet<T>& UNet<T>::operator=(UNet&&) noexcept = default;

template <typename T>
Var<T> UNet<T>::forward(const ModelInput<T>& input) const {
  return impl_->forward(input);
}

template <typename T>
const UNetSpec& UNet<T>::spec() const {
  return impl_->spec;
}

template <typename T>
ParameterStore<T>& UNet<T>::params() {
  return impl_->store;
}

template <typename T>
const ParameterStore<T>& UNet<T>::params() const {
  return impl_->store;
}

template <typename T>
DenoiserModel<T> UNet<T>::denoiser() const {
  return {[this](const ModelInput<T>& in) { return forward(in); }, impl_->spec.lowres_concat};
}

template <typename T>
Tensor<T> base_denoise(const UNet<T>& model, const Tensor<T>& z, double t, const TextConditioning& cond) {
  check(z.rank() == 3, "base_denoise: z must be (C,H,W)");
  ModelInput<T> in;
  in.z = z.reshaped({1, z.dim(0), z.dim(1), z.dim(2)});
  in.t = {t};
  in.cond = {&cond};
  Tensor<T> out = model.forward(in)->value;
  return out.reshaped(z.shape());
}

template <typename T>
Tensor<T> sr_denoise(const UNet<T>& model, const Tensor<T>& z, double t, const TextConditioning& cond,
                     const AugmentedLowRes<T>& lr_cond) {
  check(z.rank() == 3 && lr_cond.image.rank() == 3, "sr_denoise: images must be (C,H,W)");
  const int f = model.spec().scale_factor;
  check(lr_cond.image.dim(1) * f == z.dim(1) && lr_cond.image.dim(2) * f == z.dim(2),
        "sr_denoise: low-resolution size does not match scale factor " + std::to_string(f));
  ModelInput<T> in;
  in.z = z.reshaped({1, z.dim(0), z.dim(1), z.dim(2)});
  in.t = {t};
  in.cond = {&cond};
  in.lowres = lr_cond.image.reshaped({1, lr_cond.image.dim(0), lr_cond.image.dim(1), lr_cond.image.dim(2)});
  in.aug_level = {lr_cond.aug_level};
  Tensor<T> out = model.forward(in)->value;
  return out.reshaped(z.shape());
}

template class UNet<float>;
template class UNet<double>;
template Tensor<float> base_denoise<float>(const UNet<float>&, const Tensor<float>&, double, const TextConditioning&);
template Tensor<double> base_denoise<double>(const UNet<double>&, const Tensor<double>&, double,
                                             const TextConditioning&);
template Tensor<float> sr_denoise<float>(const UNet<float>&, const Tensor<float>&, double, const TextConditioning&,
                                         const AugmentedLowRes<float>&);
template Tensor<double> sr_denoise<double>(const UNet<double>&, const Tensor<double>&, double,
                                           const TextConditioning&, const AugmentedLowRes<double>&);

}  // namespace casdiff
