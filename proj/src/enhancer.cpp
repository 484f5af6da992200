#include "gbe/enhancer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace gbe {

std::string norm_kind_name(NormKind k) {
  switch (k) {
    case NormKind::rad: return "rad";
    case NormKind::group_affine: return "group_affine";
    case NormKind::instance: return "instance";
    case NormKind::spade: return "spade";
  }
  return "?";
}

NormKind parse_norm_kind(const std::string& s) {
  for (NormKind k : {NormKind::rad, NormKind::group_affine, NormKind::instance, NormKind::spade}) {
    if (norm_kind_name(k) == s) return k;
  }
  throw ConfigError("unknown normalisation '" + s + "'");
}

int group_count(int channels, int max_groups) {
  for (int g = std::min(channels, max_groups); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

RadModule::RadModule(int g_channels, int x_channels, int n_blocks, int max_groups, Rng& rng)
    : to_gamma(g_channels, x_channels, 1, 1, rng), to_beta(g_channels, x_channels, 1, 1, rng),
      groups(group_count(x_channels, max_groups)) {
  for (int i = 0; i < n_blocks; ++i) blocks.emplace_back(g_channels, g_channels, 1, rng);
  // Start close to plain normalisation: gamma near 1, beta near 0.
  to_gamma.weight.mutable_value() *= 0.1;
  to_beta.weight.mutable_value() *= 0.1;
  to_gamma.bias.mutable_value().fill(1.0);
}

std::pair<Var, Var> RadModule::modulation(const Var& g) {
  Var h = g;
  for (auto& b : blocks) h = b.forward(h);
  return {to_gamma.forward(h), to_beta.forward(h)};
}

Var RadModule::forward(const Var& x, const Var& g) {
  if (x.shape().h != g.shape().h || x.shape().w != g.shape().w) {
    throw ShapeError("RAD: image features " + x.shape().str() + " vs G-buffer features " + g.shape().str());
  }
  auto [gamma, beta] = modulation(g);
  return add(mul(gamma, group_norm(x, groups)), beta);
}

void RadModule::collect(ParamSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(ps, prefix + ".block" + std::to_string(i));
  to_gamma.collect(ps, prefix + ".gamma");
  to_beta.collect(ps, prefix + ".beta");
}

Var rad_forward(const Var& x, const Var& g, RadModule& m) { return m.forward(x, g); }

NormLayer::NormLayer(NormKind kind, int channels, int scale, int g_channels, int rad_blocks, int spade_hidden,
                     int max_groups, Rng& rng)
    : kind_(kind), scale_(scale) {
  switch (kind) {
    case NormKind::rad:
      rad = RadModule(g_channels, channels, rad_blocks, max_groups, rng);
      groups_ = rad.groups;
      break;
    case NormKind::group_affine:
    case NormKind::instance:
      groups_ = kind == NormKind::instance ? channels : group_count(channels, max_groups);
      gamma = Var(Tensor({1, channels, 1, 1}, 1.0), true);
      beta = Var(Tensor({1, channels, 1, 1}), true);
      break;
    case NormKind::spade:
      groups_ = group_count(channels, max_groups);
      spade_shared = Conv2d(g_channels, spade_hidden, 3, 1, rng);
      spade_gamma = Conv2d(spade_hidden, channels, 3, 1, rng);
      spade_beta = Conv2d(spade_hidden, channels, 3, 1, rng);
      spade_gamma.weight.mutable_value() *= 0.1;
      spade_beta.weight.mutable_value() *= 0.1;
      spade_gamma.bias.mutable_value().fill(1.0);
      break;
  }
}

Var NormLayer::forward(const Var& x, const NormContext& ctx) {
  switch (kind_) {
    case NormKind::rad: {
      if (ctx.pyramid == nullptr) throw ConfigError("RAD normalisation needs encoded G-buffers");
      const auto it = ctx.pyramid->find(scale_);
      if (it == ctx.pyramid->end()) {
        throw ConfigError("G-buffer feature pyramid lacks scale 1/" + std::to_string(scale_));
      }
      return rad.forward(x, it->second);
    }
    case NormKind::group_affine:
    case NormKind::instance:
      return channel_affine(group_norm(x, groups_), gamma, beta);
    case NormKind::spade: {
      if (ctx.gbuffers == nullptr) throw ConfigError("SPADE normalisation needs G-buffers");
      const Var g = scale_ == 1 ? *ctx.gbuffers : avg_pool(*ctx.gbuffers, scale_);
      const Var h = relu(spade_shared.forward(g));
      return add(mul(spade_gamma.forward(h), group_norm(x, groups_)), spade_beta.forward(h));
    }
  }
  return x;
}

void NormLayer::collect(ParamSet& ps, const std::string& prefix) {
  switch (kind_) {
    case NormKind::rad: rad.collect(ps, prefix + ".rad"); break;
    case NormKind::group_affine:
    case NormKind::instance:
      ps.add(prefix + ".gamma", gamma);
      ps.add(prefix + ".beta", beta);
      break;
    case NormKind::spade:
      spade_shared.collect(ps, prefix + ".spade.shared");
      spade_gamma.collect(ps, prefix + ".spade.gamma");
      spade_beta.collect(ps, prefix + ".spade.beta");
      break;
  }
}

BasicBlock::BasicBlock(int channels, int scale, const std::function<NormLayer(int, int)>& make_norm, Rng& rng)
    : conv1(channels, channels, 3, 1, rng, false), conv2(channels, channels, 3, 1, rng, false),
      norm1(make_norm(channels, scale)), norm2(make_norm(channels, scale)) {}

Var BasicBlock::forward(const Var& x, const NormContext& ctx) {
  Var h = relu(norm1.forward(conv1.forward(x), ctx));
  h = norm2.forward(conv2.forward(h), ctx);
  return relu(add(h, x));
}

void BasicBlock::collect(ParamSet& ps, const std::string& prefix) {
  conv1.collect(ps, prefix + ".conv1");
  norm1.collect(ps, prefix + ".norm1");
  conv2.collect(ps, prefix + ".conv2");
  norm2.collect(ps, prefix + ".norm2");
}

void EnhancerConfig::validate() const {
  if (!(output_init_scale >= 0.0) || !std::isfinite(output_init_scale)) {
    throw ConfigError("output_init_scale must be a finite non-negative number");
  }
  if (scales.empty() || scales.size() != channels.size()) {
    throw ConfigError("enhancer needs one channel width per branch scale");
  }
  for (std::size_t b = 0; b < scales.size(); ++b) {
    if (scales[b] != (1 << b)) throw ConfigError("enhancer branch scales must be 1, 2, 4, ... in order");
    if (channels[b] <= 0) throw ConfigError("enhancer channel widths must be positive");
  }
  if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be at least 1");
  if (rad_blocks < 0) throw ConfigError("rad_blocks must be non-negative");
  if (in_channels < 3) throw ConfigError("enhancer input needs at least the three image channels");
}

Enhancer::Enhancer(const EnhancerConfig& cfg, const std::vector<int>& g_channels, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int nb = static_cast<int>(cfg_.scales.size());
  if (cfg_.norm == NormKind::rad && static_cast<int>(g_channels.size()) != nb) {
    throw ConfigError("RAD trunk needs an encoded G-buffer width for every branch");
  }
  auto make_norm = [&](int channels, int scale) {
    const int b = std::bit_width(static_cast<unsigned>(scale)) - 1;
    int gc = 0;
    if (cfg_.norm == NormKind::rad) gc = g_channels[static_cast<std::size_t>(b)];
    if (cfg_.norm == NormKind::spade) gc = 14;
    return NormLayer(cfg_.norm, channels, scale, gc, cfg_.rad_blocks, cfg_.spade_hidden, cfg_.max_groups, rng);
  };
  const auto& ch = cfg_.channels;
  stem_conv_ = Conv2d(cfg_.in_channels, ch[0], 3, 1, rng, false);
  stem_norm_ = make_norm(ch[0], 1);
  for (int s = 0; s < nb; ++s) {
    Stage st;
    for (int b = 0; b <= s; ++b) {
      std::vector<BasicBlock> blocks;
      for (int k = 0; k < cfg_.blocks_per_stage; ++k) blocks.emplace_back(ch[b], cfg_.scales[b], make_norm, rng);
      st.branches.push_back(std::move(blocks));
    }
    if (s > 0) {
      for (int i = 0; i <= s; ++i) {
        for (int j = 0; j <= s; ++j) {
          if (i == j) continue;
          Fuse f{j, i, {}};
          if (j > i) {
            f.convs.emplace_back(ch[j], ch[i], 1, 1, rng);
          } else {
            for (int k = j; k < i; ++k) f.convs.emplace_back(ch[j], k + 1 == i ? ch[i] : ch[j], 3, 2, rng);
          }
          st.fuses.push_back(std::move(f));
        }
      }
    }
    stages_.push_back(std::move(st));
    if (s + 1 < nb) transitions_.push_back({Conv2d(ch[s], ch[s + 1], 3, 2, rng, false), make_norm(ch[s + 1], cfg_.scales[s + 1])});
  }
  int total = 0;
  for (int c : ch) total += c;
  head1_ = Conv2d(total, ch[0], 1, 1, rng);
  head2_ = Conv2d(ch[0], 3, 3, 1, rng);
  head2_.weight.mutable_value() *= cfg_.output_init_scale;
  // Start near the identity mapping of the residual output.
  head2_.weight.mutable_value() *= 0.1;
}

std::pair<int, int> Enhancer::stem_resolution(int h, int w) const {
  return {(h + 2 * (stem_conv_.kernel() / 2) - stem_conv_.kernel()) / stem_conv_.stride() + 1,
          (w + 2 * (stem_conv_.kernel() / 2) - stem_conv_.kernel()) / stem_conv_.stride() + 1};
}

Var Enhancer::forward(const Var& input, const NormContext& ctx) {
  const Shape s = input.shape();
  if (s.c != cfg_.in_channels) {
    throw ShapeError("enhancer expects " + std::to_string(cfg_.in_channels) + " input channels, got " + s.str());
  }
  const int last = cfg_.scales.back();
  if (s.h % last != 0 || s.w % last != 0) throw ShapeError("input size must be divisible by " + std::to_string(last));

  std::vector<Var> xs{relu(stem_norm_.forward(stem_conv_.forward(input), ctx))};
  for (std::size_t si = 0; si < stages_.size(); ++si) {
    Stage& st = stages_[si];
    for (std::size_t b = 0; b < st.branches.size(); ++b) {
      for (auto& blk : st.branches[b]) xs[b] = blk.forward(xs[b], ctx);
    }
    if (!st.fuses.empty()) {
      std::vector<std::vector<Var>> terms(xs.size());
      for (std::size_t i = 0; i < xs.size(); ++i) terms[i].push_back(xs[i]);
      for (auto& f : st.fuses) {
        Var t = xs[static_cast<std::size_t>(f.from)];
        if (f.from > f.to) {
          const Shape target = xs[static_cast<std::size_t>(f.to)].shape();
          t = resize_bilinear(f.convs[0].forward(t), target.h, target.w);
        } else {
          for (std::size_t k = 0; k < f.convs.size(); ++k) {
            t = f.convs[k].forward(t);
            if (k + 1 < f.convs.size()) t = relu(t);
          }
        }
        terms[static_cast<std::size_t>(f.to)].push_back(t);
      }
      for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = relu(add_n(terms[i]));
    }
    if (si < transitions_.size()) {
      Transition& tr = transitions_[si];
      xs.push_back(relu(tr.norm.forward(tr.conv.forward(xs.back()), ctx)));
    }
  }
  std::vector<Var> up;
  for (const auto& x : xs) up.push_back(x.shape().h == s.h ? x : resize_bilinear(x, s.h, s.w));
  const Var h = head2_.forward(relu(head1_.forward(concat(up))));
  const Var image = input.shape().c == 3 ? input : slice_channels(input, 0, 3);
  return clamp01(add(image, h));
}

void Enhancer::collect(ParamSet& ps, const std::string& prefix) {
  stem_conv_.collect(ps, prefix + ".stem.conv");
  stem_norm_.collect(ps, prefix + ".stem.norm");
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s);
    for (std::size_t b = 0; b < stages_[s].branches.size(); ++b) {
      for (std::size_t k = 0; k < stages_[s].branches[b].size(); ++k) {
        stages_[s].branches[b][k].collect(ps, sp + ".branch" + std::to_string(b) + ".block" + std::to_string(k));
      }
    }
    for (auto& f : stages_[s].fuses) {
      for (std::size_t k = 0; k < f.convs.size(); ++k) {
        f.convs[k].collect(ps, sp + ".fuse" + std::to_string(f.from) + "to" + std::to_string(f.to) + ".conv" +
                                   std::to_string(k));
      }
    }
  }
  for (std::size_t t = 0; t < transitions_.size(); ++t) {
    transitions_[t].conv.collect(ps, prefix + ".transition" + std::to_string(t + 1) + ".conv");
    transitions_[t].norm.collect(ps, prefix + ".transition" + std::to_string(t + 1) + ".norm");
  }
  head1_.collect(ps, prefix + ".head.conv1");
  head2_.collect(ps, prefix + ".head.conv2");
}

std::string generator_variant_name(GeneratorVariant v) {
  switch (v) {
    case GeneratorVariant::rad: return "rad";
    case GeneratorVariant::concat: return "concat";
    case GeneratorVariant::no_gbuffer: return "no_gbuffer";
    case GeneratorVariant::spade: return "spade";
    case GeneratorVariant::group_affine: return "group_affine";
  }
  return "?";
}

GeneratorVariant parse_generator_variant(const std::string& s) {
  for (auto v : {GeneratorVariant::rad, GeneratorVariant::concat, GeneratorVariant::no_gbuffer, GeneratorVariant::spade,
                 GeneratorVariant::group_affine}) {
    if (generator_variant_name(v) == s) return v;
  }
  throw ConfigError("unknown generator variant '" + s + "'");
}

Generator::Generator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
  EnhancerConfig& ec = cfg_.enhancer;
  std::vector<int> g_channels;
  ec.in_channels = 3;
  switch (cfg_.variant) {
    case GeneratorVariant::rad: {
      if (cfg_.encoder.scales != ec.scales) {
        throw ConfigError("G-buffer encoder scales must equal the enhancer branch scales");
      }
      encoder.emplace(cfg_.encoder, rng);
      for (int s : ec.scales) g_channels.push_back(cfg_.encoder.width_at_scale(s));
      ec.norm = NormKind::rad;
      break;
    }
    case GeneratorVariant::concat:
    case GeneratorVariant::no_gbuffer:
      ec.norm = NormKind::instance;
      ec.in_channels = 3 + cfg_.encoder.in_channels;
      break;
    case GeneratorVariant::spade: ec.norm = NormKind::spade; break;
    case GeneratorVariant::group_affine: ec.norm = NormKind::group_affine; break;
  }
  trunk = Enhancer(ec, g_channels, rng);
}

Var Generator::forward(const Var& image, const Var& gbuffers, const Tensor& masks) {
  if (image.shape().c != 3) throw ShapeError("generator expects an RGB image, got " + image.shape().str());
  NormContext ctx;
  ctx.height = image.shape().h;
  ctx.width = image.shape().w;
  ctx.gbuffers = &gbuffers;
  switch (cfg_.variant) {
    case GeneratorVariant::rad: {
      const FeaturePyramid pyr = encoder->forward(gbuffers, masks);
      ctx.pyramid = &pyr;
      return trunk.forward(image, ctx);
    }
    case GeneratorVariant::concat: {
      const Var parts[] = {image, gbuffers};
      return trunk.forward(concat(parts), ctx);
    }
    case GeneratorVariant::no_gbuffer: {
      const Var parts[] = {image, Var(Tensor(gbuffers.shape()))};
      return trunk.forward(concat(parts), ctx);
    }
    case GeneratorVariant::spade:
    case GeneratorVariant::group_affine: return trunk.forward(image, ctx);
  }
  return image;
}

void Generator::collect(ParamSet& ps, const std::string& prefix) {
  if (encoder) encoder->collect(ps, prefix + ".encoder");
  trunk.collect(ps, prefix + ".trunk");
}

}  // namespace gbe
