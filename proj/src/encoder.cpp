#include "gbe/encoder.hpp"

#include <algorithm>
#include <bit>

namespace gbe {

ResidualBlock::ResidualBlock(int cin, int cout, int stride, Rng& rng)
    : conv1(cin, cout, 3, stride, rng, true, true), conv2(cout, cout, 3, 1, rng, true, true) {
  has_proj_ = cin != cout || stride != 1;
  if (has_proj_) proj = Conv2d(cin, cout, 1, stride, rng, true, true);
}

Var ResidualBlock::forward(const Var& x) {
  const Var main = conv2.forward(relu(conv1.forward(x)));
  const Var skip = has_proj_ ? proj.forward(x) : x;
  return add(main, skip);
}

void ResidualBlock::collect(ParamSet& ps, const std::string& prefix) {
  conv1.collect(ps, prefix + ".conv1");
  conv2.collect(ps, prefix + ".conv2");
  if (has_proj_) proj.collect(ps, prefix + ".proj");
}

int EncoderConfig::levels() const { return scales.empty() ? 0 : std::bit_width(static_cast<unsigned>(scales.back())); }

int EncoderConfig::width(int level) const {
  if (!channels.empty()) return channels.at(static_cast<std::size_t>(level));
  return base_channels << level;
}

int EncoderConfig::width_at_scale(int scale) const { return width(std::bit_width(static_cast<unsigned>(scale)) - 1); }

void EncoderConfig::validate() const {
  if (in_channels <= 0 || n_streams <= 0 || base_channels <= 0) throw ConfigError("encoder sizes must be positive");
  if (scales.empty()) throw ConfigError("encoder needs at least one output scale");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    const int s = scales[i];
    if (s <= 0 || (s & (s - 1)) != 0 || s > 8) throw ConfigError("encoder scales must be 1, 2, 4 or 8");
    if (i > 0 && s <= scales[i - 1]) throw ConfigError("encoder scales must be strictly ascending");
  }
  if (!channels.empty() && static_cast<int>(channels.size()) < levels()) {
    throw ConfigError("encoder channels must list a width for every level up to the coarsest scale");
  }
}

Tensor downsample_masks(const Tensor& masks, int h, int w) {
  const Shape s = masks.shape();
  if (s.h == h && s.w == w) return masks;
  if (h <= 0 || w <= 0 || s.h % h != 0 || s.w % w != 0 || s.h / h != s.w / w) {
    throw ShapeError("mask resolution " + s.str() + " does not reduce to " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  const int k = s.h / h;
  Tensor out({s.n, s.c, h, w});
  const double inv = 1.0 / (k * k);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) acc += masks.at(n, c, y * k + dy, x * k + dx);
          }
          out.at(n, c, y, x) = acc * inv;
        }
      }
    }
  }
  return out;
}

GBufferEncoder::GBufferEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int c0 = cfg_.width(0);
  for (int s = 0; s < cfg_.n_streams; ++s) {
    streams.push_back({ResidualBlock(cfg_.in_channels, c0, 1, rng), ResidualBlock(c0, c0, 1, rng)});
  }
  for (int level = 0; level < cfg_.levels(); ++level) {
    const int c = cfg_.width(level);
    if (level > 0) down_.emplace_back(cfg_.width(level - 1), c, 2, rng);
    refine_.emplace_back(c, c, 1, rng);
  }
}

FeaturePyramid GBufferEncoder::forward(const Var& gbuffers, const Tensor& masks) {
  const Shape s = gbuffers.shape();
  if (s.c != cfg_.in_channels) {
    throw ShapeError("encoder expects " + std::to_string(cfg_.in_channels) + " G-buffer channels, got " + s.str());
  }
  if (masks.shape().c != cfg_.n_streams) {
    throw ShapeError("encoder expects " + std::to_string(cfg_.n_streams) + " masks, got " + masks.shape().str());
  }
  std::vector<Var> feats;
  feats.reserve(streams.size());
  for (auto& st : streams) feats.push_back(st[1].forward(st[0].forward(gbuffers)));
  Var x = fuse_streams(feats, downsample_masks(masks, feats[0].shape().h, feats[0].shape().w));

  FeaturePyramid out;
  for (int level = 0; level < cfg_.levels(); ++level) {
    if (level > 0) x = down_[static_cast<std::size_t>(level - 1)].forward(x);
    x = refine_[static_cast<std::size_t>(level)].forward(x);
    const int scale = 1 << level;
    if (std::find(cfg_.scales.begin(), cfg_.scales.end(), scale) != cfg_.scales.end()) out[scale] = x;
  }
  return out;
}

void GBufferEncoder::collect(ParamSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < streams.size(); ++i) {
    streams[i][0].collect(ps, prefix + ".stream" + std::to_string(i) + ".block0");
    streams[i][1].collect(ps, prefix + ".stream" + std::to_string(i) + ".block1");
  }
  for (std::size_t i = 0; i < down_.size(); ++i) down_[i].collect(ps, prefix + ".down" + std::to_string(i + 1));
  for (std::size_t i = 0; i < refine_.size(); ++i) refine_[i].collect(ps, prefix + ".level" + std::to_string(i));
}

}  // namespace gbe
