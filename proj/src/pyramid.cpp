#include "hvp/pyramid.hpp"

#include <cmath>

#include "hvp/rng.hpp"

namespace hvp {

namespace {

Tensor normal_init(std::mt19937_64& rng, std::vector<int> shape, double std) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng_normal(rng) * std;
  return t;
}

// Conv kernels use He scaling: with no normalization between blocks, a flat
// small std collapses activations exponentially with depth and the fusion
// path sees only numerical dust.
Tensor conv_init(std::mt19937_64& rng, std::vector<int> shape) {
  int fan_in = shape[1] * shape[2] * shape[3];
  return normal_init(rng, shape, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace

BackboneParams::BackboneParams(const Config& cfg, std::mt19937_64& rng)
    : stem_kernel("backbone.stem.kernel", conv_init(rng, {cfg.block_channels[0], 3, 3, 3}), true),
      stem_bias("backbone.stem.bias", Tensor::zeros({cfg.block_channels[0]}), false) {
  for (int i = 0; i < cfg.num_blocks; ++i) {
    int in_ch = i == 0 ? cfg.block_channels[0] : cfg.block_channels[static_cast<size_t>(i - 1)];
    int out_ch = cfg.block_channels[static_cast<size_t>(i)];
    std::string tag = "backbone.block" + std::to_string(i);
    block_kernels.emplace_back(tag + ".kernel", conv_init(rng, {out_ch, in_ch, 3, 3}), true);
    block_biases.emplace_back(tag + ".bias", Tensor::zeros({out_ch}), false);
  }
  for (int i = 0; i < cfg.num_blocks; ++i) {
    int ch = cfg.block_channels[static_cast<size_t>(i)];
    std::string tag = "pyramid.map" + std::to_string(i);
    map_kernels.emplace_back(tag + ".kernel", conv_init(rng, {cfg.d_model, ch, 1, 1}), true);
    map_biases.emplace_back(tag + ".bias", Tensor::zeros({cfg.d_model}), false);
  }
}

void BackboneParams::collect(std::vector<Param*>& out) {
  out.push_back(&stem_kernel);
  out.push_back(&stem_bias);
  for (size_t i = 0; i < block_kernels.size(); ++i) {
    out.push_back(&block_kernels[i]);
    out.push_back(&block_biases[i]);
  }
  for (size_t i = 0; i < map_kernels.size(); ++i) {
    out.push_back(&map_kernels[i]);
    out.push_back(&map_biases[i]);
  }
}

int block_spatial(int image_size, int block_index) {
  int s = image_size / 2;  // stem
  for (int i = 0; i <= block_index; ++i) s /= 2;
  return s;
}

std::vector<Var> backbone_forward(Graph& g, BackboneParams& params, const Tensor& image,
                                  const Config& cfg) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.image_size) {
    throw std::invalid_argument("backbone_forward: expected image [3," +
                                std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                                "], got " + shape_str(image.shape));
  }
  Var x = g.conv2d(g.constant(image), g.param(params.stem_kernel), g.param(params.stem_bias), 2, 1);
  std::vector<Var> maps;
  for (int i = 0; i < cfg.num_blocks; ++i) {
    x = g.conv2d(x, g.param(params.block_kernels[static_cast<size_t>(i)]),
                 g.param(params.block_biases[static_cast<size_t>(i)]), 2, 1);
    x = g.leaky_relu(x, cfg.leaky_slope);
    maps.push_back(x);
  }
  return maps;
}

std::vector<Var> map_pyramid(Graph& g, BackboneParams& params, const std::vector<Var>& maps,
                             const Config& cfg) {
  if (static_cast<int>(maps.size()) != cfg.num_blocks) {
    throw std::invalid_argument("map_pyramid: expected " + std::to_string(cfg.num_blocks) + " blocks");
  }
  int target_h = g.value(maps.back()).dim(1);
  int target_w = g.value(maps.back()).dim(2);
  std::vector<Var> out;
  for (int i = 0; i < cfg.num_blocks; ++i) {
    Var f = maps[static_cast<size_t>(i)];
    int h = g.value(f).dim(1), w = g.value(f).dim(2);
    if (h < target_h || w < target_w) {
      throw ConfigError("map_pyramid: block " + std::to_string(i) + " spatial " + std::to_string(h) +
                        "x" + std::to_string(w) + " smaller than target " + std::to_string(target_h) +
                        "x" + std::to_string(target_w));
    }
    if (h != target_h || w != target_w) f = g.avg_pool2d(f, target_h, target_w);
    out.push_back(g.conv2d(f, g.param(params.map_kernels[static_cast<size_t>(i)]),
                           g.param(params.map_biases[static_cast<size_t>(i)]), 1, 0));
  }
  return out;
}

}  // namespace hvp
