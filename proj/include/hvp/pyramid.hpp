#ifndef HVP_PYRAMID_HPP
#define HVP_PYRAMID_HPP

#include <vector>

#include "hvp/config.hpp"
#include "hvp/graph.hpp"

namespace hvp {

// Stem + num_blocks stride-2 convolutions, shared by the global image and all
// object crops, plus the per-block 1x1 maps to transformer width.
struct BackboneParams {
  Param stem_kernel;  // [ch0, 3, 3, 3]
  Param stem_bias;    // [ch0]
  std::vector<Param> block_kernels;  // block i: [ch_i, ch_{i-1}, 3, 3] (block 0: ch0 -> ch0)
  std::vector<Param> block_biases;
  std::vector<Param> map_kernels;  // 1x1: [d, ch_i, 1, 1]
  std::vector<Param> map_biases;   // [d]

  BackboneParams(const Config& cfg, std::mt19937_64& init_rng);
  void collect(std::vector<Param*>& out);
};

// Spatial side of block i for a given image size: the stem halves once, then
// each block halves again.
int block_spatial(int image_size, int block_index);

// Pyramidal feature maps F_1..F_c, strictly decreasing spatial size.
std::vector<Var> backbone_forward(Graph& g, BackboneParams& params, const Tensor& image,
                                  const Config& cfg);

// V_c = conv1x1(F_c); V_i = conv1x1(avg_pool(F_i)) for i < c. All outputs
// [d, h_c, w_c].
std::vector<Var> map_pyramid(Graph& g, BackboneParams& params, const std::vector<Var>& maps,
                             const Config& cfg);

}  // namespace hvp

#endif
