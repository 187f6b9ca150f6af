#ifndef HVP_GATE_HPP
#define HVP_GATE_HPP

#include <vector>

#include "hvp/config.hpp"
#include "hvp/graph.hpp"

namespace hvp {

// Per-layer gate MLP W_l: d -> num_blocks, one independent set per layer,
// shared across the m+1 visual inputs of a layer.
struct GateParams {
  std::vector<Param> weights;  // layer l: [d, c]
  std::vector<Param> biases;   // layer l: [c]

  GateParams(const Config& cfg, std::mt19937_64& init_rng);
  void collect(std::vector<Param*>& out);
};

struct GateRecord {
  int example_id = 0;
  int layer = 0;        // 1-based
  int input_index = 0;  // 0 = global image, then objects
  std::vector<double> probs;
};

// Pooled-and-averaged features through W_l and leaky_relu; layer is 1-based.
Var gate_logits(Graph& g, const std::vector<Var>& features, int layer, GateParams& params,
                const Config& cfg);

Var gate_probs(Graph& g, Var logits);

// Flattens each block to [h*w, d] rows and mixes them by probs. probs holds
// one scalar per block, shape [1, c].
Var aggregate(Graph& g, const std::vector<Var>& features, Var probs);

// Rows of block `index` alone, flattened (the no-gate modes).
Var block_rows(Graph& g, const std::vector<Var>& features, int index);

// One layer's prefix bank from the bundle [global, o_1..o_m] of mapped
// features. Fusion modes select gating or fixed routing; only_obj drops the
// global segment but keeps hierarchical gating.
Var build_prefix_bank(Graph& g, const std::vector<std::vector<Var>>& bundle_features, int layer,
                      GateParams& params, FusionMode mode, const Config& cfg, int example_id,
                      std::vector<GateRecord>* trace);

// 1-based block chosen by the one_to_three routing rule for a 1-based layer.
int one_to_three_block(int layer, int num_layers, int num_blocks);

}  // namespace hvp

#endif
