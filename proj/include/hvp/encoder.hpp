#ifndef HVP_ENCODER_HPP
#define HVP_ENCODER_HPP

#include <utility>
#include <vector>

#include "hvp/config.hpp"
#include "hvp/graph.hpp"

namespace hvp {

struct EncoderLayerParams {
  Param wq, bq, wk, bk, wv, bv, wo, bo;
  Param wphi;  // [d, 2d], key half first; no bias
  Param ln1_gain, ln1_shift;
  Param w1, b1, w2, b2;
  Param ln2_gain, ln2_shift;

  EncoderLayerParams(const Config& cfg, int layer, std::mt19937_64& init_rng);
  void collect(std::vector<Param*>& out);
};

struct EncoderParams {
  Param tok_table;  // [vocab, d]
  Param pos_table;  // [max_len, d]
  Param emb_ln_gain, emb_ln_shift;
  std::vector<EncoderLayerParams> layers;

  EncoderParams(const Config& cfg, std::mt19937_64& init_rng);
  void collect(std::vector<Param*>& out);
};

struct AttnRecord {
  int example_id = 0;
  int layer = 0;  // 1-based
  int head = 0;
  int token_index = 0;
  int prefix_cell_index = 0;
  double weight = 0.0;
};

// Token + learned position embeddings, then layer_norm and dropout.
Var embed_tokens(Graph& g, EncoderParams& params, const std::vector<int>& ids, const Config& cfg);

// {phi_k, phi_v} = bank * W_phi, split in halves, key half first.
std::pair<Var, Var> project_prefix(Graph& g, Var bank, int layer, EncoderParams& params,
                                   const Config& cfg);

// Multi-head attention where keys become [phi_k; K] and values [phi_v; V].
// Invalid phi handles mean an empty prefix (plain self-attention). Scale is
// sqrt(d/heads) per head.
Var prefix_attention(Graph& g, Var x, Var phi_k, Var phi_v, int layer, EncoderParams& params,
                     const Config& cfg, int example_id, std::vector<AttnRecord>* trace);

// Full encoder stack over pre-built per-layer banks (invalid Var = no prefix
// at that layer). Returns hidden states H^1..H^L; the query length never
// changes.
std::vector<Var> encoder_forward(Graph& g, EncoderParams& params, Var x0,
                                 const std::vector<Var>& banks, const Config& cfg, int example_id,
                                 std::vector<AttnRecord>* trace);

}  // namespace hvp

#endif
