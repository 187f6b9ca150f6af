#include "hvp/gate.hpp"

#include "hvp/rng.hpp"

namespace hvp {

namespace {

Tensor normal_init(std::mt19937_64& rng, std::vector<int> shape, double std) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng_normal(rng) * std;
  return t;
}

}  // namespace

GateParams::GateParams(const Config& cfg, std::mt19937_64& rng) {
  for (int l = 0; l < cfg.layers; ++l) {
    std::string tag = "gate.layer" + std::to_string(l);
    weights.emplace_back(tag + ".weight", normal_init(rng, {cfg.d_model, cfg.num_blocks}, cfg.init_std),
                         true);
    biases.emplace_back(tag + ".bias", Tensor::zeros({cfg.num_blocks}), false);
  }
}

void GateParams::collect(std::vector<Param*>& out) {
  for (size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
}

Var gate_logits(Graph& g, const std::vector<Var>& features, int layer, GateParams& params,
                const Config& cfg) {
  if (layer < 1 || layer > cfg.layers) {
    throw std::invalid_argument("gate_logits: layer " + std::to_string(layer) + " out of range 1.." +
                                std::to_string(cfg.layers));
  }
  if (features.empty()) throw std::invalid_argument("gate_logits: no features");
  Var acc;
  for (Var f : features) {
    Var pooled = g.reshape(g.avg_pool2d(f, 1, 1), {1, cfg.d_model});
    acc = acc.valid() ? g.add(acc, pooled) : pooled;
  }
  Var mean_pooled = g.scale(acc, 1.0 / static_cast<double>(features.size()));
  Var lin = g.add_rowvec(g.matmul(mean_pooled, g.param(params.weights[static_cast<size_t>(layer - 1)])),
                         g.param(params.biases[static_cast<size_t>(layer - 1)]));
  return g.leaky_relu(lin, cfg.leaky_slope);
}

Var gate_probs(Graph& g, Var logits) { return g.softmax_rows(logits); }

Var block_rows(Graph& g, const std::vector<Var>& features, int index) {
  Var f = features[static_cast<size_t>(index)];
  int d = g.value(f).dim(0);
  int hw = g.value(f).dim(1) * g.value(f).dim(2);
  return g.transpose(g.reshape(f, {d, hw}));
}

Var aggregate(Graph& g, const std::vector<Var>& features, Var probs) {
  Var acc;
  for (size_t i = 0; i < features.size(); ++i) {
    Var weighted = g.scale_by(g.slice(probs, 1, static_cast<int>(i), 1),
                              block_rows(g, features, static_cast<int>(i)));
    acc = acc.valid() ? g.add(acc, weighted) : weighted;
  }
  return acc;
}

int one_to_three_block(int layer, int num_layers, int num_blocks) {
  // ceil(layer / (L/c)) = ceil(layer*c/L), all 1-based.
  return (layer * num_blocks + num_layers - 1) / num_layers;
}

Var build_prefix_bank(Graph& g, const std::vector<std::vector<Var>>& bundle_features, int layer,
                      GateParams& params, FusionMode mode, const Config& cfg, int example_id,
                      std::vector<GateRecord>* trace) {
  if (bundle_features.empty()) throw std::invalid_argument("build_prefix_bank: empty bundle");
  if (mode == FusionMode::only_obj && bundle_features.size() < 2) {
    throw ConfigError("only_obj mode requires at least one object crop");
  }
  size_t first = mode == FusionMode::only_obj ? 1 : 0;
  std::vector<Var> segments;
  for (size_t i = first; i < bundle_features.size(); ++i) {
    const std::vector<Var>& feats = bundle_features[i];
    Var seg;
    switch (mode) {
      case FusionMode::flat:
        seg = block_rows(g, feats, static_cast<int>(feats.size()) - 1);
        break;
      case FusionMode::one_to_three: {
        int block = one_to_three_block(layer, cfg.layers, cfg.num_blocks);
        seg = block_rows(g, feats, block - 1);
        break;
      }
      case FusionMode::hierarchical:
      case FusionMode::only_obj: {
        Var probs = gate_probs(g, gate_logits(g, feats, layer, params, cfg));
        if (trace != nullptr) {
          GateRecord rec;
          rec.example_id = example_id;
          rec.layer = layer;
          rec.input_index = static_cast<int>(i);
          rec.probs = g.value(probs).data;
          trace->push_back(std::move(rec));
        }
        seg = aggregate(g, feats, probs);
        break;
      }
      default:
        throw ConfigError("build_prefix_bank: mode " + mode_name(mode) + " has no prefix bank");
    }
    segments.push_back(seg);
  }
  return segments.size() == 1 ? segments[0] : g.concat(segments, 0);
}

}  // namespace hvp
