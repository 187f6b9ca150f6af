#include "hvp/encoder.hpp"

#include <cmath>

#include "hvp/rng.hpp"

namespace hvp {

namespace {

Tensor normal_init(std::mt19937_64& rng, std::vector<int> shape, double std) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng_normal(rng) * std;
  return t;
}

std::string ltag(int layer) { return "encoder.layer" + std::to_string(layer); }

}  // namespace

EncoderLayerParams::EncoderLayerParams(const Config& cfg, int layer, std::mt19937_64& rng)
    : wq(ltag(layer) + ".wq", normal_init(rng, {cfg.d_model, cfg.d_model}, cfg.init_std), true),
      bq(ltag(layer) + ".bq", Tensor::zeros({cfg.d_model}), false),
      wk(ltag(layer) + ".wk", normal_init(rng, {cfg.d_model, cfg.d_model}, cfg.init_std), true),
      bk(ltag(layer) + ".bk", Tensor::zeros({cfg.d_model}), false),
      wv(ltag(layer) + ".wv", normal_init(rng, {cfg.d_model, cfg.d_model}, cfg.init_std), true),
      bv(ltag(layer) + ".bv", Tensor::zeros({cfg.d_model}), false),
      wo(ltag(layer) + ".wo", normal_init(rng, {cfg.d_model, cfg.d_model}, cfg.init_std), true),
      bo(ltag(layer) + ".bo", Tensor::zeros({cfg.d_model}), false),
      wphi(ltag(layer) + ".wphi", normal_init(rng, {cfg.d_model, 2 * cfg.d_model}, cfg.init_std), true),
      ln1_gain(ltag(layer) + ".ln1_gain", Tensor::full({cfg.d_model}, 1.0), false),
      ln1_shift(ltag(layer) + ".ln1_shift", Tensor::zeros({cfg.d_model}), false),
      w1(ltag(layer) + ".w1", normal_init(rng, {cfg.d_model, cfg.ffn_width}, cfg.init_std), true),
      b1(ltag(layer) + ".b1", Tensor::zeros({cfg.ffn_width}), false),
      w2(ltag(layer) + ".w2", normal_init(rng, {cfg.ffn_width, cfg.d_model}, cfg.init_std), true),
      b2(ltag(layer) + ".b2", Tensor::zeros({cfg.d_model}), false),
      ln2_gain(ltag(layer) + ".ln2_gain", Tensor::full({cfg.d_model}, 1.0), false),
      ln2_shift(ltag(layer) + ".ln2_shift", Tensor::zeros({cfg.d_model}), false) {}

void EncoderLayerParams::collect(std::vector<Param*>& out) {
  for (Param* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &wphi, &ln1_gain, &ln1_shift, &w1, &b1,
                   &w2, &b2, &ln2_gain, &ln2_shift}) {
    out.push_back(p);
  }
}

EncoderParams::EncoderParams(const Config& cfg, std::mt19937_64& rng)
    : tok_table("embed.tok", normal_init(rng, {cfg.vocab_size, cfg.d_model}, cfg.init_std), true),
      pos_table("embed.pos", normal_init(rng, {cfg.max_len, cfg.d_model}, cfg.init_std), true),
      emb_ln_gain("embed.ln_gain", Tensor::full({cfg.d_model}, 1.0), false),
      emb_ln_shift("embed.ln_shift", Tensor::zeros({cfg.d_model}), false) {
  for (int l = 0; l < cfg.layers; ++l) layers.emplace_back(cfg, l, rng);
}

void EncoderParams::collect(std::vector<Param*>& out) {
  out.push_back(&tok_table);
  out.push_back(&pos_table);
  out.push_back(&emb_ln_gain);
  out.push_back(&emb_ln_shift);
  for (EncoderLayerParams& l : layers) l.collect(out);
}

Var embed_tokens(Graph& g, EncoderParams& params, const std::vector<int>& ids, const Config& cfg) {
  if (static_cast<int>(ids.size()) > cfg.max_len) {
    throw std::invalid_argument("embed_tokens: sequence length " + std::to_string(ids.size()) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
  }
  std::vector<int> positions(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
  Var x = g.add(g.embedding(g.param(params.tok_table), ids),
                g.embedding(g.param(params.pos_table), positions));
  x = g.layer_norm(x, g.param(params.emb_ln_gain), g.param(params.emb_ln_shift), cfg.ln_eps);
  return g.dropout(x, cfg.dropout);
}

std::pair<Var, Var> project_prefix(Graph& g, Var bank, int layer, EncoderParams& params,
                                   const Config& cfg) {
  if (layer < 1 || layer > cfg.layers) throw std::invalid_argument("project_prefix: layer out of range");
  if (g.value(bank).dim(1) != cfg.d_model) {
    throw std::invalid_argument("project_prefix: bank width " + std::to_string(g.value(bank).dim(1)) +
                                " does not match d_model");
  }
  Var full = g.matmul(bank, g.param(params.layers[static_cast<size_t>(layer - 1)].wphi));
  Var phi_k = g.slice(full, 1, 0, cfg.d_model);
  Var phi_v = g.slice(full, 1, cfg.d_model, cfg.d_model);
  return {phi_k, phi_v};
}

Var prefix_attention(Graph& g, Var x, Var phi_k, Var phi_v, int layer, EncoderParams& params,
                     const Config& cfg, int example_id, std::vector<AttnRecord>* trace) {
  if (layer < 1 || layer > cfg.layers) throw std::invalid_argument("prefix_attention: layer out of range");
  if (phi_k.valid() != phi_v.valid()) {
    throw std::invalid_argument("prefix_attention: phi_k and phi_v must both be present or absent");
  }
  EncoderLayerParams& lp = params.layers[static_cast<size_t>(layer - 1)];
  int n = g.value(x).dim(0);
  int d = cfg.d_model;
  int dh = d / cfg.heads;
  int plen = phi_k.valid() ? g.value(phi_k).dim(0) : 0;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Var q = g.add_rowvec(g.matmul(x, g.param(lp.wq)), g.param(lp.bq));
  Var k = g.add_rowvec(g.matmul(x, g.param(lp.wk)), g.param(lp.bk));
  Var v = g.add_rowvec(g.matmul(x, g.param(lp.wv)), g.param(lp.bv));

  std::vector<Var> head_ctx;
  for (int h = 0; h < cfg.heads; ++h) {
    Var qh = g.slice(q, 1, h * dh, dh);
    Var kh = g.slice(k, 1, h * dh, dh);
    Var vh = g.slice(v, 1, h * dh, dh);
    if (plen > 0) {
      kh = g.concat({g.slice(phi_k, 1, h * dh, dh), kh}, 0);
      vh = g.concat({g.slice(phi_v, 1, h * dh, dh), vh}, 0);
    }
    Var probs = g.softmax_rows(g.scale(g.matmul(qh, g.transpose(kh)), scale));
    if (trace != nullptr && plen > 0) {
      const Tensor& pv = g.value(probs);
      for (int t = 0; t < n; ++t) {
        for (int c = 0; c < plen; ++c) {
          AttnRecord rec;
          rec.example_id = example_id;
          rec.layer = layer;
          rec.head = h;
          rec.token_index = t;
          rec.prefix_cell_index = c;
          rec.weight = pv[static_cast<int64_t>(t) * (plen + n) + c];
          trace->push_back(rec);
        }
      }
    }
    probs = g.dropout(probs, cfg.dropout);
    head_ctx.push_back(g.matmul(probs, vh));
  }
  Var ctx = cfg.heads == 1 ? head_ctx[0] : g.concat(head_ctx, 1);
  return g.add_rowvec(g.matmul(ctx, g.param(lp.wo)), g.param(lp.bo));
}

std::vector<Var> encoder_forward(Graph& g, EncoderParams& params, Var x0,
                                 const std::vector<Var>& banks, const Config& cfg, int example_id,
                                 std::vector<AttnRecord>* trace) {
  if (static_cast<int>(banks.size()) != cfg.layers) {
    throw ConfigError("encoder_forward: " + std::to_string(banks.size()) + " prefix banks for " +
                      std::to_string(cfg.layers) + " layers");
  }
  std::vector<Var> hidden;
  Var x = x0;
  for (int l = 1; l <= cfg.layers; ++l) {
    EncoderLayerParams& lp = params.layers[static_cast<size_t>(l - 1)];
    Var bank = banks[static_cast<size_t>(l - 1)];
    Var phi_k, phi_v;
    if (bank.valid()) {
      std::tie(phi_k, phi_v) = project_prefix(g, bank, l, params, cfg);
    }
    Var attn = prefix_attention(g, x, phi_k, phi_v, l, params, cfg, example_id, trace);
    x = g.layer_norm(g.add(x, attn), g.param(lp.ln1_gain), g.param(lp.ln1_shift), cfg.ln_eps);
    Var h = g.leaky_relu(g.add_rowvec(g.matmul(x, g.param(lp.w1)), g.param(lp.b1)), cfg.leaky_slope);
    Var ffn = g.dropout(g.add_rowvec(g.matmul(h, g.param(lp.w2)), g.param(lp.b2)), cfg.dropout);
    x = g.layer_norm(g.add(x, ffn), g.param(lp.ln2_gain), g.param(lp.ln2_shift), cfg.ln_eps);
    hidden.push_back(x);
  }
  return hidden;
}

}  // namespace hvp
