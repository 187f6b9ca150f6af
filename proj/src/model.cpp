#include "hvp/model.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "hvp/rng.hpp"

namespace hvp {

namespace {

template <class T>
T with_stream(const Config& cfg, uint64_t seed, uint64_t salt) {
  std::mt19937_64 g(mix_seed(seed, salt));
  return T(cfg, g);
}

bool is_head_param(const std::string& name) {
  return name.rfind("crf.", 0) == 0 || name.rfind("re.", 0) == 0;
}

}  // namespace

HvpModel::HvpModel(const Config& c, uint64_t init_seed)
    : cfg(c),
      backbone(with_stream<BackboneParams>(c, init_seed, 0xB1)),
      gate(with_stream<GateParams>(c, init_seed, 0xB2)),
      encoder(with_stream<EncoderParams>(c, init_seed, 0xB3)),
      crf(with_stream<CrfParams>(c, init_seed, 0xB4)),
      re(with_stream<ReParams>(c, init_seed, 0xB5)) {
  cfg.validate();
}

std::vector<Param*> HvpModel::all_params() {
  std::vector<Param*> out;
  backbone.collect(out);
  gate.collect(out);
  encoder.collect(out);
  crf.collect(out);
  re.collect(out);
  return out;
}

std::vector<Param*> HvpModel::head_params() {
  std::vector<Param*> out;
  crf.collect(out);
  re.collect(out);
  return out;
}

void HvpModel::zero_grads() {
  for (Param* p : all_params()) p->zero_grad();
}

std::vector<Tensor> HvpModel::values() {
  std::vector<Tensor> out;
  for (Param* p : all_params()) out.push_back(p->value);
  return out;
}

void HvpModel::set_values(const std::vector<Tensor>& vals) {
  auto ps = all_params();
  if (vals.size() != ps.size()) throw std::invalid_argument("set_values: parameter count mismatch");
  for (size_t i = 0; i < ps.size(); i++) {
    if (vals[i].shape != ps[i]->value.shape)
      throw std::invalid_argument("set_values: shape mismatch for " + ps[i]->name);
    ps[i]->value = vals[i];
  }
}

Var model_hidden(Graph& g, HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                 const std::vector<Tensor>& crops, int example_id, ForwardTrace* trace) {
  const Config& cfg = m.cfg;
  if (tokens.empty()) throw std::invalid_argument("model_hidden: empty token sequence");
  std::vector<int> ids = tokens;
  if (cfg.task == Task::re) ids.insert(ids.begin(), 0);
  Var x0 = embed_tokens(g, m.encoder, ids, cfg);
  int n_rows = (int)ids.size();

  std::vector<Var> banks(cfg.layers);
  if (cfg.mode == FusionMode::text_only) {
    auto hs = encoder_forward(g, m.encoder, x0, banks, cfg, example_id, trace ? &trace->attn : nullptr);
    return hs.back();
  }

  if ((int)crops.size() != cfg.num_objects)
    throw std::invalid_argument("model_hidden: expected " + std::to_string(cfg.num_objects) +
                                " object crops, got " + std::to_string(crops.size()));

  std::vector<std::vector<Var>> bundle;
  bundle.push_back(map_pyramid(g, m.backbone, backbone_forward(g, m.backbone, global_image, cfg), cfg));
  for (auto& c : crops)
    bundle.push_back(map_pyramid(g, m.backbone, backbone_forward(g, m.backbone, c, cfg), cfg));

  if (cfg.mode == FusionMode::naive_concat) {
    // Deepest-block rows of every image join the token rows at the input;
    // the extra rows are cut off again after the stack.
    std::vector<Var> parts = {x0};
    for (auto& feats : bundle) parts.push_back(block_rows(g, feats, cfg.num_blocks - 1));
    Var x = g.concat(parts, 0);
    auto hs = encoder_forward(g, m.encoder, x, banks, cfg, example_id, trace ? &trace->attn : nullptr);
    return g.slice(hs.back(), 0, 0, n_rows);
  }

  for (int l = 1; l <= cfg.layers; l++)
    banks[l - 1] = build_prefix_bank(g, bundle, l, m.gate, cfg.mode, cfg, example_id,
                                     trace ? &trace->gates : nullptr);
  auto hs = encoder_forward(g, m.encoder, x0, banks, cfg, example_id, trace ? &trace->attn : nullptr);
  return hs.back();
}

Var model_ner_loss(Graph& g, HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                   const std::vector<Tensor>& crops, const std::vector<int>& gold_tags,
                   int example_id, ForwardTrace* trace) {
  Var h = model_hidden(g, m, tokens, global_image, crops, example_id, trace);
  Var em = crf_emissions(g, h, m.crf);
  return crf_nll(g, em, gold_tags, m.crf);
}

Var model_re_loss(Graph& g, HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                  const std::vector<Tensor>& crops, int gold_relation, int example_id,
                  ForwardTrace* trace) {
  Var h = model_hidden(g, m, tokens, global_image, crops, example_id, trace);
  Var logits = re_logits(g, h, m.re);
  return re_loss(g, logits, gold_relation);
}

std::vector<int> model_predict_tags(HvpModel& m, const std::vector<int>& tokens,
                                    const Tensor& global_image, const std::vector<Tensor>& crops,
                                    int example_id, ForwardTrace* trace) {
  Graph g(m.cfg.precision);
  g.training = false;
  Var h = model_hidden(g, m, tokens, global_image, crops, example_id, trace);
  Var em = crf_emissions(g, h, m.crf);
  return crf_viterbi(g.value(em), m.crf.transition.value, m.crf.start.value, m.crf.stop.value);
}

int model_predict_relation(HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                           const std::vector<Tensor>& crops, int example_id, ForwardTrace* trace) {
  Graph g(m.cfg.precision);
  g.training = false;
  Var h = model_hidden(g, m, tokens, global_image, crops, example_id, trace);
  Var logits = re_logits(g, h, m.re);
  return re_predict(g.value(logits));
}

namespace {

constexpr char kMagic[4] = {'H', 'V', 'P', 'C'};
constexpr uint8_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xFF), (unsigned char)((v >> 8) & 0xFF),
                        (unsigned char)((v >> 16) & 0xFF), (unsigned char)((v >> 24) & 0xFF)};
  os.write((const char*)b, 4);
}

uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read((char*)b, 4);
  if (!is) throw FormatError(std::string("truncated checkpoint while reading ") + what);
  return (uint32_t)b[0] | ((uint32_t)b[1] << 8) | ((uint32_t)b[2] << 16) | ((uint32_t)b[3] << 24);
}

Config read_header(std::istream& is, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic in " + path);
  char ver = 0;
  is.read(&ver, 1);
  if (!is) throw FormatError("truncated checkpoint header in " + path);
  if ((uint8_t)ver != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string((int)(uint8_t)ver) + " in " + path);
  uint32_t len = read_u32(is, "config length");
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw FormatError("truncated checkpoint config in " + path);
  return Config::from_json(text);
}

}  // namespace

void save_checkpoint(const std::string& path, HvpModel& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  char ver = (char)kVersion;
  os.write(&ver, 1);
  std::string text = m.cfg.to_json();
  write_u32(os, (uint32_t)text.size());
  os.write(text.data(), (std::streamsize)text.size());
  auto ps = m.all_params();
  write_u32(os, (uint32_t)ps.size());
  for (Param* p : ps) {
    write_u32(os, (uint32_t)p->name.size());
    os.write(p->name.data(), (std::streamsize)p->name.size());
    write_hvpt(os, p->value);
  }
  if (!os) throw FormatError("write failure on checkpoint: " + path);
}

void load_checkpoint(const std::string& path, HvpModel& m, bool include_heads) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  Config saved = read_header(is, path);
  auto mismatches = model_shape_mismatches(saved, m.cfg);
  if (!mismatches.empty()) {
    std::string msg = "checkpoint config incompatible with model:";
    for (auto& f : mismatches) msg += " " + f + ";";
    throw ConfigError(msg);
  }
  uint32_t count = read_u32(is, "parameter count");
  std::map<std::string, Tensor> stored;
  for (uint32_t i = 0; i < count; i++) {
    uint32_t nl = read_u32(is, "parameter name length");
    std::string name(nl, '\0');
    is.read(name.data(), nl);
    if (!is) throw FormatError("truncated checkpoint while reading parameter name in " + path);
    stored.emplace(name, read_hvpt(is));
  }
  auto ps = m.all_params();
  for (Param* p : ps) {
    auto it = stored.find(p->name);
    if (!include_heads && is_head_param(p->name)) {
      if (it != stored.end()) stored.erase(it);
      continue;
    }
    if (it == stored.end()) throw FormatError("checkpoint missing parameter " + p->name);
    if (it->second.shape != p->value.shape)
      throw FormatError("checkpoint parameter " + p->name + " has shape " + shape_str(it->second.shape) +
                        ", expected " + shape_str(p->value.shape));
    p->value = it->second;
    p->zero_grad();
    stored.erase(it);
  }
  if (!stored.empty()) throw FormatError("unexpected parameter " + stored.begin()->first + " in checkpoint " + path);
}

Config checkpoint_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path);
  return read_header(is, path);
}

}  // namespace hvp
