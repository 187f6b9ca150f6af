#include "hvp/synth.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hvp/heads.hpp"
#include "hvp/rng.hpp"

namespace hvp {

using nlohmann::json;

VocabLayout::VocabLayout(const Config& cfg) {
  entity_types = cfg.entity_types;
  pairs = entity_types * (entity_types - 1) / 2;
  ambiguous_base = unambiguous_base + unambiguous_per_type * entity_types;
  continuation_base = ambiguous_base + ambiguous_per_pair * pairs;
  context_base = continuation_base + continuation_count;
  vocab_size = cfg.vocab_size;
  if (vocab_size < context_base + 16)
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small for benchmark layout, need at least " +
                      std::to_string(context_base + 16));
}

bool VocabLayout::is_unambiguous_head(int id) const {
  return id >= unambiguous_base && id < ambiguous_base;
}

bool VocabLayout::is_ambiguous_head(int id) const {
  return id >= ambiguous_base && id < continuation_base;
}

int VocabLayout::head_type(int id) const {
  if (!is_unambiguous_head(id)) throw std::invalid_argument("head_type: not an unambiguous head token");
  return (id - unambiguous_base) % entity_types;
}

static std::vector<std::pair<int, int>> all_pairs(int t) {
  std::vector<std::pair<int, int>> out;
  for (int a = 0; a < t; a++)
    for (int b = a + 1; b < t; b++) out.push_back({a, b});
  return out;
}

std::pair<int, int> VocabLayout::head_pair(int id) const {
  if (!is_ambiguous_head(id)) throw std::invalid_argument("head_pair: not an ambiguous head token");
  return all_pairs(entity_types)[(id - ambiguous_base) % pairs];
}

int VocabLayout::pair_index(int a, int b) const {
  if (a > b) std::swap(a, b);
  auto ps = all_pairs(entity_types);
  for (int i = 0; i < (int)ps.size(); i++)
    if (ps[i].first == a && ps[i].second == b) return i;
  throw std::invalid_argument("pair_index: invalid type pair");
}

std::vector<int> type_glyph(int type, int entity_types) {
  if (type < 0 || type >= entity_types) throw std::invalid_argument("type_glyph: type out of range");
  // Density climbs with the type index so patterns differ in both layout and
  // mass.
  double density = 0.25 + 0.5 * (entity_types > 1 ? (double)type / (entity_types - 1) : 0.0);
  std::mt19937_64 g(mix_seed(0x676c797068ull, (uint64_t)type));
  std::vector<int> bits(64, 0);
  for (int i = 0; i < 64; i++) bits[i] = rng_unit(g) < density ? 1 : 0;
  bits[type % 64] = 1;  // never fully empty
  return bits;
}

std::vector<int> distractor_glyph() {
  std::mt19937_64 g(mix_seed(0x64697374ull, 7));
  std::vector<int> bits(64, 0);
  for (int i = 0; i < 64; i++) bits[i] = rng_unit(g) < 0.5 ? 1 : 0;
  return bits;
}

int relation_label(int type_a, int type_b, int num_relations) {
  if (num_relations < 2) throw ConfigError("relation labeling needs at least 2 relations");
  if (type_a == type_b) return 0;
  return 1 + (type_a + 2 * type_b) % (num_relations - 1);
}

double text_only_ceiling(const Config& cfg) { return 1.0 - cfg.ambiguity / 2.0; }

namespace {

constexpr int kGlyphSide = 8;

struct Mention {
  int start = 0;
  int len = 1;
  int type = 0;
  int alt = -1;  // wrong candidate when ambiguous
  bool ambiguous() const { return alt >= 0; }
};

void place_glyph(Tensor& image, const std::vector<int>& bits, int oy, int ox) {
  int s = image.dim(1);
  for (int y = 0; y < kGlyphSide; y++)
    for (int x = 0; x < kGlyphSide; x++) {
      if (!bits[y * kGlyphSide + x]) continue;
      for (int ch = 0; ch < 3; ch++) image[((size_t)ch * s + (oy + y)) * s + (ox + x)] = 1.0;
    }
}

// Random origins with non-overlapping glyph rectangles.
std::vector<std::pair<int, int>> pick_origins(std::mt19937_64& g, int image_size, int count) {
  std::vector<std::pair<int, int>> out;
  int lim = image_size - kGlyphSide;
  if (lim < 0) throw ConfigError("image_size too small for object glyphs");
  for (int i = 0; i < count; i++) {
    for (int attempt = 0;; attempt++) {
      int oy = (int)rng_below(g, (uint64_t)lim + 1);
      int ox = (int)rng_below(g, (uint64_t)lim + 1);
      bool clash = false;
      for (auto& o : out)
        if (std::abs(o.first - oy) < kGlyphSide && std::abs(o.second - ox) < kGlyphSide) clash = true;
      if (!clash) {
        out.push_back({oy, ox});
        break;
      }
      if (attempt > 200) throw ConfigError("cannot place non-overlapping glyphs, image too small");
    }
  }
  return out;
}

Tensor blank_image(int s) { return Tensor::zeros({3, s, s}); }

int random_unambiguous_head(std::mt19937_64& g, const VocabLayout& v, int type) {
  int j = (int)rng_below(g, (uint64_t)v.unambiguous_per_type);
  return v.unambiguous_base + j * v.entity_types + type;
}

int random_ambiguous_head(std::mt19937_64& g, const VocabLayout& v, int pair) {
  int j = (int)rng_below(g, (uint64_t)v.ambiguous_per_pair);
  return v.ambiguous_base + j * v.pairs + pair;
}

// Non-overlapping mention spans inside a sentence of length n.
std::vector<std::pair<int, int>> pick_spans(std::mt19937_64& g, int n, int count) {
  std::vector<std::pair<int, int>> spans;
  for (int i = 0; i < count; i++) {
    for (int attempt = 0;; attempt++) {
      int len = 1 + (int)rng_below(g, 2);
      int start = (int)rng_below(g, (uint64_t)(n - len + 1));
      bool clash = false;
      for (auto& s : spans)
        if (start < s.first + s.second && s.first < start + len) clash = true;
      if (!clash) {
        spans.push_back({start, len});
        break;
      }
      if (attempt > 500) throw ConfigError("cannot place mentions, sentence too short");
    }
  }
  std::sort(spans.begin(), spans.end());
  return spans;
}

Example build_example(std::mt19937_64& g, const Config& cfg, const VocabLayout& v, Task task) {
  Example ex;
  int n = cfg.min_tokens + (int)rng_below(g, (uint64_t)(cfg.max_tokens - cfg.min_tokens + 1));
  int mention_count = task == Task::re ? 2 : 1 + (int)rng_below(g, 2);
  auto spans = pick_spans(g, n, mention_count);

  std::vector<Mention> mentions;
  for (auto& s : spans) mentions.push_back({s.first, s.second, 0, -1});

  // Ambiguity flags. RE keeps at most one ambiguous mention so the analytic
  // ceiling is exact; NER caps at the number of object crops.
  std::vector<int> ambiguous_order;
  if (task == Task::re) {
    if (rng_unit(g) < cfg.ambiguity) ambiguous_order.push_back((int)rng_below(g, (uint64_t)mentions.size()));
  } else {
    for (int i = 0; i < (int)mentions.size(); i++)
      if (rng_unit(g) < cfg.ambiguity) ambiguous_order.push_back(i);
    while ((int)ambiguous_order.size() > cfg.num_objects) ambiguous_order.pop_back();
  }
  std::sort(ambiguous_order.begin(), ambiguous_order.end());

  // Assign types. Concurrent ambiguous mentions get disjoint candidate pairs
  // so the image resolves each one uniquely.
  auto pairs = all_pairs(cfg.entity_types);
  std::vector<int> used_pair_types;
  for (int idx : ambiguous_order) {
    std::vector<int> eligible;
    for (int p = 0; p < (int)pairs.size(); p++) {
      bool clash = false;
      for (int t : used_pair_types)
        if (pairs[p].first == t || pairs[p].second == t) clash = true;
      if (!clash) eligible.push_back(p);
    }
    if (eligible.empty()) continue;  // stays unambiguous
    int p = eligible[rng_below(g, (uint64_t)eligible.size())];
    used_pair_types.push_back(pairs[p].first);
    used_pair_types.push_back(pairs[p].second);
    bool first = rng_unit(g) < 0.5;
    mentions[idx].type = first ? pairs[p].first : pairs[p].second;
    mentions[idx].alt = first ? pairs[p].second : pairs[p].first;
  }
  for (auto& m : mentions)
    if (!m.ambiguous()) m.type = (int)rng_below(g, (uint64_t)cfg.entity_types);

  // Tokens: head, optional continuation, context filler.
  ex.tokens.assign(n, 0);
  std::vector<bool> taken(n, false);
  for (auto& m : mentions) {
    int head = m.ambiguous() ? random_ambiguous_head(g, v, v.pair_index(m.type, m.alt))
                             : random_unambiguous_head(g, v, m.type);
    ex.tokens[m.start] = head;
    taken[m.start] = true;
    for (int k = 1; k < m.len; k++) {
      ex.tokens[m.start + k] = v.continuation_base + (int)rng_below(g, (uint64_t)v.continuation_count);
      taken[m.start + k] = true;
    }
  }
  int context_span = v.vocab_size - v.context_base;
  for (int i = 0; i < n; i++)
    if (!taken[i]) ex.tokens[i] = v.context_base + (int)rng_below(g, (uint64_t)context_span);

  // Labels.
  std::vector<Span> tag_spans;
  for (auto& m : mentions) tag_spans.push_back({m.start, m.len, m.type});
  ex.tags = tags_from_spans(tag_spans, n, cfg.entity_types);
  if (task == Task::re) ex.relation = relation_label(mentions[0].type, mentions[1].type, cfg.num_relations);

  // Images: the global view holds every ambiguous mention's true-type glyph;
  // each object crop grounds one ambiguous mention, leftovers duplicate one or
  // fall back to a fixed distractor pattern.
  ex.global = blank_image(cfg.image_size);
  std::vector<int> amb;
  for (int i = 0; i < (int)mentions.size(); i++)
    if (mentions[i].ambiguous()) amb.push_back(i);
  auto origins = pick_origins(g, cfg.image_size, (int)amb.size());
  for (int k = 0; k < (int)amb.size(); k++)
    place_glyph(ex.global, type_glyph(mentions[amb[k]].type, cfg.entity_types), origins[k].first,
                origins[k].second);
  for (int c = 0; c < cfg.num_objects; c++) {
    Tensor crop = blank_image(cfg.image_size);
    auto at = pick_origins(g, cfg.image_size, 1)[0];
    if (c < (int)amb.size()) {
      place_glyph(crop, type_glyph(mentions[amb[c]].type, cfg.entity_types), at.first, at.second);
    } else if (!amb.empty()) {
      int pick = amb[rng_below(g, (uint64_t)amb.size())];
      place_glyph(crop, type_glyph(mentions[pick].type, cfg.entity_types), at.first, at.second);
    } else {
      place_glyph(crop, distractor_glyph(), at.first, at.second);
    }
    ex.crops.push_back(crop);
    ex.relevance.push_back(true);
  }

  for (auto& m : mentions) {
    ex.mention_start.push_back(m.start);
    ex.mention_len.push_back(m.len);
    ex.mention_type.push_back(m.type);
    ex.mention_alt.push_back(m.alt);
  }
  return ex;
}

std::string sentence_key(const Example& ex) {
  std::string key;
  for (int t : ex.tokens) key += std::to_string(t) + ",";
  return key;
}

}  // namespace

std::vector<CorpusSplit> generate_corpus(const Config& cfg) {
  if (cfg.ambiguity > 0.0 && cfg.num_objects < 1)
    throw ConfigError("ambiguous mentions need at least one object crop to be resolvable");
  if (cfg.task == Task::re) {
    // Every type substitution must flip the label, otherwise the ceiling
    // formula breaks.
    for (int a = 0; a < cfg.entity_types; a++)
      for (int b = 0; b < cfg.entity_types; b++)
        for (int a2 = 0; a2 < cfg.entity_types; a2++) {
          if (a2 == a) continue;
          if (relation_label(a, b, cfg.num_relations) == relation_label(a2, b, cfg.num_relations) ||
              relation_label(b, a, cfg.num_relations) == relation_label(b, a2, cfg.num_relations))
            throw ConfigError("num_relations too small: type changes must always change the relation label");
        }
  }
  VocabLayout v(cfg);
  std::vector<std::pair<std::string, int>> plan = {
      {"train", cfg.train_size}, {"dev", cfg.dev_size}, {"test", cfg.test_size}};
  std::set<std::string> seen;
  std::vector<CorpusSplit> out;
  for (int s = 0; s < (int)plan.size(); s++) {
    CorpusSplit split;
    split.name = plan[s].first;
    std::mt19937_64 g(mix_seed(cfg.seed, 0x5350u + (uint64_t)s));
    for (int i = 0; i < plan[s].second; i++) {
      for (int attempt = 0;; attempt++) {
        Example ex = build_example(g, cfg, v, cfg.task);
        if (seen.insert(sentence_key(ex)).second) {
          ex.id = i;
          split.examples.push_back(std::move(ex));
          break;
        }
        if (attempt > 2000) throw ConfigError("cannot generate disjoint splits, corpus too large for vocabulary");
      }
    }
    out.push_back(std::move(split));
  }
  return out;
}

void inject_irrelevant_objects(std::vector<Example>& examples, double rate, uint64_t seed,
                               const Config& cfg) {
  if (rate < 0.0 || rate > 1.0) throw ConfigError("irrelevant-rate must lie in [0,1]");
  std::mt19937_64 g(mix_seed(seed, 0x1332u));
  for (auto& ex : examples) {
    if (cfg.num_objects < 1) break;
    if (rng_unit(g) >= rate) continue;
    // Types present in the sentence, from generation truth or tags.
    std::set<int> present;
    if (!ex.mention_type.empty()) {
      for (int t : ex.mention_type) present.insert(t);
    } else if (!ex.tags.empty()) {
      for (auto& sp : spans_from_tags(ex.tags, cfg.entity_types)) present.insert(sp.type);
    } else {
      throw ConfigError("cannot inject irrelevant objects without entity annotations");
    }
    std::vector<int> absent;
    for (int t = 0; t < cfg.entity_types; t++)
      if (!present.count(t)) absent.push_back(t);
    if (absent.empty()) continue;
    int type = absent[rng_below(g, (uint64_t)absent.size())];
    int slot = (int)rng_below(g, (uint64_t)cfg.num_objects);
    Tensor crop = Tensor::zeros({3, cfg.image_size, cfg.image_size});
    auto at = pick_origins(g, cfg.image_size, 1)[0];
    place_glyph(crop, type_glyph(type, cfg.entity_types), at.first, at.second);
    ex.crops[slot] = crop;
    ex.relevance[slot] = false;
  }
}

void save_corpus(const std::string& dir, const CorpusSplit& split, Task task) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream jf(fs::path(dir) / (split.name + ".jsonl"));
  std::ofstream tf(fs::path(dir) / (split.name + ".hvpt"), std::ios::binary);
  std::ofstream xf(fs::path(dir) / (split.name + ".idx"));
  if (!jf || !tf || !xf) throw FormatError("cannot open corpus files for writing in " + dir);
  for (auto& ex : split.examples) {
    json rec;
    rec["id"] = ex.id;
    rec["tokens"] = ex.tokens;
    if (task == Task::ner)
      rec["tags"] = ex.tags;
    else
      rec["relation"] = ex.relation;
    rec["object_relevance"] = ex.relevance;
    jf << rec.dump() << "\n";
    json ix;
    ix["id"] = ex.id;
    ix["offset"] = (uint64_t)tf.tellp();
    xf << ix.dump() << "\n";
    write_hvpt(tf, ex.global);
    for (auto& c : ex.crops) write_hvpt(tf, c);
  }
}

std::vector<Example> load_corpus(const std::string& dir, const std::string& split_name,
                                 const Config& cfg) {
  namespace fs = std::filesystem;
  auto jpath = fs::path(dir) / (split_name + ".jsonl");
  auto tpath = fs::path(dir) / (split_name + ".hvpt");
  auto xpath = fs::path(dir) / (split_name + ".idx");
  std::ifstream jf(jpath);
  std::ifstream tf(tpath, std::ios::binary);
  std::ifstream xf(xpath);
  if (!jf) throw FormatError("missing corpus file " + jpath.string());
  if (!tf) throw FormatError("missing corpus file " + tpath.string());
  if (!xf) throw FormatError("missing corpus file " + xpath.string());

  std::vector<uint64_t> offsets;
  std::string line;
  while (std::getline(xf, line)) {
    if (line.empty()) continue;
    json ix = json::parse(line, nullptr, false);
    if (ix.is_discarded() || !ix.contains("offset"))
      throw FormatError("bad index record in " + xpath.string());
    offsets.push_back(ix["offset"].get<uint64_t>());
  }

  std::vector<Example> out;
  int row = 0;
  while (std::getline(jf, line)) {
    if (line.empty()) continue;
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) throw FormatError("bad json line " + std::to_string(row) + " in " + jpath.string());
    Example ex;
    try {
      ex.id = rec.at("id").get<int>();
      ex.tokens = rec.at("tokens").get<std::vector<int>>();
      if (rec.contains("tags")) ex.tags = rec["tags"].get<std::vector<int>>();
      if (rec.contains("relation")) ex.relation = rec["relation"].get<int>();
      ex.relevance = rec.at("object_relevance").get<std::vector<bool>>();
    } catch (const json::exception& e) {
      throw FormatError("bad corpus record " + std::to_string(row) + " in " + jpath.string() + ": " + e.what());
    }
    if (cfg.task == Task::ner && !rec.contains("tags"))
      throw FormatError("corpus record " + std::to_string(row) + " in " + jpath.string() +
                        " lacks tags required by the tagging task");
    if (cfg.task == Task::re && !rec.contains("relation"))
      throw FormatError("corpus record " + std::to_string(row) + " in " + jpath.string() +
                        " lacks a relation required by the classification task");
    if (ex.tokens.empty() || (int)ex.tokens.size() > cfg.max_len)
      throw FormatError("corpus record " + std::to_string(row) + " has invalid token count");
    for (int t : ex.tokens)
      if (t < 0 || t >= cfg.vocab_size) throw FormatError("corpus record " + std::to_string(row) + " has token id out of range");
    if (!ex.tags.empty() && ex.tags.size() != ex.tokens.size())
      throw FormatError("corpus record " + std::to_string(row) + " has tag/token length mismatch");
    if (row >= (int)offsets.size()) throw FormatError("index file " + xpath.string() + " shorter than corpus");
    tf.seekg((std::streamoff)offsets[row]);
    if (!tf) throw FormatError("bad offset in " + xpath.string());
    ex.global = read_hvpt(tf);
    for (int c = 0; c < cfg.num_objects; c++) ex.crops.push_back(read_hvpt(tf));
    ex.relevance.resize(cfg.num_objects, true);
    std::vector<int> want = {3, cfg.image_size, cfg.image_size};
    if (ex.global.shape != want) throw FormatError("corpus image has unexpected shape " + shape_str(ex.global.shape));
    for (auto& c : ex.crops)
      if (c.shape != want) throw FormatError("corpus crop has unexpected shape " + shape_str(c.shape));
    out.push_back(std::move(ex));
    row++;
  }
  return out;
}

}  // namespace hvp
