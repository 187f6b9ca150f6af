#include "hvp/config.hpp"

#include <nlohmann/json.hpp>

namespace hvp {

using nlohmann::json;

std::string task_name(Task t) { return t == Task::ner ? "ner" : "re"; }

Task parse_task(const std::string& s) {
  if (s == "ner") return Task::ner;
  if (s == "re") return Task::re;
  throw ConfigError("unknown task '" + s + "' (expected ner or re)");
}

std::string mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::hierarchical: return "hierarchical";
    case FusionMode::flat: return "flat";
    case FusionMode::one_to_three: return "one_to_three";
    case FusionMode::only_obj: return "only_obj";
    case FusionMode::text_only: return "text_only";
    case FusionMode::naive_concat: return "naive_concat";
  }
  return "hierarchical";
}

FusionMode parse_mode(const std::string& s) {
  if (s == "hierarchical") return FusionMode::hierarchical;
  if (s == "flat") return FusionMode::flat;
  if (s == "one_to_three") return FusionMode::one_to_three;
  if (s == "only_obj") return FusionMode::only_obj;
  if (s == "text_only") return FusionMode::text_only;
  if (s == "naive_concat") return FusionMode::naive_concat;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

void Config::validate() const {
  if (d_model <= 0 || layers <= 0 || heads <= 0 || ffn_width <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (static_cast<int>(block_channels.size()) != num_blocks) {
    throw ConfigError("block_channels must list exactly num_blocks entries");
  }
  for (int c : block_channels) {
    if (c <= 0) throw ConfigError("block_channels entries must be positive");
  }
  if (image_size < (1 << (num_blocks + 1))) {
    throw ConfigError("image_size " + std::to_string(image_size) + " too small for " +
                      std::to_string(num_blocks) + " stride-2 blocks after the stride-2 stem");
  }
  if (num_objects < 0) throw ConfigError("num_objects must be >= 0");
  if (mode == FusionMode::only_obj && num_objects == 0) {
    throw ConfigError("only_obj mode requires num_objects >= 1");
  }
  if (entity_types < 2) throw ConfigError("entity_types must be >= 2");
  if (num_relations < 2) throw ConfigError("num_relations must be >= 2");
  if (vocab_size < 1 + 10 * entity_types) {
    throw ConfigError("vocab_size too small for the synthetic vocabulary layout");
  }
  if (ambiguity < 0.0 || ambiguity > 1.0) throw ConfigError("ambiguity must lie in [0,1]");
  if (low_resource <= 0.0 || low_resource > 1.0) throw ConfigError("low_resource must lie in (0,1]");
  if (irrelevant_rate < 0.0 || irrelevant_rate > 1.0) {
    throw ConfigError("irrelevant_rate must lie in [0,1]");
  }
  if (min_tokens < 2 || max_tokens < min_tokens) throw ConfigError("bad sentence length range");
  if (max_tokens + 1 > max_len) {
    throw ConfigError("max_tokens + 1 (classification slot) must fit in max_len");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
  if (warmup_frac <= 0.0 || warmup_frac >= 1.0) throw ConfigError("warmup_frac must lie in (0,1)");
}

std::string Config::to_json() const {
  json j;
  j["task"] = task_name(task);
  j["mode"] = mode_name(mode);
  j["d_model"] = d_model;
  j["layers"] = layers;
  j["heads"] = heads;
  j["ffn_width"] = ffn_width;
  j["max_len"] = max_len;
  j["vocab_size"] = vocab_size;
  j["image_size"] = image_size;
  j["num_blocks"] = num_blocks;
  j["block_channels"] = block_channels;
  j["num_objects"] = num_objects;
  j["entity_types"] = entity_types;
  j["num_relations"] = num_relations;
  j["dropout"] = dropout;
  j["ln_eps"] = ln_eps;
  j["leaky_slope"] = leaky_slope;
  j["init_std"] = init_std;
  j["precision"] = precision == Precision::f32 ? "f32" : "f64";
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["peak_lr"] = peak_lr;
  j["weight_decay"] = weight_decay;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["warmup_frac"] = warmup_frac;
  j["low_resource"] = low_resource;
  j["irrelevant_rate"] = irrelevant_rate;
  j["train_size"] = train_size;
  j["dev_size"] = dev_size;
  j["test_size"] = test_size;
  j["ambiguity"] = ambiguity;
  j["min_tokens"] = min_tokens;
  j["max_tokens"] = max_tokens;
  j["seed"] = seed;
  j["seeds"] = seeds;
  j["data_dir"] = data_dir;
  j["out_dir"] = out_dir;
  return j.dump(2);
}

void Config::apply_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    try {
      if (k == "task") task = parse_task(v.get<std::string>());
      else if (k == "mode") mode = parse_mode(v.get<std::string>());
      else if (k == "d_model") d_model = v.get<int>();
      else if (k == "layers") layers = v.get<int>();
      else if (k == "heads") heads = v.get<int>();
      else if (k == "ffn_width") ffn_width = v.get<int>();
      else if (k == "max_len") max_len = v.get<int>();
      else if (k == "vocab_size") vocab_size = v.get<int>();
      else if (k == "image_size") image_size = v.get<int>();
      else if (k == "num_blocks") num_blocks = v.get<int>();
      else if (k == "block_channels") block_channels = v.get<std::vector<int>>();
      else if (k == "num_objects") num_objects = v.get<int>();
      else if (k == "entity_types") entity_types = v.get<int>();
      else if (k == "num_relations") num_relations = v.get<int>();
      else if (k == "dropout") dropout = v.get<double>();
      else if (k == "ln_eps") ln_eps = v.get<double>();
      else if (k == "leaky_slope") leaky_slope = v.get<double>();
      else if (k == "init_std") init_std = v.get<double>();
      else if (k == "precision") {
        std::string p = v.get<std::string>();
        if (p == "f32") precision = Precision::f32;
        else if (p == "f64") precision = Precision::f64;
        else throw ConfigError("precision must be f32 or f64");
      }
      else if (k == "batch_size") batch_size = v.get<int>();
      else if (k == "epochs") epochs = v.get<int>();
      else if (k == "peak_lr") peak_lr = v.get<double>();
      else if (k == "weight_decay") weight_decay = v.get<double>();
      else if (k == "beta1") beta1 = v.get<double>();
      else if (k == "beta2") beta2 = v.get<double>();
      else if (k == "adam_eps") adam_eps = v.get<double>();
      else if (k == "warmup_frac") warmup_frac = v.get<double>();
      else if (k == "low_resource") low_resource = v.get<double>();
      else if (k == "irrelevant_rate") irrelevant_rate = v.get<double>();
      else if (k == "train_size") train_size = v.get<int>();
      else if (k == "dev_size") dev_size = v.get<int>();
      else if (k == "test_size") test_size = v.get<int>();
      else if (k == "ambiguity") ambiguity = v.get<double>();
      else if (k == "min_tokens") min_tokens = v.get<int>();
      else if (k == "max_tokens") max_tokens = v.get<int>();
      else if (k == "seed") seed = v.get<uint64_t>();
      else if (k == "seeds") seeds = v.get<std::vector<uint64_t>>();
      else if (k == "data_dir") data_dir = v.get<std::string>();
      else if (k == "out_dir") out_dir = v.get<std::string>();
      else throw ConfigError("unknown config key '" + k + "'");
    } catch (const json::exception& e) {
      throw ConfigError("bad value for config key '" + k + "': " + e.what());
    }
  }
}

Config Config::from_json(const std::string& json_text) {
  Config c;
  c.apply_json(json_text);
  return c;
}

std::vector<std::string> model_shape_mismatches(const Config& a, const Config& b) {
  std::vector<std::string> out;
  auto diff_int = [&](const char* name, int x, int y) {
    if (x != y) out.push_back(std::string(name) + ": " + std::to_string(x) + " vs " + std::to_string(y));
  };
  diff_int("d_model", a.d_model, b.d_model);
  diff_int("layers", a.layers, b.layers);
  diff_int("heads", a.heads, b.heads);
  diff_int("ffn_width", a.ffn_width, b.ffn_width);
  diff_int("max_len", a.max_len, b.max_len);
  diff_int("vocab_size", a.vocab_size, b.vocab_size);
  diff_int("image_size", a.image_size, b.image_size);
  diff_int("num_blocks", a.num_blocks, b.num_blocks);
  diff_int("num_objects", a.num_objects, b.num_objects);
  diff_int("entity_types", a.entity_types, b.entity_types);
  diff_int("num_relations", a.num_relations, b.num_relations);
  if (a.block_channels != b.block_channels) out.push_back("block_channels differ");
  return out;
}

}  // namespace hvp
