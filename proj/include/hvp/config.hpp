#ifndef HVP_CONFIG_HPP
#define HVP_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "hvp/tensor.hpp"

namespace hvp {

enum class Task { ner, re };

enum class FusionMode { hierarchical, flat, one_to_three, only_obj, text_only, naive_concat };

std::string task_name(Task t);
Task parse_task(const std::string& s);
std::string mode_name(FusionMode m);
FusionMode parse_mode(const std::string& s);

// One flat record of every knob, defaulted to the desk configuration.
// Precedence: defaults < config file < command-line flags.
struct Config {
  Task task = Task::ner;
  FusionMode mode = FusionMode::hierarchical;

  // Model dimensions.
  int d_model = 64;
  int layers = 4;
  int heads = 4;
  int ffn_width = 256;
  int max_len = 32;
  int vocab_size = 200;
  int image_size = 32;
  int num_blocks = 4;
  std::vector<int> block_channels = {8, 16, 32, 64};
  int num_objects = 2;
  int entity_types = 4;
  int num_relations = 6;
  double dropout = 0.1;
  double ln_eps = 1e-5;
  double leaky_slope = 0.01;
  double init_std = 0.02;

  // Training.
  Precision precision = Precision::f32;
  int batch_size = 0;  // 0 resolves per task: ner 8, re 32
  int epochs = 0;      // 0 resolves per task: ner 15, re 12
  double peak_lr = 3e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double warmup_frac = 0.1;
  double low_resource = 1.0;
  double irrelevant_rate = 0.0;

  // Synthetic corpus.
  int train_size = 2000;
  int dev_size = 500;
  int test_size = 500;
  double ambiguity = 0.5;
  int min_tokens = 6;
  int max_tokens = 16;

  uint64_t seed = 1;
  std::vector<uint64_t> seeds;  // multi-seed commands; falls back to {seed}

  std::string data_dir;
  std::string out_dir;

  int num_tags() const { return 2 * entity_types + 1; }
  int resolved_batch_size() const { return batch_size > 0 ? batch_size : (task == Task::ner ? 8 : 32); }
  int resolved_epochs() const { return epochs > 0 ? epochs : (task == Task::ner ? 15 : 12); }

  // Throws ConfigError on inconsistent values.
  void validate() const;

  std::string to_json() const;
  // Overlays keys from a flat JSON object; unknown keys raise ConfigError.
  void apply_json(const std::string& json_text);
  static Config from_json(const std::string& json_text);
};

// Fields that must agree between a checkpoint and the running config.
// Returns a list of human-readable mismatch descriptions (empty when equal).
std::vector<std::string> model_shape_mismatches(const Config& a, const Config& b);

}  // namespace hvp

#endif
