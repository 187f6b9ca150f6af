#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "hvp/gradcheck.hpp"
#include "hvp/model.hpp"
#include "hvp/rng.hpp"
#include "hvp/synth.hpp"
#include "hvp/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags {
  std::string config_path, task, mode, out, data, checkpoint, split = "test", seeds;
  unsigned long long seed = 0;
  double low_resource = 1.0, irrelevant_rate = 0.0;
};

void add_common(CLI::App* sub, Flags& fl) {
  sub->add_option("--config", fl.config_path, "JSON config file");
  sub->add_option("--seed", fl.seed, "run seed");
  sub->add_option("--seeds", fl.seeds, "comma-separated seed list");
  sub->add_option("--task", fl.task, "ner|re");
  sub->add_option("--mode", fl.mode,
                  "hierarchical|flat|one_to_three|only_obj|text_only|naive_concat");
  sub->add_option("--low-resource", fl.low_resource, "training-split fraction in (0,1]");
  sub->add_option("--irrelevant-rate", fl.irrelevant_rate, "eval-time irrelevant-object rate");
  sub->add_option("--out", fl.out, "output directory");
  sub->add_option("--data", fl.data, "corpus directory");
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw hvp::ConfigError("bad seed list entry '" + item + "'");
    }
  }
  if (out.empty()) throw hvp::ConfigError("empty seed list");
  return out;
}

// defaults < config file < flags, then echo the resolved record.
hvp::Config resolve(CLI::App* sub, Flags& fl) {
  hvp::Config cfg;
  if (sub->count("--config")) {
    std::ifstream f(fl.config_path);
    if (!f) throw hvp::ConfigError("cannot open config file " + fl.config_path);
    std::stringstream ss;
    ss << f.rdbuf();
    cfg.apply_json(ss.str());
  }
  if (sub->count("--task")) cfg.task = hvp::parse_task(fl.task);
  if (sub->count("--mode")) cfg.mode = hvp::parse_mode(fl.mode);
  if (sub->count("--seed")) cfg.seed = fl.seed;
  if (sub->count("--seeds")) cfg.seeds = parse_seed_list(fl.seeds);
  if (sub->count("--low-resource")) cfg.low_resource = fl.low_resource;
  if (sub->count("--irrelevant-rate")) cfg.irrelevant_rate = fl.irrelevant_rate;
  if (sub->count("--out")) cfg.out_dir = fl.out;
  if (sub->count("--data")) cfg.data_dir = fl.data;
  if (cfg.data_dir.empty()) cfg.data_dir = "data";
  if (cfg.out_dir.empty()) cfg.out_dir = "out";
  cfg.validate();
  std::cout << cfg.to_json() << std::endl;
  return cfg;
}

json metrics_json(const hvp::Metrics& m) {
  return json{{"precision", m.precision}, {"recall", m.recall},       {"f1", m.f1},
              {"gold", m.gold},           {"pred", m.pred},           {"correct", m.correct}};
}

int cmd_synth(const hvp::Config& cfg) {
  auto splits = hvp::generate_corpus(cfg);
  fs::create_directories(cfg.out_dir);
  for (auto& s : splits) hvp::save_corpus(cfg.out_dir, s, cfg.task);
  std::ofstream meta(fs::path(cfg.out_dir) / "meta.json");
  meta << cfg.to_json() << "\n";
  std::cerr << "wrote " << splits.size() << " splits to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_train(const hvp::Config& cfg) {
  auto train_set = hvp::load_corpus(cfg.data_dir, "train", cfg);
  auto dev_set = hvp::load_corpus(cfg.data_dir, "dev", cfg);
  auto test_set = hvp::load_corpus(cfg.data_dir, "test", cfg);
  hvp::HvpModel model(cfg, cfg.seed);
  auto result = hvp::train_model(model, train_set, dev_set, cfg.seed, &std::cerr);
  hvp::Metrics test = hvp::evaluate_split(model, test_set);
  fs::create_directories(cfg.out_dir);
  hvp::save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.hvpc").string(), model);
  json rep;
  rep["task"] = hvp::task_name(cfg.task);
  rep["mode"] = hvp::mode_name(cfg.mode);
  rep["seed"] = cfg.seed;
  rep["steps"] = result.total_steps;
  rep["best_epoch"] = result.best_epoch;
  rep["best_dev_f1"] = result.best_dev_f1;
  rep["dev_f1"] = result.dev_f1;
  rep["test"] = metrics_json(test);
  std::ofstream mf(fs::path(cfg.out_dir) / "metrics.json");
  mf << rep.dump(2) << "\n";
  std::cout << rep.dump() << std::endl;
  return 0;
}

// Model shape comes from the checkpoint; the command config only chooses the
// corpus, split, noise level and seed.
int cmd_eval(const hvp::Config& cfg, const Flags& fl) {
  std::string ckpt = fl.checkpoint.empty() ? (fs::path(cfg.out_dir) / "checkpoint.hvpc").string()
                                           : fl.checkpoint;
  hvp::Config mc = hvp::checkpoint_config(ckpt);
  hvp::HvpModel model(mc, 0);
  hvp::load_checkpoint(ckpt, model, true);
  auto examples = hvp::load_corpus(cfg.data_dir, fl.split, mc);
  if (cfg.irrelevant_rate > 0.0)
    hvp::inject_irrelevant_objects(examples, cfg.irrelevant_rate, cfg.seed, mc);
  hvp::Metrics m = hvp::evaluate_split(model, examples);
  json rep = metrics_json(m);
  rep["task"] = hvp::task_name(mc.task);
  rep["mode"] = hvp::mode_name(mc.mode);
  rep["split"] = fl.split;
  rep["irrelevant_rate"] = cfg.irrelevant_rate;
  std::cout << rep.dump() << std::endl;
  return 0;
}

hvp::Config tiny_config(hvp::Task task) {
  hvp::Config t;
  t.task = task;
  t.mode = hvp::FusionMode::hierarchical;
  t.d_model = 16;
  t.layers = 2;
  t.heads = 2;
  t.ffn_width = 32;
  t.max_len = 8;
  t.min_tokens = 2;
  t.max_tokens = 4;
  t.vocab_size = 64;
  t.image_size = 32;
  t.num_blocks = 4;
  t.block_channels = {4, 8, 16, 32};
  t.num_objects = 1;
  t.entity_types = 2;
  t.num_relations = 3;
  t.precision = hvp::Precision::f64;
  return t;
}

int cmd_gradcheck() {
  double worst = 0.0;
  for (hvp::Task task : {hvp::Task::ner, hvp::Task::re}) {
    hvp::Config t = tiny_config(task);
    hvp::HvpModel model(t, 11);
    std::mt19937_64 g(hvp::mix_seed(11, 0xEC));
    std::vector<int> tokens = {5, 9, 3, 21};
    std::vector<int> tags = {1, 2, 0, 3};
    hvp::Tensor global = hvp::Tensor::zeros({3, t.image_size, t.image_size});
    for (int64_t i = 0; i < global.numel(); i++) global[i] = hvp::rng_unit(g);
    std::vector<hvp::Tensor> crops;
    for (int c = 0; c < t.num_objects; c++) {
      hvp::Tensor crop = hvp::Tensor::zeros({3, t.image_size, t.image_size});
      for (int64_t i = 0; i < crop.numel(); i++) crop[i] = hvp::rng_unit(g);
      crops.push_back(crop);
    }
    auto params = model.all_params();
    auto loss = [&](bool with_grad) {
      hvp::Graph gr(hvp::Precision::f64);
      gr.training = false;
      hvp::Var l = task == hvp::Task::ner
                       ? hvp::model_ner_loss(gr, model, tokens, global, crops, tags)
                       : hvp::model_re_loss(gr, model, tokens, global, crops, 1);
      if (with_grad) {
        model.zero_grads();
        gr.backward(l);
      }
      return gr.value(l)[0];
    };
    auto report = hvp::finite_diff_check(params, loss, 20, 1e-4, 0xFD + (int)task);
    for (auto& grp : report.groups)
      std::cout << hvp::task_name(task) << " group " << grp.name << " checked " << grp.checked
                << " max_rel_err " << grp.max_rel_err << "\n";
    std::cout << hvp::task_name(task) << " max_rel_err " << report.max_rel_err << std::endl;
    worst = std::max(worst, report.max_rel_err);
  }
  std::cout << "max_rel_err " << worst << std::endl;
  return worst <= 1e-4 ? 0 : 2;
}

int run_dump(const hvp::Config& cfg, const Flags& fl, bool gates) {
  std::string ckpt = fl.checkpoint.empty() ? (fs::path(cfg.out_dir) / "checkpoint.hvpc").string()
                                           : fl.checkpoint;
  hvp::Config mc = hvp::checkpoint_config(ckpt);
  hvp::HvpModel model(mc, 0);
  hvp::load_checkpoint(ckpt, model, true);
  auto examples = hvp::load_corpus(cfg.data_dir, fl.split, mc);
  fs::create_directories(cfg.out_dir);
  auto path = fs::path(cfg.out_dir) / (gates ? "gates.jsonl" : "attn.jsonl");
  std::ofstream os(path);
  if (!os) throw hvp::FormatError("cannot open " + path.string() + " for writing");
  if (gates)
    hvp::dump_gate_records(model, examples, os);
  else
    hvp::dump_attn_records(model, examples, os);
  std::cerr << "wrote " << path.string() << "\n";
  return 0;
}

int cmd_ablate(const hvp::Config& cfg) {
  std::vector<hvp::FusionMode> modes = {hvp::FusionMode::hierarchical, hvp::FusionMode::flat,
                                        hvp::FusionMode::one_to_three, hvp::FusionMode::only_obj,
                                        hvp::FusionMode::text_only};
  std::vector<uint64_t> seeds = cfg.seeds.empty() ? std::vector<uint64_t>{cfg.seed} : cfg.seeds;
  json all = json::array();
  fs::create_directories(cfg.out_dir);
  std::vector<std::pair<std::string, std::vector<double>>> table;
  for (auto mode : modes) table.push_back({hvp::mode_name(mode), {}});
  for (uint64_t seed : seeds) {
    hvp::Config base = cfg;
    base.seed = seed;
    auto splits = hvp::generate_corpus(base);
    for (size_t mi = 0; mi < modes.size(); mi++) {
      hvp::Config rc = base;
      rc.mode = modes[mi];
      hvp::HvpModel model(rc, seed);
      auto result = hvp::train_model(model, splits[0].examples, splits[1].examples, seed, &std::cerr);
      hvp::Metrics test = hvp::evaluate_split(model, splits[2].examples);
      table[mi].second.push_back(test.f1);
      json row;
      row["mode"] = hvp::mode_name(rc.mode);
      row["seed"] = seed;
      row["best_dev_f1"] = result.best_dev_f1;
      row["test"] = metrics_json(test);
      all.push_back(row);
      std::cerr << "ablate " << hvp::mode_name(rc.mode) << " seed " << seed << " test_f1 "
                << test.f1 << "\n";
    }
  }
  std::ofstream of(fs::path(cfg.out_dir) / "ablation.json");
  of << all.dump(2) << "\n";
  std::cout << "mode            mean_f1  std_f1   runs\n";
  for (auto& [name, f1s] : table) {
    double mean = 0.0;
    for (double v : f1s) mean += v;
    mean /= (double)f1s.size();
    double var = 0.0;
    for (double v : f1s) var += (v - mean) * (v - mean);
    double sd = f1s.size() > 1 ? std::sqrt(var / (double)(f1s.size() - 1)) : 0.0;
    char line[128];
    std::snprintf(line, sizeof(line), "%-15s %7.4f  %7.4f  %5zu\n", name.c_str(), mean, sd,
                  f1s.size());
    std::cout << line;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical visual-prefix fusion for multimodal tagging and relation extraction"};
  app.require_subcommand(1);
  Flags fl;
  auto* synth = app.add_subcommand("synth", "generate a synthetic multimodal corpus");
  auto* train = app.add_subcommand("train", "train a model and write checkpoint + metrics");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  auto* gate_dump = app.add_subcommand("gate-dump", "dump per-layer gate distributions");
  auto* attn_dump = app.add_subcommand("attn-dump", "dump token-to-prefix attention weights");
  auto* ablate = app.add_subcommand("ablate", "run the fusion-mode ablation over the seed list");
  for (auto* sub : {synth, train, eval, gradcheck, gate_dump, attn_dump, ablate}) add_common(sub, fl);
  for (auto* sub : {eval, gate_dump, attn_dump}) {
    sub->add_option("--checkpoint", fl.checkpoint, "checkpoint path (default OUT/checkpoint.hvpc)");
    sub->add_option("--split", fl.split, "corpus split name");
  }

  try {
    app.parse(argc, argv);
    if (*synth) return cmd_synth(resolve(synth, fl));
    if (*train) return cmd_train(resolve(train, fl));
    if (*eval) return cmd_eval(resolve(eval, fl), fl);
    if (*gradcheck) {
      resolve(gradcheck, fl);
      return cmd_gradcheck();
    }
    if (*gate_dump) return run_dump(resolve(gate_dump, fl), fl, true);
    if (*attn_dump) return run_dump(resolve(attn_dump, fl), fl, false);
    if (*ablate) return cmd_ablate(resolve(ablate, fl));
    return 1;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const hvp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const hvp::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
