// Config layering and command-line behavior: defaults, file overrides, flag
// overrides, echo output, deterministic artifacts, exit codes.

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hvp/config.hpp"

namespace fs = std::filesystem;
using hvp::Config;
using nlohmann::json;

static int failures = 0;

static void check(bool ok, const char* what) {
  if (ok) {
    std::printf("pass: %s\n", what);
  } else {
    std::printf("FAIL: %s\n", what);
    ++failures;
  }
}

static int run_cli(const std::string& args) {
  std::string cmd = std::string(HVP_CLI_PATH) + " " + args;
  int rc = std::system(cmd.c_str());
  if (rc == -1 || !WIFEXITED(rc)) return -1;
  return WEXITSTATUS(rc);
}

static std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

static void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

// Commands echo the resolved config first; the result record is the last line.
static json last_json_line(const fs::path& p) {
  std::ifstream f(p);
  std::string line, last;
  while (std::getline(f, line))
    if (!line.empty()) last = line;
  return json::parse(last);
}

static bool expect_config_error(const std::string& json_text, const char* needle) {
  try {
    Config c;
    c.apply_json(json_text);
  } catch (const hvp::ConfigError& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

static void default_checks() {
  Config c;
  check(c.d_model == 64 && c.layers == 4 && c.heads == 4 && c.num_blocks == 4 &&
            c.block_channels == std::vector<int>{8, 16, 32, 64} && c.seed == 1,
        "defaults describe the desk-scale model");
  check(c.num_tags() == 9, "the tag set is two per type plus outside");
  check(c.resolved_batch_size() == 8 && c.resolved_epochs() == 15,
        "unset batch and epochs resolve per task");
  Config r;
  r.task = hvp::Task::re;
  check(r.resolved_batch_size() == 32 && r.resolved_epochs() == 12,
        "the relation task resolves its own batch and epochs");
  bool ok = true;
  try {
    c.validate();
  } catch (...) {
    ok = false;
  }
  check(ok, "the default config validates");
}

static void json_checks() {
  Config a;
  a.task = hvp::Task::re;
  a.mode = hvp::FusionMode::flat;
  a.d_model = 32;
  a.heads = 2;
  a.seeds = {1, 49};
  a.data_dir = "corpus";
  Config b;
  b.apply_json(a.to_json());
  check(b.to_json() == a.to_json(), "a config round-trips through its JSON record");

  Config c;
  c.apply_json("{\"d_model\": 32}");
  check(c.d_model == 32 && c.layers == 4, "a partial record touches only the keys it names");

  check(expect_config_error("{\"bogus\": 1}", "bogus"), "an unknown key is rejected by name");
  check(expect_config_error("{\"d_model\": \"big\"}", "d_model"), "a mistyped value is rejected");
  check(expect_config_error("{\"precision\": \"f16\"}", "precision"),
        "an unknown precision is rejected");
  check(expect_config_error("[1,2]", "object"), "a non-object record is rejected");
  check(expect_config_error("{oops", "JSON"), "malformed JSON is rejected");

  check(hvp::parse_task("re") == hvp::Task::re &&
            hvp::task_name(hvp::parse_task("ner")) == "ner",
        "task names parse and print consistently");
  bool all_modes = true;
  for (const char* name : {"hierarchical", "flat", "one_to_three", "only_obj", "text_only",
                           "naive_concat"})
    all_modes = all_modes && hvp::mode_name(hvp::parse_mode(name)) == name;
  check(all_modes, "every fusion mode parses and prints consistently");
  bool threw = false;
  try {
    hvp::parse_mode("diagonal");
  } catch (const hvp::ConfigError&) {
    threw = true;
  }
  check(threw, "an unknown fusion mode is rejected");
}

static void validate_checks() {
  auto rejects = [](void (*tweak)(Config&)) {
    Config c;
    tweak(c);
    try {
      c.validate();
    } catch (const hvp::ConfigError&) {
      return true;
    }
    return false;
  };
  check(rejects([](Config& c) { c.d_model = 30; }), "head-indivisible widths are rejected");
  check(rejects([](Config& c) { c.block_channels = {8, 16}; }),
        "a channel list of the wrong length is rejected");
  check(rejects([](Config& c) { c.image_size = 16; }),
        "an image too small for the stride chain is rejected");
  check(rejects([](Config& c) { c.max_tokens = 32; }),
        "sentences that cannot fit the classification slot are rejected");
  check(rejects([](Config& c) { c.entity_types = 1; }), "a single entity type is rejected");
  check(rejects([](Config& c) { c.dropout = 1.0; }), "dropout of one is rejected");
  check(rejects([](Config& c) { c.warmup_frac = 0.0; }), "a zero warmup fraction is rejected");
  check(rejects([](Config& c) {
          c.mode = hvp::FusionMode::only_obj;
          c.num_objects = 0;
        }),
        "object-only fusion without objects is rejected");
}

static void cli_checks() {
  fs::path dir = fs::temp_directory_path() / "hvp_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto p = [&](const std::string& leaf) { return (dir / leaf).string(); };

  json tiny = {{"task", "ner"},     {"d_model", 16},      {"layers", 2},
               {"heads", 2},        {"ffn_width", 32},    {"max_len", 16},
               {"vocab_size", 64},  {"image_size", 32},   {"num_blocks", 4},
               {"block_channels", {4, 8, 16, 32}},        {"num_objects", 1},
               {"entity_types", 2}, {"num_relations", 3}, {"min_tokens", 4},
               {"max_tokens", 8},   {"train_size", 12},   {"dev_size", 6},
               {"test_size", 6},    {"batch_size", 4},    {"epochs", 1},
               {"seed", 3}};
  write_text(dir / "tiny.json", tiny.dump(2));

  int rc = run_cli("synth --config " + p("tiny.json") + " --out " + p("data") + " > " +
                   p("synth_echo.json") + " 2>/dev/null");
  bool files = true;
  for (const char* split : {"train", "dev", "test"})
    for (const char* ext : {".jsonl", ".hvpt", ".idx"})
      files = files && fs::exists(dir / "data" / (std::string(split) + ext));
  check(rc == 0 && files && fs::exists(dir / "data" / "meta.json"),
        "corpus generation writes all split files and succeeds");

  auto echo = json::parse(read_bytes(dir / "synth_echo.json"));
  check(echo.at("d_model") == 16 && echo.at("seed") == 3 && echo.at("layers") == 2 &&
            echo.at("peak_lr") == 0.0003,
        "the echoed record layers file values over defaults");

  rc = run_cli("synth --config " + p("tiny.json") + " --out " + p("data2") + " > /dev/null 2>&1");
  bool identical = rc == 0;
  for (const char* leaf : {"train.jsonl", "train.hvpt", "dev.jsonl", "test.jsonl", "test.hvpt"})
    identical = identical && read_bytes(dir / "data" / leaf) == read_bytes(dir / "data2" / leaf);
  check(identical, "regenerating with one seed reproduces the files byte for byte");

  rc = run_cli("synth --config " + p("tiny.json") + " --seed 9 --out " + p("data3") + " > " +
               p("echo_seed.json") + " 2>/dev/null");
  auto echo_seed = json::parse(read_bytes(dir / "echo_seed.json"));
  check(rc == 0 && echo_seed.at("seed") == 9 &&
            read_bytes(dir / "data" / "train.jsonl") != read_bytes(dir / "data3" / "train.jsonl"),
        "a seed flag overrides the file and draws a new corpus");

  rc = run_cli("synth --config " + p("tiny.json") + " --task re --out " + p("data_re") + " > " +
               p("echo_re.json") + " 2>/dev/null");
  auto echo_re = json::parse(read_bytes(dir / "echo_re.json"));
  check(rc == 0 && echo_re.at("task") == "re", "a task flag overrides the file task");

  rc = run_cli("train --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("run") +
               " > " + p("train_out.json") + " 2>/dev/null");
  bool trained = rc == 0 && fs::exists(dir / "run" / "checkpoint.hvpc") &&
                 fs::exists(dir / "run" / "metrics.json");
  json rep;
  if (trained) {
    rep = json::parse(read_bytes(dir / "run" / "metrics.json"));
    double f1 = rep.at("test").at("f1").get<double>();
    trained = rep.at("task") == "ner" && rep.at("steps").get<int>() > 0 && f1 >= 0.0 && f1 <= 1.0;
  }
  check(trained, "training writes a checkpoint and a metrics report");

  rc = run_cli("eval --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("run") +
               " --split test > " + p("eval1.json") + " 2>/dev/null");
  int rc2 = run_cli("eval --config " + p("tiny.json") + " --data " + p("data") + " --out " +
                    p("run") + " --split test > " + p("eval2.json") + " 2>/dev/null");
  bool eval_ok = rc == 0 && rc2 == 0;
  if (eval_ok) {
    auto e1 = last_json_line(dir / "eval1.json");
    double f1 = e1.at("f1").get<double>();
    eval_ok = f1 >= 0.0 && f1 <= 1.0 &&
              read_bytes(dir / "eval1.json") == read_bytes(dir / "eval2.json");
  }
  check(eval_ok, "evaluation is deterministic and reports a bounded score");

  rc = run_cli("eval --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("run") +
               " --irrelevant-rate 0.5 --seed 3 > " + p("noise1.json") + " 2>/dev/null");
  rc2 = run_cli("eval --config " + p("tiny.json") + " --data " + p("data") + " --out " + p("run") +
                " --irrelevant-rate 0.5 --seed 3 > " + p("noise2.json") + " 2>/dev/null");
  check(rc == 0 && rc2 == 0 &&
            read_bytes(dir / "noise1.json") == read_bytes(dir / "noise2.json") &&
            last_json_line(dir / "noise1.json").at("irrelevant_rate") == 0.5,
        "noisy evaluation is seeded and reproducible");

  rc = run_cli("gate-dump --config " + p("tiny.json") + " --data " + p("data") + " --out " +
               p("run") + " --split dev > /dev/null 2>&1");
  rc2 = run_cli("attn-dump --config " + p("tiny.json") + " --data " + p("data") + " --out " +
                p("run") + " --split dev > /dev/null 2>&1");
  bool dumps = rc == 0 && rc2 == 0;
  if (dumps) {
    std::ifstream gf(dir / "run" / "gates.jsonl");
    std::string line;
    dumps = static_cast<bool>(std::getline(gf, line));
    if (dumps) dumps = json::parse(line).contains("probs");
    std::ifstream af(dir / "run" / "attn.jsonl");
    dumps = dumps && static_cast<bool>(std::getline(af, line));
    if (dumps) dumps = json::parse(line).contains("weight");
  }
  check(dumps, "gate and attention dumps write parseable records");

  check(run_cli("synth --task bogus --out " + p("x") + " > /dev/null 2>&1") == 1,
        "an unknown task exits with failure");
  check(run_cli("synth --config " + p("absent.json") + " --out " + p("x") +
                " > /dev/null 2>&1") == 1,
        "a missing config file exits with failure");
  write_text(dir / "bad.json", "{\"bogus\": 1}");
  rc = run_cli("synth --config " + p("bad.json") + " --out " + p("x") + " > /dev/null 2> " +
               p("bad_err.txt"));
  check(rc == 1 && read_bytes(dir / "bad_err.txt").find("bogus") != std::string::npos,
        "an unknown config key exits with failure and names the key");
  check(run_cli("train --config " + p("tiny.json") + " --data " + p("nowhere") + " --out " +
                p("x") + " > /dev/null 2>&1") == 1,
        "training on a missing corpus exits with failure");
  check(run_cli("bogus > /dev/null 2>&1") != 0, "an unknown command exits with failure");
  check(run_cli("> /dev/null 2>&1") != 0, "a bare invocation exits with failure");

  rc = run_cli("gradcheck > " + p("gc.txt") + " 2>/dev/null");
  check(rc == 0 && !read_bytes(dir / "gc.txt").empty(),
        "the gradient verification command succeeds");

  rc = run_cli("ablate --config " + p("tiny.json") + " --seeds 5 --out " + p("abl") + " > " +
               p("abl.txt") + " 2>/dev/null");
  bool abl = rc == 0 && fs::exists(dir / "abl" / "ablation.json");
  if (abl) {
    auto rows = json::parse(read_bytes(dir / "abl" / "ablation.json"));
    std::set<std::string> names;
    for (auto& row : rows) names.insert(row.at("mode").get<std::string>());
    abl = rows.size() == 5 && names.size() == 5 &&
          read_bytes(dir / "abl.txt").find("mean_f1") != std::string::npos;
  }
  check(abl, "the ablation sweep reports one row per fusion mode");

  fs::remove_all(dir);
}

int main() {
  default_checks();
  json_checks();
  validate_checks();
  cli_checks();
  if (failures == 0) std::printf("test_cli_config: all tests passed\n");
  return failures == 0 ? 0 : 1;
}
