#ifndef HVP_TRAIN_HPP
#define HVP_TRAIN_HPP

#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

#include "hvp/model.hpp"
#include "hvp/synth.hpp"

namespace hvp {

// Linear warmup to peak over ceil(warmup_frac * total) steps, then linear
// decay to exactly 0 at step == total. Maximum at step warmup-1.
double lr_at(int step, int total_steps, double peak, double warmup_frac);

// Decoupled weight decay, applied only to decay-eligible parameters. All
// state rounds through f32 when the config precision is f32.
struct AdamW {
  std::vector<Param*> params;
  double peak_lr, beta1, beta2, eps, weight_decay, warmup_frac;
  int total_steps = 0;
  int steps_taken = 0;
  double last_lr = 0.0;
  Precision precision;
  std::vector<Tensor> m1, m2;

  AdamW(std::vector<Param*> params, const Config& cfg, int total_steps);
  void step();  // consumes current grads
};

struct Metrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  long gold = 0, pred = 0, correct = 0;
};

// Micro-averaged typed-span match; empty prediction sets score precision 0.
// Mention accuracy for the analytic ceiling is the recall of this metric.
Metrics span_metrics(const std::vector<std::vector<int>>& gold_tags,
                     const std::vector<std::vector<int>>& pred_tags, int entity_types);

// Micro over non-None labels: gold counts label != 0, predicted counts
// prediction != 0, correct needs equality on a non-None gold.
Metrics relation_metrics(const std::vector<int>& gold, const std::vector<int>& pred);

// Index batches grouped so every batch holds equal-length sequences only.
// Order of batches and of members inside a bucket is shuffled by g.
std::vector<std::vector<int>> make_batches(const std::vector<int>& lengths, int batch_size,
                                           std::mt19937_64& g);

Metrics evaluate_split(HvpModel& m, const std::vector<Example>& examples);

struct TrainResult {
  std::vector<double> step_losses;  // mean batch loss per optimizer step
  std::vector<double> dev_f1;      // per epoch
  double best_dev_f1 = 0.0;
  int best_epoch = -1;  // 0-based; model holds the best-dev weights on return
  int total_steps = 0;
};

// Full run: low-resource subsampling, equal-length batches, AdamW with the
// warmup/decay schedule, dev eval per epoch, best-dev weights restored at the
// end. run_seed drives shuffles and dropout; it is independent of the init
// seed already baked into the model.
TrainResult train_model(HvpModel& m, const std::vector<Example>& train_set,
                        const std::vector<Example>& dev_set, uint64_t run_seed,
                        std::ostream* log = nullptr);

// Eval-mode forward passes that record per-layer gate distributions or
// token-to-prefix-cell attention, one JSON object per line.
void dump_gate_records(HvpModel& m, const std::vector<Example>& examples, std::ostream& os);
void dump_attn_records(HvpModel& m, const std::vector<Example>& examples, std::ostream& os);

}  // namespace hvp

#endif
