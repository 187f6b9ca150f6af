#include "hvp/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "hvp/rng.hpp"

namespace hvp {

double lr_at(int step, int total_steps, double peak, double warmup_frac) {
  if (total_steps < 1) throw std::invalid_argument("lr_at: total_steps must be positive");
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step >= total_steps) return 0.0;
  int warmup = (int)std::ceil(warmup_frac * total_steps);
  if (warmup < 1) warmup = 1;
  if (warmup > total_steps) warmup = total_steps;
  if (step < warmup) return peak * (double)(step + 1) / (double)warmup;
  return peak * (double)(total_steps - step) / (double)(total_steps - warmup);
}

AdamW::AdamW(std::vector<Param*> ps, const Config& cfg, int total)
    : params(std::move(ps)),
      peak_lr(cfg.peak_lr),
      beta1(cfg.beta1),
      beta2(cfg.beta2),
      eps(cfg.adam_eps),
      weight_decay(cfg.weight_decay),
      warmup_frac(cfg.warmup_frac),
      total_steps(total),
      precision(cfg.precision) {
  if (total_steps < 1) throw std::invalid_argument("AdamW: total_steps must be positive");
  for (Param* p : params) {
    m1.push_back(Tensor::zeros(p->value.shape));
    m2.push_back(Tensor::zeros(p->value.shape));
  }
}

void AdamW::step() {
  double lr = lr_at(steps_taken, total_steps, peak_lr, warmup_frac);
  last_lr = lr;
  steps_taken++;
  double bc1 = 1.0 - std::pow(beta1, steps_taken);
  double bc2 = 1.0 - std::pow(beta2, steps_taken);
  bool f32 = precision == Precision::f32;
  for (size_t i = 0; i < params.size(); i++) {
    Param* p = params[i];
    for (int64_t j = 0; j < p->value.numel(); j++) {
      double g = p->grad[j];
      double mj = beta1 * m1[i][j] + (1.0 - beta1) * g;
      double vj = beta2 * m2[i][j] + (1.0 - beta2) * g * g;
      if (f32) {
        mj = round_to_f32(mj);
        vj = round_to_f32(vj);
      }
      m1[i][j] = mj;
      m2[i][j] = vj;
      double mhat = mj / bc1;
      double vhat = vj / bc2;
      double w = p->value[j];
      double decay = p->decay_eligible ? weight_decay : 0.0;
      w -= lr * (mhat / (std::sqrt(vhat) + eps) + decay * w);
      p->value[j] = f32 ? round_to_f32(w) : w;
    }
  }
}

namespace {

double f1_of(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

Metrics span_metrics(const std::vector<std::vector<int>>& gold_tags,
                     const std::vector<std::vector<int>>& pred_tags, int entity_types) {
  if (gold_tags.size() != pred_tags.size())
    throw std::invalid_argument("span_metrics: gold/pred sentence count mismatch");
  Metrics m;
  for (size_t s = 0; s < gold_tags.size(); s++) {
    auto gold = spans_from_tags(gold_tags[s], entity_types);
    auto pred = spans_from_tags(pred_tags[s], entity_types);
    m.gold += (long)gold.size();
    m.pred += (long)pred.size();
    std::vector<bool> used(gold.size(), false);
    for (auto& ps : pred)
      for (size_t gi = 0; gi < gold.size(); gi++)
        if (!used[gi] && gold[gi] == ps) {
          used[gi] = true;
          m.correct++;
          break;
        }
  }
  m.precision = m.pred > 0 ? (double)m.correct / m.pred : 0.0;
  m.recall = m.gold > 0 ? (double)m.correct / m.gold : 0.0;
  m.f1 = f1_of(m.precision, m.recall);
  return m;
}

Metrics relation_metrics(const std::vector<int>& gold, const std::vector<int>& pred) {
  if (gold.size() != pred.size()) throw std::invalid_argument("relation_metrics: size mismatch");
  Metrics m;
  for (size_t i = 0; i < gold.size(); i++) {
    if (gold[i] != 0) m.gold++;
    if (pred[i] != 0) m.pred++;
    if (gold[i] != 0 && gold[i] == pred[i]) m.correct++;
  }
  m.precision = m.pred > 0 ? (double)m.correct / m.pred : 0.0;
  m.recall = m.gold > 0 ? (double)m.correct / m.gold : 0.0;
  m.f1 = f1_of(m.precision, m.recall);
  return m;
}

std::vector<std::vector<int>> make_batches(const std::vector<int>& lengths, int batch_size,
                                           std::mt19937_64& g) {
  if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size must be positive");
  std::map<int, std::vector<int>> buckets;
  for (int i = 0; i < (int)lengths.size(); i++) buckets[lengths[i]].push_back(i);
  std::vector<std::vector<int>> out;
  for (auto& [len, members] : buckets) {
    (void)len;
    rng_shuffle(g, members);
    for (size_t at = 0; at < members.size(); at += batch_size) {
      size_t end = std::min(members.size(), at + batch_size);
      out.emplace_back(members.begin() + at, members.begin() + end);
    }
  }
  rng_shuffle(g, out);
  return out;
}

namespace {

Var example_loss(Graph& g, HvpModel& m, const Example& ex) {
  if (m.cfg.task == Task::ner)
    return model_ner_loss(g, m, ex.tokens, ex.global, ex.crops, ex.tags, ex.id);
  return model_re_loss(g, m, ex.tokens, ex.global, ex.crops, ex.relation, ex.id);
}

}  // namespace

Metrics evaluate_split(HvpModel& m, const std::vector<Example>& examples) {
  if (m.cfg.task == Task::ner) {
    std::vector<std::vector<int>> gold, pred;
    for (auto& ex : examples) {
      gold.push_back(ex.tags);
      pred.push_back(model_predict_tags(m, ex.tokens, ex.global, ex.crops, ex.id));
    }
    return span_metrics(gold, pred, m.cfg.entity_types);
  }
  std::vector<int> gold, pred;
  for (auto& ex : examples) {
    gold.push_back(ex.relation);
    pred.push_back(model_predict_relation(m, ex.tokens, ex.global, ex.crops, ex.id));
  }
  return relation_metrics(gold, pred);
}

TrainResult train_model(HvpModel& m, const std::vector<Example>& train_set,
                        const std::vector<Example>& dev_set, uint64_t run_seed, std::ostream* log) {
  const Config& cfg = m.cfg;
  if (train_set.empty()) throw std::invalid_argument("train_model: empty training set");
  if (cfg.low_resource <= 0.0 || cfg.low_resource > 1.0)
    throw ConfigError("low_resource fraction must lie in (0,1]");

  std::vector<int> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  if (cfg.low_resource < 1.0) {
    std::mt19937_64 g(mix_seed(run_seed, 0x10));
    rng_shuffle(g, order);
    int keep = (int)std::ceil(cfg.low_resource * (double)train_set.size());
    keep = std::max(1, std::min(keep, (int)train_set.size()));
    order.resize(keep);
  }
  std::vector<const Example*> train;
  for (int i : order) train.push_back(&train_set[i]);
  std::vector<int> lengths;
  for (auto* ex : train) lengths.push_back((int)ex->tokens.size());

  int batch_size = cfg.resolved_batch_size();
  int epochs = cfg.resolved_epochs();
  // Bucket sizes are epoch-independent, so the batch count per epoch is too.
  std::map<int, int> bucket_sizes;
  for (int l : lengths) bucket_sizes[l]++;
  int batches_per_epoch = 0;
  for (auto& [len, cnt] : bucket_sizes) {
    (void)len;
    batches_per_epoch += (cnt + batch_size - 1) / batch_size;
  }
  int total_steps = epochs * batches_per_epoch;

  AdamW opt(m.all_params(), cfg, total_steps);
  TrainResult res;
  res.total_steps = total_steps;
  std::vector<Tensor> best;
  std::mt19937_64 shuffle_rng(mix_seed(run_seed, 0x20));
  int step = 0;
  for (int epoch = 0; epoch < epochs; epoch++) {
    auto batches = make_batches(lengths, batch_size, shuffle_rng);
    double epoch_loss = 0.0;
    for (auto& batch : batches) {
      Graph g(cfg.precision, mix_seed(run_seed, 0x1000u + (uint64_t)step));
      g.training = true;
      m.zero_grads();
      double loss;
      try {
        Var total;
        for (int idx : batch) {
          Var li = example_loss(g, m, *train[idx]);
          total = total.valid() ? g.add(total, li) : li;
        }
        Var mean = g.scale(total, 1.0 / (double)batch.size());
        g.backward(mean);
        loss = g.value(mean)[0];
      } catch (const std::exception& e) {
        throw std::runtime_error("training aborted at step " + std::to_string(step) + " (epoch " +
                                 std::to_string(epoch + 1) + "): " + e.what());
      }
      res.step_losses.push_back(loss);
      epoch_loss += loss;
      opt.step();
      step++;
    }
    Metrics dev = evaluate_split(m, dev_set);
    res.dev_f1.push_back(dev.f1);
    if (res.best_epoch < 0 || dev.f1 > res.best_dev_f1) {
      res.best_dev_f1 = dev.f1;
      res.best_epoch = epoch;
      best = m.values();
    }
    if (log)
      *log << "epoch " << (epoch + 1) << "/" << epochs << " mean_loss "
           << (batches.empty() ? 0.0 : epoch_loss / (double)batches.size()) << " dev_f1 " << dev.f1
           << " lr " << opt.last_lr << "\n";
  }
  if (!best.empty()) m.set_values(best);
  return res;
}

void dump_gate_records(HvpModel& m, const std::vector<Example>& examples, std::ostream& os) {
  for (auto& ex : examples) {
    Graph g(m.cfg.precision);
    g.training = false;
    ForwardTrace tr;
    model_hidden(g, m, ex.tokens, ex.global, ex.crops, ex.id, &tr);
    for (auto& r : tr.gates) {
      nlohmann::json rec;
      rec["example_id"] = r.example_id;
      rec["layer"] = r.layer;
      rec["input_index"] = r.input_index;
      rec["probs"] = r.probs;
      os << rec.dump() << "\n";
    }
  }
}

void dump_attn_records(HvpModel& m, const std::vector<Example>& examples, std::ostream& os) {
  for (auto& ex : examples) {
    Graph g(m.cfg.precision);
    g.training = false;
    ForwardTrace tr;
    model_hidden(g, m, ex.tokens, ex.global, ex.crops, ex.id, &tr);
    for (auto& r : tr.attn) {
      nlohmann::json rec;
      rec["example_id"] = r.example_id;
      rec["layer"] = r.layer;
      rec["head"] = r.head;
      rec["token_index"] = r.token_index;
      rec["prefix_cell_index"] = r.prefix_cell_index;
      rec["weight"] = r.weight;
      os << rec.dump() << "\n";
    }
  }
}

}  // namespace hvp
