#include "hvp/heads.hpp"

#include "hvp/rng.hpp"

namespace hvp {

namespace {

Tensor normal_init(std::mt19937_64& rng, std::vector<int> shape, double std) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng_normal(rng) * std;
  return t;
}

}  // namespace

int bio_tag_count(int entity_types) { return 2 * entity_types + 1; }
int bio_begin_tag(int type) { return 1 + 2 * type; }
int bio_inside_tag(int type) { return 2 + 2 * type; }

std::string bio_tag_name(int tag, int entity_types) {
  if (tag == 0) return "O";
  if (tag < 0 || tag >= bio_tag_count(entity_types)) return "?";
  int type = (tag - 1) / 2;
  return (tag % 2 == 1 ? "B-T" : "I-T") + std::to_string(type);
}

std::vector<Span> spans_from_tags(const std::vector<int>& tags, int entity_types) {
  std::vector<Span> spans;
  int open_type = -1, open_start = -1;
  auto close = [&](int end) {
    if (open_type >= 0) spans.push_back({open_start, end - open_start, open_type});
    open_type = -1;
  };
  for (size_t i = 0; i < tags.size(); ++i) {
    int t = tags[i];
    if (t <= 0 || t >= bio_tag_count(entity_types)) {
      close(static_cast<int>(i));
      continue;
    }
    int type = (t - 1) / 2;
    bool begin = t % 2 == 1;
    if (begin || type != open_type) {
      close(static_cast<int>(i));
      open_type = type;
      open_start = static_cast<int>(i);
    }
  }
  close(static_cast<int>(tags.size()));
  return spans;
}

std::vector<int> tags_from_spans(const std::vector<Span>& spans, int n, int entity_types) {
  std::vector<int> tags(static_cast<size_t>(n), 0);
  for (const Span& s : spans) {
    if (s.start < 0 || s.len <= 0 || s.start + s.len > n || s.type < 0 || s.type >= entity_types) {
      throw std::invalid_argument("tags_from_spans: span out of range");
    }
    tags[static_cast<size_t>(s.start)] = bio_begin_tag(s.type);
    for (int i = 1; i < s.len; ++i) {
      tags[static_cast<size_t>(s.start + i)] = bio_inside_tag(s.type);
    }
  }
  return tags;
}

CrfParams::CrfParams(const Config& cfg, std::mt19937_64& rng)
    : emit_w("crf.emit_w", normal_init(rng, {cfg.d_model, cfg.num_tags()}, cfg.init_std), true),
      emit_b("crf.emit_b", Tensor::zeros({cfg.num_tags()}), false),
      transition("crf.transition", normal_init(rng, {cfg.num_tags(), cfg.num_tags()}, cfg.init_std),
                 true),
      start("crf.start", normal_init(rng, {cfg.num_tags()}, cfg.init_std), true),
      stop("crf.stop", normal_init(rng, {cfg.num_tags()}, cfg.init_std), true) {}

void CrfParams::collect(std::vector<Param*>& out) {
  for (Param* p : {&emit_w, &emit_b, &transition, &start, &stop}) out.push_back(p);
}

Var crf_emissions(Graph& g, Var hidden, CrfParams& params) {
  return g.add_rowvec(g.matmul(hidden, g.param(params.emit_w)), g.param(params.emit_b));
}

Var crf_log_partition(Graph& g, Var emissions, CrfParams& params) {
  int n = g.value(emissions).dim(0);
  int y = g.value(emissions).dim(1);
  Var start_row = g.reshape(g.param(params.start), {1, y});
  Var alpha = g.add(start_row, g.slice(emissions, 0, 0, 1));
  Var trans_t = g.transpose(g.param(params.transition));
  for (int t = 1; t < n; ++t) {
    Var scored = g.add_rowvec(trans_t, alpha);  // row j holds alpha_i + T[i, j]
    Var lse = g.reshape(g.logsumexp_rows(scored), {1, y});
    alpha = g.add(lse, g.slice(emissions, 0, t, 1));
  }
  Var terminal = g.add(alpha, g.reshape(g.param(params.stop), {1, y}));
  return g.logsumexp_rows(terminal);
}

Var crf_nll(Graph& g, Var emissions, const std::vector<int>& gold, CrfParams& params) {
  int n = g.value(emissions).dim(0);
  int y = g.value(emissions).dim(1);
  if (static_cast<int>(gold.size()) != n) {
    throw std::invalid_argument("crf_nll: " + std::to_string(gold.size()) + " gold tags for " +
                                std::to_string(n) + " emission rows");
  }
  for (int t : gold) {
    if (t < 0 || t >= y) {
      throw std::invalid_argument("crf_nll: gold tag " + std::to_string(t) + " outside 0.." +
                                  std::to_string(y - 1));
    }
  }
  std::vector<int64_t> emit_idx;
  for (int t = 0; t < n; ++t) {
    emit_idx.push_back(static_cast<int64_t>(t) * y + gold[static_cast<size_t>(t)]);
  }
  Var gold_score = g.sum(g.gather(emissions, emit_idx));
  gold_score = g.add(gold_score, g.gather(g.param(params.start), {gold.front()}));
  gold_score = g.add(gold_score, g.gather(g.param(params.stop), {gold.back()}));
  if (n > 1) {
    std::vector<int64_t> trans_idx;
    for (int t = 1; t < n; ++t) {
      trans_idx.push_back(static_cast<int64_t>(gold[static_cast<size_t>(t - 1)]) * y +
                          gold[static_cast<size_t>(t)]);
    }
    gold_score = g.add(gold_score, g.sum(g.gather(g.param(params.transition), trans_idx)));
  }
  return g.add(crf_log_partition(g, emissions, params), g.scale(gold_score, -1.0));
}

std::vector<int> crf_viterbi(const Tensor& emissions, const Tensor& transition, const Tensor& start,
                             const Tensor& stop) {
  int n = emissions.dim(0);
  int y = emissions.dim(1);
  std::vector<double> score(static_cast<size_t>(y));
  std::vector<std::vector<int>> back(static_cast<size_t>(n), std::vector<int>(static_cast<size_t>(y), 0));
  for (int j = 0; j < y; ++j) score[static_cast<size_t>(j)] = start[j] + emissions[j];
  std::vector<double> next(static_cast<size_t>(y));
  for (int t = 1; t < n; ++t) {
    for (int j = 0; j < y; ++j) {
      double best = score[0] + transition[j];
      int arg = 0;
      for (int i = 1; i < y; ++i) {
        double s = score[static_cast<size_t>(i)] + transition[static_cast<int64_t>(i) * y + j];
        if (s > best) {
          best = s;
          arg = i;
        }
      }
      next[static_cast<size_t>(j)] = best + emissions[static_cast<int64_t>(t) * y + j];
      back[static_cast<size_t>(t)][static_cast<size_t>(j)] = arg;
    }
    score = next;
  }
  int last = 0;
  double best = score[0] + stop[0];
  for (int j = 1; j < y; ++j) {
    double s = score[static_cast<size_t>(j)] + stop[j];
    if (s > best) {
      best = s;
      last = j;
    }
  }
  std::vector<int> path(static_cast<size_t>(n));
  path[static_cast<size_t>(n - 1)] = last;
  for (int t = n - 1; t > 0; --t) {
    last = back[static_cast<size_t>(t)][static_cast<size_t>(last)];
    path[static_cast<size_t>(t - 1)] = last;
  }
  return path;
}

ReParams::ReParams(const Config& cfg, std::mt19937_64& rng)
    : w("re.w", normal_init(rng, {cfg.d_model, cfg.num_relations}, cfg.init_std), true),
      b("re.b", Tensor::zeros({cfg.num_relations}), false) {}

void ReParams::collect(std::vector<Param*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

Var re_logits(Graph& g, Var hidden, ReParams& params) {
  return g.add_rowvec(g.matmul(g.slice(hidden, 0, 0, 1), g.param(params.w)), g.param(params.b));
}

Var re_loss(Graph& g, Var logits, int gold) {
  int r = g.value(logits).dim(1);
  if (gold < 0 || gold >= r) {
    throw std::invalid_argument("re_loss: gold relation " + std::to_string(gold) + " outside 0.." +
                                std::to_string(r - 1));
  }
  return g.add(g.logsumexp_rows(logits), g.scale(g.gather(logits, {gold}), -1.0));
}

int re_predict(const Tensor& logits) {
  int arg = 0;
  for (int64_t i = 1; i < logits.numel(); ++i) {
    if (logits[i] > logits[arg]) arg = static_cast<int>(i);
  }
  return arg;
}

}  // namespace hvp
