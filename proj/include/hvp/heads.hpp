#ifndef HVP_HEADS_HPP
#define HVP_HEADS_HPP

#include <string>
#include <vector>

#include "hvp/config.hpp"
#include "hvp/graph.hpp"

namespace hvp {

// BIO tag layout: 0 = O, entity type k has B at 1+2k and I at 2+2k.
int bio_tag_count(int entity_types);
int bio_begin_tag(int type);
int bio_inside_tag(int type);
std::string bio_tag_name(int tag, int entity_types);

struct Span {
  int start = 0;
  int len = 0;
  int type = 0;
  bool operator==(const Span& o) const { return start == o.start && len == o.len && type == o.type; }
};

// Lenient reading: an I-X without a preceding B-X/I-X opens a new X span.
std::vector<Span> spans_from_tags(const std::vector<int>& tags, int entity_types);
std::vector<int> tags_from_spans(const std::vector<Span>& spans, int n, int entity_types);

struct CrfParams {
  Param emit_w;      // [d, Y]
  Param emit_b;      // [Y]
  Param transition;  // [Y, Y], entry (i, j) scores i -> j
  Param start;       // [Y]
  Param stop;        // [Y]

  CrfParams(const Config& cfg, std::mt19937_64& init_rng);
  void collect(std::vector<Param*>& out);
};

Var crf_emissions(Graph& g, Var hidden, CrfParams& params);

// log Z over all |Y|^n paths via the log-space forward recursion.
Var crf_log_partition(Graph& g, Var emissions, CrfParams& params);

Var crf_nll(Graph& g, Var emissions, const std::vector<int>& gold, CrfParams& params);

// Max-product decoding on plain values; ties break toward the lower tag index.
std::vector<int> crf_viterbi(const Tensor& emissions, const Tensor& transition, const Tensor& start,
                             const Tensor& stop);

struct ReParams {
  Param w;  // [d, |relations|]
  Param b;

  ReParams(const Config& cfg, std::mt19937_64& init_rng);
  void collect(std::vector<Param*>& out);
};

// Logits from the reserved classification row (row 0 of H^L).
Var re_logits(Graph& g, Var hidden, ReParams& params);

Var re_loss(Graph& g, Var logits, int gold);

int re_predict(const Tensor& logits);

}  // namespace hvp

#endif
