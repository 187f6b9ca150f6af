#ifndef HVP_SYNTH_HPP
#define HVP_SYNTH_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "hvp/config.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Vocabulary layout. Id 0 is the reserved classification token and never
// appears in generated sentences. Head tokens open mentions: unambiguous heads
// map to one entity type, ambiguous heads to a fixed 2-type candidate pair
// with equal priors. Continuation tokens extend 2-token mentions; everything
// above them is plain context.
struct VocabLayout {
  int entity_types = 0;
  int pairs = 0;               // entity_types choose 2
  int unambiguous_per_type = 8;
  int ambiguous_per_pair = 4;
  int continuation_count = 16;
  int unambiguous_base = 1;
  int ambiguous_base = 0;
  int continuation_base = 0;
  int context_base = 0;
  int vocab_size = 0;

  explicit VocabLayout(const Config& cfg);
  bool is_unambiguous_head(int id) const;
  bool is_ambiguous_head(int id) const;
  int head_type(int id) const;                    // unambiguous heads
  std::pair<int, int> head_pair(int id) const;    // ambiguous heads, type-sorted
  int pair_index(int a, int b) const;             // unordered pair -> 0..pairs-1
};

struct Example {
  int id = 0;
  std::vector<int> tokens;
  std::vector<int> tags;  // BIO indices, aligned with tokens
  int relation = 0;       // 0 = None
  Tensor global;          // [3, S, S]
  std::vector<Tensor> crops;
  std::vector<bool> relevance;

  // Generation-side truth, not serialized; empty after load_corpus.
  std::vector<int> mention_start, mention_len, mention_type;
  std::vector<int> mention_alt;  // -1 when unambiguous, else the wrong candidate
};

// 8x8 binary glyph for an entity type, deterministic, distinct density per
// type. Returned row-major, values 0/1.
std::vector<int> type_glyph(int type, int entity_types);
std::vector<int> distractor_glyph();

// Relation labeling: None when the two mention types are equal, else one of
// num_relations-1 classes such that changing either type always changes the
// label (keeps ambiguous examples exactly 2-way).
int relation_label(int type_a, int type_b, int num_relations);

struct CorpusSplit {
  std::string name;
  std::vector<Example> examples;
};

// Deterministic generator. NER corpora draw per-mention ambiguity Bernoulli(rho)
// capped at num_objects; RE corpora use exactly two mentions and at most one
// ambiguous mention so the analytic ceiling 1 - rho/2 holds exactly for both.
// Splits are disjoint by token sequence.
std::vector<CorpusSplit> generate_corpus(const Config& cfg);

double text_only_ceiling(const Config& cfg);

// Replaces one relevant crop of a `rate` fraction of examples with a glyph of
// a type absent from the sentence; global images untouched.
void inject_irrelevant_objects(std::vector<Example>& examples, double rate, uint64_t seed,
                               const Config& cfg);

// <split>.jsonl + <split>.hvpt + <split>.idx under dir.
void save_corpus(const std::string& dir, const CorpusSplit& split, Task task);
std::vector<Example> load_corpus(const std::string& dir, const std::string& split_name,
                                 const Config& cfg);

}  // namespace hvp

#endif
