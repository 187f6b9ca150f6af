#ifndef HVP_MODEL_HPP
#define HVP_MODEL_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "hvp/config.hpp"
#include "hvp/encoder.hpp"
#include "hvp/gate.hpp"
#include "hvp/graph.hpp"
#include "hvp/heads.hpp"
#include "hvp/pyramid.hpp"

namespace hvp {

struct ForwardTrace {
  std::vector<GateRecord> gates;
  std::vector<AttnRecord> attn;
};

// Full model: visual backbone + pyramid mapping, per-layer gates, prefix
// encoder, CRF tagger and relation classifier. Parameter layout depends only
// on the config; the init seed fixes every weight.
struct HvpModel {
  Config cfg;
  BackboneParams backbone;
  GateParams gate;
  EncoderParams encoder;
  CrfParams crf;
  ReParams re;

  HvpModel(const Config& cfg, uint64_t init_seed);
  HvpModel(const HvpModel&) = delete;
  HvpModel& operator=(const HvpModel&) = delete;

  std::vector<Param*> all_params();
  std::vector<Param*> head_params();  // crf.* and re.*
  void zero_grads();

  // Snapshot/restore of parameter values, used for best-dev checkpoints.
  std::vector<Tensor> values() ;
  void set_values(const std::vector<Tensor>& vals);
};

// Final hidden states for one example, [rows, d]. RE prepends the reserved
// classification token id 0; naive_concat appends visual rows at the input
// and slices them back off here, so rows always cover exactly the input
// token positions.
Var model_hidden(Graph& g, HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                 const std::vector<Tensor>& crops, int example_id = 0, ForwardTrace* trace = nullptr);

Var model_ner_loss(Graph& g, HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                   const std::vector<Tensor>& crops, const std::vector<int>& gold_tags,
                   int example_id = 0, ForwardTrace* trace = nullptr);
Var model_re_loss(Graph& g, HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                  const std::vector<Tensor>& crops, int gold_relation, int example_id = 0,
                  ForwardTrace* trace = nullptr);

std::vector<int> model_predict_tags(HvpModel& m, const std::vector<int>& tokens,
                                    const Tensor& global_image, const std::vector<Tensor>& crops,
                                    int example_id = 0, ForwardTrace* trace = nullptr);
int model_predict_relation(HvpModel& m, const std::vector<int>& tokens, const Tensor& global_image,
                           const std::vector<Tensor>& crops, int example_id = 0,
                           ForwardTrace* trace = nullptr);

// Checkpoint: magic, version, config json, then named parameter tensors.
// include_heads=false skips crf.*/re.* so a tagger body can seed a relation
// model; any config field that changes parameter shapes must match.
void save_checkpoint(const std::string& path, HvpModel& m);
void load_checkpoint(const std::string& path, HvpModel& m, bool include_heads);
Config checkpoint_config(const std::string& path);

}  // namespace hvp

#endif
