#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gplab/autodiff.hpp"
#include "gplab/common.hpp"
#include "gplab/encoders.hpp"
#include "gplab/graph.hpp"
#include "gplab/optim.hpp"
#include "gplab/prompts.hpp"

namespace gplab::atk {

using ad::Tape;
using ad::Var;

// Sample-conditioned trigger generator: a two-layer MLP on the pooled
// prompted embedding feeding two linear heads — node features (s x d) and
// adjacency logits (s x s).
struct TriggerGeneratorParams {
  int hidden = 0;        // input width (encoder hidden size)
  int feat_dim = 0;      // d of generated node features
  int trigger_size = 0;  // s
  Mat m1, c1;            // hidden -> hidden plus bias rows
  Mat m2, c2;
  Mat wf, cf;            // hidden -> s*d
  Mat wa, ca;            // hidden -> s*s

  static TriggerGeneratorParams init(int hidden, int feat_dim, int trigger_size,
                                     Rng& rng);

  std::vector<Mat*> weights();
  std::vector<const Mat*> weights() const;

  json to_json() const;
  static TriggerGeneratorParams from_json(const json& j);
};

// A concrete trigger instance.
struct Trigger {
  Mat x;           // s x d generated node features
  Mat adj_logits;  // s x s raw structure-head output
  Mat adj;         // s x s binary, symmetric, zero diagonal

  json to_json() const;
  static Trigger from_json(const json& j);
};

struct GenVars {
  Var m1, c1, m2, c2, wf, cf, wa, ca;
};

GenVars register_generator(Tape& t, const TriggerGeneratorParams& g, bool trainable);

// Differentiable trigger synthesis from a pooled embedding (1 x hidden).
struct TriggerVars {
  Var x;        // s x d
  Var logits;   // s x s
  Var adj_bin;  // straight-through binarized adjacency
};

TriggerVars generate_trigger_t(Tape& t, const TriggerGeneratorParams& g,
                               const GenVars& gv, Var pooled);

// Value-level wrapper: trigger for one ego with all parameters fixed.
Trigger generate_trigger(const TriggerGeneratorParams& g, prompt::PromptContext& ctx,
                         const prompt::PromptState& ps, const EgoEntry& e);

// How trigger nodes wire to the ego center.
enum class AnchorRule { center_to_first, center_to_all };

// Block-local indices of trigger nodes that receive an edge from the center.
std::vector<int> anchor_links(AnchorRule rule, int trigger_size);

// Graph-level attachment: ego materialized from its source with the trigger
// grafted onto the center node. An empty trigger returns the ego unchanged.
Graph attach_trigger(const EgoEntry& e, const Graph& source, const Trigger& trig,
                     AnchorRule rule);

struct AttackConfig {
  int target_class = 0;
  double lambda = 50.0;  // backdoor weight inside the resistant loss
  double epsilon = 5.0;  // perturbation budget (L2 over flattened prompt)
  int ascent_steps = 5;  // T
  int inner_steps = 5;   // N
  int outer_iters = 25;  // K
  int trigger_size = 7;
  double poison_ratio = 0.20;
  AnchorRule anchor = AnchorRule::center_to_first;
  prompt::Scheme scheme = prompt::Scheme::graphprompt;
  prompt::HeaderKind header_kind = prompt::HeaderKind::prototype;
  int num_tokens = 5;  // allinone token count
  int batch_labeled = 64;
  int batch_poison = 64;
  int batch_unlabeled = 64;
  double lr_prompt = 1e-2;
  double lr_header = 1e-2;
  double lr_gen = 1e-3;
  int hops = 2;
  bool per_step_norm = false;   // size ascent steps by each step's own gradient
                                // norm instead of the running max
  bool regen_shifted = false;   // regenerate triggers from the shifted prompt
                                // inside the resistant loss
  double er_edge_prob = 0.3;    // ER density for fixed-trigger methods
  double prompt_noise_rel = 0.1;  // relative noise for the frozen-prompt variant
  double unnotice_weight = 0.0;   // feature-similarity regularizer (diverse-
                                  // selection baseline turns this on)
  std::uint64_t seed = 0;
  std::string log_csv;  // when set, per-iteration rows are flushed here
  prompt::TrainCfg clean;  // clean prompt/header stage

  void validate() const;  // range checks; throws ConfigError
  json to_json() const;
  static AttackConfig from_json(const json& j);
};

enum class Variant { tgpa, tgpa_r, tgpa_p, bl_rand, sba_p, gta_p, ugba_p };

Variant variant_from_string(const std::string& s);
std::string to_string(Variant v);

struct LogRow {
  int iter = 0;
  double loss_clean = 0.0;
  double loss_backdoor = 0.0;
  double loss_trigger = 0.0;
  double delta_norm = 0.0;
};

struct AttackRun {
  std::string variant = "tgpa";
  enc::EncoderParams encoder;  // frozen
  prompt::PromptState prompt;
  prompt::TaskHeader header;
  TriggerGeneratorParams gen;
  std::optional<Trigger> fixed_trigger;  // universal-trigger methods
  AttackConfig cfg;
  std::uint64_t encoder_checksum_before = 0;
  std::uint64_t encoder_checksum_after = 0;
  std::vector<LogRow> log;

  // Trigger for one target: the fixed one if present, else freshly generated
  // from the ego's prompted embedding.
  Trigger trigger_for(prompt::PromptContext& ctx, const EgoEntry& e) const;

  void save(const std::string& dir) const;
  static AttackRun load(const std::string& dir);
};

// ---- loss builders (tape level). `meta` supplies scheme/link threshold; the
// prompt values flow through the passed Vars (possibly shifted). ----

Var loss_clean_t(Tape& t, prompt::PromptContext& ctx, const enc::EncoderVars& ev,
                 const prompt::TaskHeader& hdr, const prompt::HeaderVars& hv,
                 const prompt::PromptState& meta, Var prompt_cls,
                 const std::vector<const EgoEntry*>& batch);

// Mean loss toward the target class with generated triggers attached.
// prompt_gen parameterizes the embedding the generator sees; prompt_cls the
// prompted classification of the trigger-bearing ego.
Var loss_backdoor_t(Tape& t, prompt::PromptContext& ctx, const enc::EncoderVars& ev,
                    const TriggerGeneratorParams& g, const GenVars& gv,
                    const prompt::TaskHeader& hdr, const prompt::HeaderVars& hv,
                    const prompt::PromptState& meta, Var prompt_cls, Var prompt_gen,
                    const std::vector<const EgoEntry*>& batch, int target_class,
                    AnchorRule rule);

// Same objective with one externally fixed trigger for every ego.
Var loss_fixed_trigger_t(Tape& t, prompt::PromptContext& ctx,
                         const enc::EncoderVars& ev, const Trigger& trig,
                         const prompt::TaskHeader& hdr, const prompt::HeaderVars& hv,
                         const prompt::PromptState& meta, Var prompt_cls,
                         const std::vector<const EgoEntry*>& batch,
                         int target_class, AnchorRule rule);

// ---- loss values on fixed parameters (logging, tests, audits) ----

double loss_clean_value(prompt::PromptContext& ctx, const prompt::PromptState& ps,
                        const prompt::TaskHeader& hdr,
                        const std::vector<const EgoEntry*>& batch);

double loss_backdoor_value(prompt::PromptContext& ctx, const prompt::PromptState& ps,
                           const Mat& delta, const TriggerGeneratorParams& g,
                           const prompt::TaskHeader& hdr,
                           const std::vector<const EgoEntry*>& batch,
                           int target_class, const AttackConfig& cfg);

// loss_clean + loss_backdoor at delta = 0, evaluated on one tape.
double loss_poisoned_value(prompt::PromptContext& ctx, const prompt::PromptState& ps,
                           const TriggerGeneratorParams& g, const prompt::TaskHeader& hdr,
                           const std::vector<const EgoEntry*>& labeled,
                           const std::vector<const EgoEntry*>& poison,
                           const AttackConfig& cfg);

// Backdoor objective over trigger-training nodes (unlabeled; test targets are
// excluded from that pool by the split construction).
double loss_trigger_value(prompt::PromptContext& ctx, const prompt::PromptState& ps,
                          const TriggerGeneratorParams& g, const prompt::TaskHeader& hdr,
                          const std::vector<const EgoEntry*>& batch,
                          const AttackConfig& cfg);

// loss_clean + lambda * loss_backdoor(p + delta).
double loss_resistant_value(prompt::PromptContext& ctx, const prompt::PromptState& ps,
                            const Mat& delta, const TriggerGeneratorParams& g,
                            const prompt::TaskHeader& hdr,
                            const std::vector<const EgoEntry*>& labeled,
                            const std::vector<const EgoEntry*>& poison,
                            const AttackConfig& cfg);

// ---- optimization steps ----

// Projected gradient ascent of `objective` over a perturbation of `base`.
// Step t uses step size epsilon / (T * M_t), M_t the running max (or current,
// when per_step) gradient norm; every iterate is projected onto the
// epsilon-ball. Zero gradient at the first step returns zero immediately.
Mat ascend_core(const Mat& base, double epsilon, int steps, bool per_step,
                const std::function<Var(Tape&, Var)>& objective);

// Ascent specialized to the backdoor loss over a poison batch.
Mat ascend_delta(prompt::PromptContext& ctx, const prompt::PromptState& ps,
                 const TriggerGeneratorParams& g, const prompt::TaskHeader& hdr,
                 const std::vector<const EgoEntry*>& poison_batch,
                 const AttackConfig& cfg);

// One resistant-loss descent step on prompt and header (generator, delta
// fixed). Optimizer state lives with the caller. Reports the clean/backdoor
// components when requested.
void inner_update(prompt::PromptContext& ctx, prompt::PromptState& ps,
                  prompt::TaskHeader& hdr, const TriggerGeneratorParams& g,
                  const Mat& delta, const std::vector<const EgoEntry*>& labeled_batch,
                  const std::vector<const EgoEntry*>& poison_batch,
                  const AttackConfig& cfg, Adam& opt_prompt, Adam& opt_header,
                  bool update_prompt, double* lc_out = nullptr,
                  double* lb_out = nullptr);

// One trigger-loss descent step on the generator with prompt, delta and
// header entering as constants (first-order outer step). When
// cfg.unnotice_weight > 0, a feature-similarity penalty between trigger rows
// and the ego center's features is added.
void outer_update(prompt::PromptContext& ctx, const prompt::PromptState& ps,
                  const prompt::TaskHeader& hdr, TriggerGeneratorParams& g,
                  const std::vector<const EgoEntry*>& trigger_batch,
                  const AttackConfig& cfg, Adam& opt_gen,
                  double* lg_out = nullptr);

// ---- top-level drivers ----

AttackRun run_tgpa(const enc::EncoderParams& encoder, std::shared_ptr<const Graph> graph,
                   const NodeSplit& split, const AttackConfig& cfg);

AttackRun run_variant(Variant v, const enc::EncoderParams& encoder,
                      std::shared_ptr<const Graph> graph, const NodeSplit& split,
                      const AttackConfig& cfg);

}  // namespace gplab::atk
