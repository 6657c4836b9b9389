#pragma once

#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gplab/encoders.hpp"
#include "gplab/graph.hpp"

namespace gplab::prompt {

enum class Scheme { graphprompt, gppt, allinone };
enum class HeaderKind { prototype, token_link, linear };

Scheme scheme_from_string(const std::string& s);
std::string to_string(Scheme s);
HeaderKind header_from_string(const std::string& s);
std::string to_string(HeaderKind k);

// Learnable prompt parameters for one GPL scheme.
//   graphprompt — p: 1 x h, multiplies node embeddings before sum readout
//   gppt        — structure token: 1 x h, added to the pooled embedding
//                 (task tokens live in the token-link header)
//   allinone    — token features: m x d grafted onto the input graph;
//                 token-node links appear where feature dot product exceeds
//                 link_threshold, tokens are fully interconnected
struct PromptState {
  Scheme scheme = Scheme::graphprompt;
  Mat p;
  double link_threshold = 0.0;

  static PromptState init(Scheme scheme, int hidden, int in_dim, int num_tokens, Rng& rng);

  json to_json() const;
  static PromptState from_json(const json& j);
  void save(const std::string& path) const;
  static PromptState load(const std::string& path);
};

// Downstream classifier on pooled embeddings.
//   prototype  — w: C x h class centers plus accumulation counts; scores are
//                cosine similarities (temperature-scaled inside the loss)
//   token_link — w: C x h task tokens, cosine-scored, gradient-trained
//   linear     — w: h x C weights and b: 1 x C bias
struct TaskHeader {
  HeaderKind kind = HeaderKind::prototype;
  Mat w;
  Mat b;
  std::vector<double> counts;
  double temperature = 0.1;

  static TaskHeader init(HeaderKind kind, int num_classes, int hidden, Rng& rng);

  int num_classes() const;
  bool fitted() const;

  json to_json() const;
  static TaskHeader from_json(const json& j);
  void save(const std::string& path) const;
  static TaskHeader load(const std::string& path);
};

// Frozen-encoder evaluation context over one source graph: layer-1
// projection rows plus per-ego pooled sums of clean embeddings (valid for
// latent prompting, where the encoder output is prompt-independent).
class PromptContext {
 public:
  PromptContext(std::shared_ptr<const Graph> source, const enc::EncoderParams* encoder);

  const enc::EncoderParams& encoder() const { return *encoder_; }
  const Graph& source() const { return *source_; }

  const Mat& clean_pooled(const EgoEntry& e);                       // 1 x h
  Mat clean_pooled_batch(const std::vector<const EgoEntry*>& es);   // B x h

  Mat xw1_rows(const EgoEntry& e) const;     // n x h constant layer-1 rows
  Mat xw1nb_rows(const EgoEntry& e) const;   // sage neighbor block
  Mat feature_rows(const EgoEntry& e) const;  // n x d

 private:
  std::shared_ptr<const Graph> source_;
  const enc::EncoderParams* encoder_;
  enc::ProjectionCache cache_;
  std::unordered_map<int, Mat> pooled_;
};

// Appended differentiable node block (the trigger): features s x d, binary
// adjacency s x s (straight-through), links ego-center <-> listed block nodes.
struct GraftBlock {
  ad::Var x;
  ad::Var adj;
  std::vector<int> anchor_links;
};

// Pooled prompted embedding of one ego graph, optionally with a grafted
// block. prompt is the tape handle of PromptState.p (value may be shifted by
// a perturbation). Fast path: latent schemes without a block reduce to an
// elementwise op on the cached clean pooled sum.
ad::Var pooled_prompted(ad::Tape& t, PromptContext& ctx, const enc::EncoderVars& ev,
                        const EgoEntry& e, Scheme scheme, double link_threshold,
                        ad::Var prompt, const GraftBlock* block);

// Batch of pooled prompted embeddings (B x h), no grafted blocks.
ad::Var pooled_batch(ad::Tape& t, PromptContext& ctx, const enc::EncoderVars& ev,
                     const std::vector<const EgoEntry*>& batch, Scheme scheme,
                     double link_threshold, ad::Var prompt);

struct HeaderVars {
  ad::Var w;
  ad::Var b;  // linear only
};
HeaderVars register_header(ad::Tape& t, const TaskHeader& h, bool trainable);

// Class scores for a batch of pooled rows: cosine against w rows (prototype /
// token_link) or affine map (linear).
ad::Var head_scores_t(ad::Tape& t, const TaskHeader& h, const HeaderVars& hv,
                      ad::Var pooled);

// Training loss: cross-entropy over temperature-scaled scores.
ad::Var head_loss_t(ad::Tape& t, const TaskHeader& h, const HeaderVars& hv, ad::Var pooled,
                    const std::vector<int>& labels);

// Non-tape scoring/prediction. Ties break to the lowest class id.
Mat head_scores(const TaskHeader& h, const Mat& pooled);
int head_predict(const TaskHeader& h, const Mat& pooled_row);

// Prompted pooled rows (B x h) for a set of entries, parameters fixed.
Mat pooled_rows(PromptContext& ctx, const PromptState& ps,
                const std::vector<const EgoEntry*>& batch);

// Pooled prompted embedding of an arbitrary materialized graph (the
// deployment-side composition, used e.g. after edge pruning). Latent schemes
// transform the sum readout; allinone grafts its tokens onto the input graph
// with similarity links before encoding.
Mat apply_prompt(const PromptState& ps, const Graph& g, const enc::EncoderParams& ep);

// Mean of pooled rows per class -> prototype centers and counts.
void fit_prototype(TaskHeader& h, const Mat& pooled, const std::vector<int>& labels);

struct TrainCfg {
  int epochs = 100;
  double lr_prompt = 1e-2;
  double lr_header = 1e-2;
  int batch = 64;
  std::uint64_t seed = 0;
};

// Clean prompt/header training on labeled ego-graphs (encoder frozen).
// Prototype headers are re-accumulated from current embeddings each epoch;
// gradient headers are trained jointly with the prompt.
std::pair<PromptState, TaskHeader> train_clean(PromptState prompt, TaskHeader header,
                                               PromptContext& ctx, const EgoDataset& data,
                                               const TrainCfg& cfg);

// Header-only fine-tuning on clean data with the prompt fixed. Prototype:
// running-mean accumulation of the new embeddings; others: gradient steps.
TaskHeader finetune_header(TaskHeader header, const PromptState& prompt, PromptContext& ctx,
                           const EgoDataset& clean_data, const TrainCfg& cfg);

// Prompt-only fine-tuning on clean data with the header fixed.
PromptState finetune_prompt(PromptState prompt, const TaskHeader& header, PromptContext& ctx,
                            const EgoDataset& clean_data, const TrainCfg& cfg);

// Flattened L2 norm of a prompt parameter matrix (for perturbation bookkeeping).
double prompt_norm(const Mat& p);

}  // namespace gplab::prompt
