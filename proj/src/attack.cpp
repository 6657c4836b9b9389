#include "gplab/attack.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "gplab/coverage.hpp"
#include "gplab/serialize.hpp"

namespace gplab::atk {

using prompt::HeaderVars;
using prompt::PromptContext;
using prompt::PromptState;
using prompt::TaskHeader;

namespace {

// Rethrow with a stage prefix, preserving the error type (it drives CLI exit codes).
template <class F>
auto with_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (ConfigError& e) {
    throw ConfigError(stage + ": " + e.what());
  } catch (DataError& e) {
    throw DataError(stage + ": " + e.what());
  } catch (DimensionError& e) {
    throw DimensionError(stage + ": " + e.what());
  } catch (IndexError& e) {
    throw IndexError(stage + ": " + e.what());
  } catch (TrainError& e) {
    throw TrainError(stage + ": " + e.what());
  } catch (EvalError& e) {
    throw EvalError(stage + ": " + e.what());
  }
}

}  // namespace

TriggerGeneratorParams TriggerGeneratorParams::init(int hidden, int feat_dim,
                                                    int trigger_size, Rng& rng) {
  if (hidden < 1 || feat_dim < 1 || trigger_size < 1)
    throw ConfigError("trigger generator: hidden, feat_dim and trigger size must be >= 1");
  TriggerGeneratorParams g;
  g.hidden = hidden;
  g.feat_dim = feat_dim;
  g.trigger_size = trigger_size;
  auto glorot = [&](int fin, int fout) {
    return gaussian(fin, fout, rng, std::sqrt(2.0 / (fin + fout)));
  };
  g.m1 = glorot(hidden, hidden);
  g.c1 = Mat::Zero(1, hidden);
  g.m2 = glorot(hidden, hidden);
  g.c2 = Mat::Zero(1, hidden);
  g.wf = glorot(hidden, trigger_size * feat_dim);
  g.cf = Mat::Zero(1, trigger_size * feat_dim);
  g.wa = glorot(hidden, trigger_size * trigger_size);
  g.ca = Mat::Zero(1, trigger_size * trigger_size);
  return g;
}

std::vector<Mat*> TriggerGeneratorParams::weights() {
  return {&m1, &c1, &m2, &c2, &wf, &cf, &wa, &ca};
}

std::vector<const Mat*> TriggerGeneratorParams::weights() const {
  return {&m1, &c1, &m2, &c2, &wf, &cf, &wa, &ca};
}

json TriggerGeneratorParams::to_json() const {
  return json{{"hidden", hidden},
              {"feat_dim", feat_dim},
              {"trigger_size", trigger_size},
              {"m1", mat_to_json(m1)},
              {"c1", mat_to_json(c1)},
              {"m2", mat_to_json(m2)},
              {"c2", mat_to_json(c2)},
              {"wf", mat_to_json(wf)},
              {"cf", mat_to_json(cf)},
              {"wa", mat_to_json(wa)},
              {"ca", mat_to_json(ca)}};
}

TriggerGeneratorParams TriggerGeneratorParams::from_json(const json& j) {
  TriggerGeneratorParams g;
  g.hidden = j.at("hidden").get<int>();
  g.feat_dim = j.at("feat_dim").get<int>();
  g.trigger_size = j.at("trigger_size").get<int>();
  g.m1 = mat_from_json(j.at("m1"));
  g.c1 = mat_from_json(j.at("c1"));
  g.m2 = mat_from_json(j.at("m2"));
  g.c2 = mat_from_json(j.at("c2"));
  g.wf = mat_from_json(j.at("wf"));
  g.cf = mat_from_json(j.at("cf"));
  g.wa = mat_from_json(j.at("wa"));
  g.ca = mat_from_json(j.at("ca"));
  return g;
}

json Trigger::to_json() const {
  return json{{"x", mat_to_json(x)},
              {"adj_logits", mat_to_json(adj_logits)},
              {"adj", mat_to_json(adj)}};
}

Trigger Trigger::from_json(const json& j) {
  Trigger t;
  t.x = mat_from_json(j.at("x"));
  t.adj_logits = mat_from_json(j.at("adj_logits"));
  t.adj = mat_from_json(j.at("adj"));
  return t;
}

GenVars register_generator(Tape& t, const TriggerGeneratorParams& g, bool trainable) {
  auto reg = [&](const Mat& m) { return trainable ? t.param(m) : t.constant(m); };
  return GenVars{reg(g.m1), reg(g.c1), reg(g.m2), reg(g.c2),
                 reg(g.wf), reg(g.cf), reg(g.wa), reg(g.ca)};
}

TriggerVars generate_trigger_t(Tape& t, const TriggerGeneratorParams& g,
                               const GenVars& gv, Var pooled) {
  cov::touch("generate_trigger");
  cov::touch("binarize_st");
  if (t.val(pooled).cols() != g.hidden || t.val(pooled).rows() != 1)
    throw DimensionError("trigger generator expects a 1x" + std::to_string(g.hidden) +
                         " pooled embedding, got " + std::to_string(t.val(pooled).rows()) +
                         "x" + std::to_string(t.val(pooled).cols()));
  Var h1 = t.relu(t.add(t.matmul(pooled, gv.m1), gv.c1));
  Var h2 = t.relu(t.add(t.matmul(h1, gv.m2), gv.c2));
  TriggerVars tv;
  Var xf = t.relu(t.add(t.matmul(h2, gv.wf), gv.cf));
  tv.x = t.reshape(xf, g.trigger_size, g.feat_dim);
  tv.logits = t.reshape(t.add(t.matmul(h2, gv.wa), gv.ca), g.trigger_size, g.trigger_size);
  tv.adj_bin = t.binarize_st(tv.logits);
  return tv;
}

Trigger generate_trigger(const TriggerGeneratorParams& g, PromptContext& ctx,
                         const PromptState& ps, const EgoEntry& e) {
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  Var p = t.constant(ps.p);
  Var pooled = prompt::pooled_prompted(t, ctx, ev, e, ps.scheme, ps.link_threshold, p, nullptr);
  GenVars gv = register_generator(t, g, false);
  TriggerVars tv = generate_trigger_t(t, g, gv, pooled);
  return Trigger{t.val(tv.x), t.val(tv.logits), t.val(tv.adj_bin)};
}

std::vector<int> anchor_links(AnchorRule rule, int trigger_size) {
  if (trigger_size < 1) return {};
  if (rule == AnchorRule::center_to_first) return {0};
  std::vector<int> all(static_cast<std::size_t>(trigger_size));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

Graph attach_trigger(const EgoEntry& e, const Graph& source, const Trigger& trig,
                     AnchorRule rule) {
  cov::touch("attach_trigger");
  Graph ego = materialize_ego(source, e);
  if (trig.x.rows() == 0) return ego;
  return graft(ego, 0, trig.x, trig.adj, anchor_links(rule, static_cast<int>(trig.x.rows())));
}

static std::string anchor_to_string(AnchorRule r) {
  return r == AnchorRule::center_to_first ? "center" : "all";
}

static AnchorRule anchor_from_string(const std::string& s) {
  if (s == "center") return AnchorRule::center_to_first;
  if (s == "all") return AnchorRule::center_to_all;
  throw ConfigError("unknown anchor rule '" + s + "' (expected one of {center, all})");
}

void AttackConfig::validate() const {
  if (target_class < 0) throw ConfigError("attack: target_class must be >= 0");
  if (lambda < 0.0 || epsilon < 0.0)
    throw ConfigError("attack: lambda and epsilon must be >= 0");
  if (ascent_steps < 1 || inner_steps < 1 || outer_iters < 1 || trigger_size < 1)
    throw ConfigError("attack: ascent_steps, inner_steps, outer_iters and trigger_size must be >= 1");
  if (!(poison_ratio > 0.0) || poison_ratio > 1.0)
    throw ConfigError("attack: poison_ratio must lie in (0, 1]");
  if (num_tokens < 1) throw ConfigError("attack: num_tokens must be >= 1");
  if (batch_labeled < 1 || batch_poison < 1 || batch_unlabeled < 1)
    throw ConfigError("attack: batch sizes must be >= 1");
  if (lr_prompt <= 0.0 || lr_header <= 0.0 || lr_gen <= 0.0)
    throw ConfigError("attack: learning rates must be positive");
  if (hops < 1) throw ConfigError("attack: hops must be >= 1");
  if (er_edge_prob < 0.0 || er_edge_prob > 1.0)
    throw ConfigError("attack: er_edge_prob must lie in [0, 1]");
  if (prompt_noise_rel < 0.0 || unnotice_weight < 0.0)
    throw ConfigError("attack: prompt_noise_rel and unnotice_weight must be >= 0");
  if (clean.epochs < 1) throw ConfigError("attack: clean.epochs must be >= 1");
  if (clean.lr_prompt <= 0.0 || clean.lr_header <= 0.0)
    throw ConfigError("attack: clean learning rates must be positive");
  if (clean.batch < 1) throw ConfigError("attack: clean.batch must be >= 1");
}

json AttackConfig::to_json() const {
  return json{{"target_class", target_class},
              {"lambda", lambda},
              {"epsilon", epsilon},
              {"ascent_steps", ascent_steps},
              {"inner_steps", inner_steps},
              {"outer_iters", outer_iters},
              {"trigger_size", trigger_size},
              {"poison_ratio", poison_ratio},
              {"anchor", anchor_to_string(anchor)},
              {"scheme", prompt::to_string(scheme)},
              {"header", prompt::to_string(header_kind)},
              {"num_tokens", num_tokens},
              {"batch_labeled", batch_labeled},
              {"batch_poison", batch_poison},
              {"batch_unlabeled", batch_unlabeled},
              {"lr_prompt", lr_prompt},
              {"lr_header", lr_header},
              {"lr_gen", lr_gen},
              {"hops", hops},
              {"per_step_norm", per_step_norm},
              {"regen_shifted", regen_shifted},
              {"er_edge_prob", er_edge_prob},
              {"prompt_noise_rel", prompt_noise_rel},
              {"unnotice_weight", unnotice_weight},
              {"seed", seed},
              {"log_csv", log_csv},
              {"clean",
               json{{"epochs", clean.epochs},
                    {"lr_prompt", clean.lr_prompt},
                    {"lr_header", clean.lr_header},
                    {"batch", clean.batch},
                    {"seed", clean.seed}}}};
}

AttackConfig AttackConfig::from_json(const json& j) {
  AttackConfig c;
  c.target_class = j.value("target_class", c.target_class);
  c.lambda = j.value("lambda", c.lambda);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.ascent_steps = j.value("ascent_steps", c.ascent_steps);
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  c.outer_iters = j.value("outer_iters", c.outer_iters);
  c.trigger_size = j.value("trigger_size", c.trigger_size);
  c.poison_ratio = j.value("poison_ratio", c.poison_ratio);
  if (j.contains("anchor")) c.anchor = anchor_from_string(j.at("anchor").get<std::string>());
  if (j.contains("scheme")) c.scheme = prompt::scheme_from_string(j.at("scheme").get<std::string>());
  if (j.contains("header")) c.header_kind = prompt::header_from_string(j.at("header").get<std::string>());
  c.num_tokens = j.value("num_tokens", c.num_tokens);
  c.batch_labeled = j.value("batch_labeled", c.batch_labeled);
  c.batch_poison = j.value("batch_poison", c.batch_poison);
  c.batch_unlabeled = j.value("batch_unlabeled", c.batch_unlabeled);
  c.lr_prompt = j.value("lr_prompt", c.lr_prompt);
  c.lr_header = j.value("lr_header", c.lr_header);
  c.lr_gen = j.value("lr_gen", c.lr_gen);
  c.hops = j.value("hops", c.hops);
  c.per_step_norm = j.value("per_step_norm", c.per_step_norm);
  c.regen_shifted = j.value("regen_shifted", c.regen_shifted);
  c.er_edge_prob = j.value("er_edge_prob", c.er_edge_prob);
  c.prompt_noise_rel = j.value("prompt_noise_rel", c.prompt_noise_rel);
  c.unnotice_weight = j.value("unnotice_weight", c.unnotice_weight);
  c.seed = j.value("seed", c.seed);
  c.log_csv = j.value("log_csv", c.log_csv);
  if (j.contains("clean")) {
    const json& k = j.at("clean");
    c.clean.epochs = k.value("epochs", c.clean.epochs);
    c.clean.lr_prompt = k.value("lr_prompt", c.clean.lr_prompt);
    c.clean.lr_header = k.value("lr_header", c.clean.lr_header);
    c.clean.batch = k.value("batch", c.clean.batch);
    c.clean.seed = k.value("seed", c.clean.seed);
  }
  c.validate();
  return c;
}

Variant variant_from_string(const std::string& s) {
  if (s == "tgpa") return Variant::tgpa;
  if (s == "tgpa_r") return Variant::tgpa_r;
  if (s == "tgpa_p") return Variant::tgpa_p;
  if (s == "bl_rand") return Variant::bl_rand;
  if (s == "sba_p") return Variant::sba_p;
  if (s == "gta_p") return Variant::gta_p;
  if (s == "ugba_p") return Variant::ugba_p;
  throw ConfigError("unknown attack variant '" + s +
                    "' (expected one of {tgpa, tgpa_r, tgpa_p, bl_rand, sba_p, gta_p, ugba_p})");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::tgpa: return "tgpa";
    case Variant::tgpa_r: return "tgpa_r";
    case Variant::tgpa_p: return "tgpa_p";
    case Variant::bl_rand: return "bl_rand";
    case Variant::sba_p: return "sba_p";
    case Variant::gta_p: return "gta_p";
    case Variant::ugba_p: return "ugba_p";
  }
  throw ConfigError("unknown attack variant");
}

Trigger AttackRun::trigger_for(PromptContext& ctx, const EgoEntry& e) const {
  if (fixed_trigger) return *fixed_trigger;
  return generate_trigger(gen, ctx, prompt, e);
}

// ---- loss builders ----

Var loss_clean_t(Tape& t, PromptContext& ctx, const enc::EncoderVars& ev,
                 const TaskHeader& hdr, const HeaderVars& hv, const PromptState& meta,
                 Var prompt_cls, const std::vector<const EgoEntry*>& batch) {
  cov::touch("loss_clean");
  if (batch.empty()) throw TrainError("loss_clean: empty ego batch");
  std::vector<int> labels;
  labels.reserve(batch.size());
  for (const EgoEntry* e : batch) {
    if (e->label < 0)
      throw DataError("loss_clean: ego centered at node " + std::to_string(e->center) +
                      " has no label");
    labels.push_back(e->label);
  }
  Var pooled = prompt::pooled_batch(t, ctx, ev, batch, meta.scheme, meta.link_threshold,
                                    prompt_cls);
  return prompt::head_loss_t(t, hdr, hv, pooled, labels);
}

Var loss_backdoor_t(Tape& t, PromptContext& ctx, const enc::EncoderVars& ev,
                    const TriggerGeneratorParams& g, const GenVars& gv,
                    const TaskHeader& hdr, const HeaderVars& hv, const PromptState& meta,
                    Var prompt_cls, Var prompt_gen,
                    const std::vector<const EgoEntry*>& batch, int target_class,
                    AnchorRule rule) {
  cov::touch("loss_backdoor");
  if (batch.empty()) throw TrainError("loss_backdoor: empty poison batch");
  if (target_class < 0 || target_class >= hdr.num_classes())
    throw ConfigError("loss_backdoor: target class " + std::to_string(target_class) +
                      " outside [0, " + std::to_string(hdr.num_classes()) + ")");
  auto links = anchor_links(rule, g.trigger_size);
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (const EgoEntry* e : batch) {
    Var pooled_gen = prompt::pooled_prompted(t, ctx, ev, *e, meta.scheme,
                                             meta.link_threshold, prompt_gen, nullptr);
    TriggerVars tv = generate_trigger_t(t, g, gv, pooled_gen);
    prompt::GraftBlock blk{tv.x, tv.adj_bin, links};
    rows.push_back(prompt::pooled_prompted(t, ctx, ev, *e, meta.scheme,
                                           meta.link_threshold, prompt_cls, &blk));
  }
  Var pooled = t.concat_rows(rows);
  std::vector<int> labels(batch.size(), target_class);
  return prompt::head_loss_t(t, hdr, hv, pooled, labels);
}

Var loss_fixed_trigger_t(Tape& t, PromptContext& ctx, const enc::EncoderVars& ev,
                         const Trigger& trig, const TaskHeader& hdr, const HeaderVars& hv,
                         const PromptState& meta, Var prompt_cls,
                         const std::vector<const EgoEntry*>& batch, int target_class,
                         AnchorRule rule) {
  cov::touch("loss_backdoor");
  if (batch.empty()) throw TrainError("loss_backdoor: empty poison batch");
  if (target_class < 0 || target_class >= hdr.num_classes())
    throw ConfigError("loss_backdoor: target class " + std::to_string(target_class) +
                      " outside [0, " + std::to_string(hdr.num_classes()) + ")");
  int s = static_cast<int>(trig.x.rows());
  auto links = anchor_links(rule, s);
  Var tx = t.constant(trig.x);
  Var ta = t.constant(trig.adj);
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (const EgoEntry* e : batch) {
    prompt::GraftBlock blk{tx, ta, links};
    rows.push_back(prompt::pooled_prompted(t, ctx, ev, *e, meta.scheme,
                                           meta.link_threshold, prompt_cls, &blk));
  }
  Var pooled = t.concat_rows(rows);
  std::vector<int> labels(batch.size(), target_class);
  return prompt::head_loss_t(t, hdr, hv, pooled, labels);
}

// ---- loss values ----

double loss_clean_value(PromptContext& ctx, const PromptState& ps, const TaskHeader& hdr,
                        const std::vector<const EgoEntry*>& batch) {
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  Var p = t.constant(ps.p);
  HeaderVars hv = prompt::register_header(t, hdr, false);
  Var l = loss_clean_t(t, ctx, ev, hdr, hv, ps, p, batch);
  return t.val(l)(0, 0);
}

double loss_backdoor_value(PromptContext& ctx, const PromptState& ps, const Mat& delta,
                           const TriggerGeneratorParams& g, const TaskHeader& hdr,
                           const std::vector<const EgoEntry*>& batch, int target_class,
                           const AttackConfig& cfg) {
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  Mat d = delta.size() ? delta : Mat(Mat::Zero(ps.p.rows(), ps.p.cols()));
  if (d.rows() != ps.p.rows() || d.cols() != ps.p.cols())
    throw DimensionError("loss_backdoor: perturbation shape differs from the prompt's");
  Var pcls = t.constant(ps.p + d);
  Var pgen = cfg.regen_shifted ? pcls : t.constant(ps.p);
  GenVars gv = register_generator(t, g, false);
  HeaderVars hv = prompt::register_header(t, hdr, false);
  Var l = loss_backdoor_t(t, ctx, ev, g, gv, hdr, hv, ps, pcls, pgen, batch, target_class,
                          cfg.anchor);
  return t.val(l)(0, 0);
}

double loss_poisoned_value(PromptContext& ctx, const PromptState& ps,
                           const TriggerGeneratorParams& g, const TaskHeader& hdr,
                           const std::vector<const EgoEntry*>& labeled,
                           const std::vector<const EgoEntry*>& poison,
                           const AttackConfig& cfg) {
  cov::touch("loss_poisoned");
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  Var p = t.constant(ps.p);
  GenVars gv = register_generator(t, g, false);
  HeaderVars hv = prompt::register_header(t, hdr, false);
  Var lc = loss_clean_t(t, ctx, ev, hdr, hv, ps, p, labeled);
  Var lb = loss_backdoor_t(t, ctx, ev, g, gv, hdr, hv, ps, p, p, poison,
                           cfg.target_class, cfg.anchor);
  return t.val(t.add(lc, lb))(0, 0);
}

double loss_trigger_value(PromptContext& ctx, const PromptState& ps,
                          const TriggerGeneratorParams& g, const TaskHeader& hdr,
                          const std::vector<const EgoEntry*>& batch,
                          const AttackConfig& cfg) {
  cov::touch("loss_trigger");
  return loss_backdoor_value(ctx, ps, Mat(), g, hdr, batch, cfg.target_class, cfg);
}

double loss_resistant_value(PromptContext& ctx, const PromptState& ps, const Mat& delta,
                            const TriggerGeneratorParams& g, const TaskHeader& hdr,
                            const std::vector<const EgoEntry*>& labeled,
                            const std::vector<const EgoEntry*>& poison,
                            const AttackConfig& cfg) {
  cov::touch("loss_resistant");
  double lc = loss_clean_value(ctx, ps, hdr, labeled);
  double lb = loss_backdoor_value(ctx, ps, delta, g, hdr, poison, cfg.target_class, cfg);
  return lc + cfg.lambda * lb;
}

// ---- optimization steps ----

Mat ascend_core(const Mat& base, double epsilon, int steps, bool per_step,
                const std::function<Var(Tape&, Var)>& objective) {
  cov::touch("ascend_delta");
  if (epsilon < 0.0) throw ConfigError("ascend: epsilon must be >= 0");
  if (steps < 1) throw ConfigError("ascend: need at least one step");
  Mat delta = Mat::Zero(base.rows(), base.cols());
  if (epsilon == 0.0) return delta;
  double running_max = 0.0;
  for (int step = 0; step < steps; ++step) {
    Tape t;
    Var pshift = t.input(base + delta, true);
    Var obj = objective(t, pshift);
    t.backward(obj);
    Mat g = t.grad(pshift);
    double gn = g.norm();
    if (gn == 0.0) {
      if (step == 0) return delta;  // stationary start: keep the zero perturbation
      continue;
    }
    running_max = per_step ? gn : std::max(running_max, gn);
    delta += (epsilon / (steps * running_max)) * g;
    double dn = delta.norm();
    if (dn > epsilon) delta *= epsilon / dn;
  }
  return delta;
}

Mat ascend_delta(PromptContext& ctx, const PromptState& ps,
                 const TriggerGeneratorParams& g, const TaskHeader& hdr,
                 const std::vector<const EgoEntry*>& poison_batch,
                 const AttackConfig& cfg) {
  auto objective = [&](Tape& t, Var pshift) -> Var {
    enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
    GenVars gv = register_generator(t, g, false);
    HeaderVars hv = prompt::register_header(t, hdr, false);
    Var pgen = cfg.regen_shifted ? pshift : t.constant(ps.p);
    return loss_backdoor_t(t, ctx, ev, g, gv, hdr, hv, ps, pshift, pgen, poison_batch,
                           cfg.target_class, cfg.anchor);
  };
  return ascend_core(ps.p, cfg.epsilon, cfg.ascent_steps, cfg.per_step_norm, objective);
}

namespace {

// Shared resistant-loss step; the fixed trigger (when present) replaces the
// generated one so universal-trigger methods reuse the same update.
void inner_step(PromptContext& ctx, PromptState& ps, TaskHeader& hdr,
                const TriggerGeneratorParams& g, const std::optional<Trigger>& fixed,
                const Mat& delta, const std::vector<const EgoEntry*>& labeled_batch,
                const std::vector<const EgoEntry*>& poison_batch, const AttackConfig& cfg,
                Adam& opt_prompt, Adam& opt_header, bool update_prompt, double* lc_out,
                double* lb_out) {
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  GenVars gv = register_generator(t, g, false);  // stop-gradient on the generator
  HeaderVars hv = prompt::register_header(t, hdr, true);
  Var p = t.input(ps.p, true);
  Mat d = delta.size() ? delta : Mat(Mat::Zero(ps.p.rows(), ps.p.cols()));
  if (d.rows() != ps.p.rows() || d.cols() != ps.p.cols())
    throw DimensionError("inner update: perturbation shape differs from the prompt's");
  Var pshift = t.input(ps.p + d, true);
  Var lc = loss_clean_t(t, ctx, ev, hdr, hv, ps, p, labeled_batch);
  Var lb = fixed ? loss_fixed_trigger_t(t, ctx, ev, *fixed, hdr, hv, ps, pshift,
                                        poison_batch, cfg.target_class, cfg.anchor)
                 : loss_backdoor_t(t, ctx, ev, g, gv, hdr, hv, ps, pshift,
                                   cfg.regen_shifted ? pshift : p, poison_batch,
                                   cfg.target_class, cfg.anchor);
  Var loss = t.add(lc, t.scale(lb, cfg.lambda));
  t.backward(loss);
  if (lc_out) *lc_out = t.val(lc)(0, 0);
  if (lb_out) *lb_out = t.val(lb)(0, 0);
  if (update_prompt) {
    Mat gp = t.grad(p) + t.grad(pshift);  // d(p + delta)/dp is the identity
    opt_prompt.step({&ps.p}, {gp});
  }
  if (hdr.kind == prompt::HeaderKind::linear)
    opt_header.step({&hdr.w, &hdr.b}, {t.grad(hv.w), t.grad(hv.b)});
  else
    opt_header.step({&hdr.w}, {t.grad(hv.w)});
}

Mat ascend_fixed(PromptContext& ctx, const PromptState& ps, const Trigger& fixed,
                 const TaskHeader& hdr, const std::vector<const EgoEntry*>& poison_batch,
                 const AttackConfig& cfg) {
  auto objective = [&](Tape& t, Var pshift) -> Var {
    enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
    HeaderVars hv = prompt::register_header(t, hdr, false);
    return loss_fixed_trigger_t(t, ctx, ev, fixed, hdr, hv, ps, pshift, poison_batch,
                                cfg.target_class, cfg.anchor);
  };
  return ascend_core(ps.p, cfg.epsilon, cfg.ascent_steps, cfg.per_step_norm, objective);
}

double fixed_trigger_loss_value(PromptContext& ctx, const PromptState& ps,
                                const Trigger& fixed, const TaskHeader& hdr,
                                const std::vector<const EgoEntry*>& batch,
                                const AttackConfig& cfg) {
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  Var p = t.constant(ps.p);
  HeaderVars hv = prompt::register_header(t, hdr, false);
  Var l = loss_fixed_trigger_t(t, ctx, ev, fixed, hdr, hv, ps, p, batch,
                               cfg.target_class, cfg.anchor);
  return t.val(l)(0, 0);
}

}  // namespace

void inner_update(PromptContext& ctx, PromptState& ps, TaskHeader& hdr,
                  const TriggerGeneratorParams& g, const Mat& delta,
                  const std::vector<const EgoEntry*>& labeled_batch,
                  const std::vector<const EgoEntry*>& poison_batch,
                  const AttackConfig& cfg, Adam& opt_prompt, Adam& opt_header,
                  bool update_prompt, double* lc_out, double* lb_out) {
  cov::touch("inner_update");
  cov::touch("loss_resistant");
  inner_step(ctx, ps, hdr, g, std::nullopt, delta, labeled_batch, poison_batch, cfg,
             opt_prompt, opt_header, update_prompt, lc_out, lb_out);
}

void outer_update(PromptContext& ctx, const PromptState& ps, const TaskHeader& hdr,
                  TriggerGeneratorParams& g, const std::vector<const EgoEntry*>& trigger_batch,
                  const AttackConfig& cfg, Adam& opt_gen, double* lg_out) {
  cov::touch("outer_update");
  cov::touch("loss_trigger");
  if (trigger_batch.empty()) throw TrainError("outer update: empty trigger-training batch");
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  GenVars gv = register_generator(t, g, true);
  HeaderVars hv = prompt::register_header(t, hdr, false);  // header enters as constants
  Var p = t.constant(ps.p);                                // prompt enters as a constant
  Var lg;
  Var total;
  if (cfg.unnotice_weight > 0.0) {
    auto links = anchor_links(cfg.anchor, g.trigger_size);
    std::vector<Var> rows;
    rows.reserve(trigger_batch.size());
    Var unnot;
    bool have_unnot = false;
    for (const EgoEntry* e : trigger_batch) {
      Var pooled_gen = prompt::pooled_prompted(t, ctx, ev, *e, ps.scheme,
                                               ps.link_threshold, p, nullptr);
      TriggerVars tv = generate_trigger_t(t, g, gv, pooled_gen);
      prompt::GraftBlock blk{tv.x, tv.adj_bin, links};
      rows.push_back(prompt::pooled_prompted(t, ctx, ev, *e, ps.scheme, ps.link_threshold,
                                             p, &blk));
      // Feature-similarity penalty: trigger rows should resemble the node they
      // attach to (mean 1 - cosine against the center's features).
      Mat center = ctx.source().x.row(e->center);
      Var num = t.row_sums(t.mul(tv.x, t.constant(center)));
      Var sq = t.row_sums(t.mul(tv.x, tv.x));
      Var den = t.scale(t.pow(t.add_scalar(sq, 1e-12), 0.5), center.norm() + 1e-12);
      Var cosv = t.div(num, den);
      Var term = t.sub(t.constant(Mat::Ones(g.trigger_size, 1)), cosv);
      Var mean_term = t.scale(t.sum_all(term), 1.0 / g.trigger_size);
      unnot = have_unnot ? t.add(unnot, mean_term) : mean_term;
      have_unnot = true;
    }
    Var pooled = t.concat_rows(rows);
    std::vector<int> labels(trigger_batch.size(), cfg.target_class);
    lg = prompt::head_loss_t(t, hdr, hv, pooled, labels);
    total = t.add(lg, t.scale(unnot, cfg.unnotice_weight / trigger_batch.size()));
  } else {
    lg = loss_backdoor_t(t, ctx, ev, g, gv, hdr, hv, ps, p, p, trigger_batch,
                         cfg.target_class, cfg.anchor);
    total = lg;
  }
  t.backward(total);
  if (lg_out) *lg_out = t.val(lg)(0, 0);
  std::vector<Mat> grads = {t.grad(gv.m1), t.grad(gv.c1), t.grad(gv.m2), t.grad(gv.c2),
                            t.grad(gv.wf), t.grad(gv.cf), t.grad(gv.wa), t.grad(gv.ca)};
  opt_gen.step(g.weights(), grads);
}

// ---- top-level drivers ----

namespace {

class BatchSampler {
 public:
  BatchSampler(const std::vector<EgoEntry>& items, int batch, std::uint64_t seed)
      : items_(&items), batch_(std::max(1, batch)), rng_(seed), order_(items.size()) {
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = order_.size();  // shuffle on first use
  }

  std::vector<const EgoEntry*> next() {
    std::vector<const EgoEntry*> out;
    int take = std::min<int>(batch_, static_cast<int>(items_->size()));
    out.reserve(static_cast<std::size_t>(take));
    for (int i = 0; i < take; ++i) {
      if (pos_ >= order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(&(*items_)[order_[pos_++]]);
    }
    return out;
  }

 private:
  const std::vector<EgoEntry>* items_;
  int batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

Trigger er_trigger(const Graph& g, const std::vector<int>& feature_pool, int s,
                   double prob, Rng& rng) {
  if (prob < 0.0 || prob > 1.0) throw ConfigError("er_edge_prob must lie in [0, 1]");
  if (s < 1) throw ConfigError("trigger size must be >= 1");
  Trigger tr;
  tr.x.resize(s, g.feat_dim());
  if (feature_pool.empty()) throw DataError("er trigger: empty feature pool");
  std::uniform_int_distribution<int> pick(0, static_cast<int>(feature_pool.size()) - 1);
  for (int i = 0; i < s; ++i) tr.x.row(i) = g.x.row(feature_pool[pick(rng)]);
  tr.adj = Mat::Zero(s, s);
  std::bernoulli_distribution coin(prob);
  for (int i = 0; i < s; ++i)
    for (int j = i + 1; j < s; ++j)
      if (coin(rng)) {
        tr.adj(i, j) = 1.0;
        tr.adj(j, i) = 1.0;
      }
  tr.adj_logits = tr.adj;
  return tr;
}

// Representative poison set: farthest-point traversal over clean pooled
// embeddings (cosine distance), seeded at the largest-norm embedding.
std::vector<int> diverse_nodes(PromptContext& ctx, const EgoDataset& pool,
                               std::size_t want) {
  std::size_t n = pool.entries.size();
  want = std::min(want, n);
  int h = ctx.encoder().hidden;
  Mat emb(static_cast<Eigen::Index>(n), h);
  for (std::size_t i = 0; i < n; ++i) {
    Mat row = ctx.clean_pooled(pool.entries[i]);
    double nn = row.norm();
    emb.row(static_cast<Eigen::Index>(i)) = nn > 0 ? Mat(row / nn) : row;
  }
  std::vector<char> used(n, 0);
  std::vector<int> chosen;
  std::size_t first = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double nn = ctx.clean_pooled(pool.entries[i]).norm();
    if (nn > best) {
      best = nn;
      first = i;
    }
  }
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t cur = first;
  for (std::size_t round = 0; round < want; ++round) {
    used[cur] = 1;
    chosen.push_back(pool.entries[cur].center);
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double d = 1.0 - emb.row(static_cast<Eigen::Index>(i))
                           .dot(emb.row(static_cast<Eigen::Index>(cur)));
      min_dist[i] = std::min(min_dist[i], d);
    }
    if (round + 1 == want) break;
    double far = -1.0;
    std::size_t nxt = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      if (min_dist[i] > far) {
        far = min_dist[i];
        nxt = i;
      }
    }
    cur = nxt;
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

struct CoreOpts {
  bool update_prompt = true;
  bool train_generator = true;
  bool prompt_noise = false;
  bool diverse_poison = false;
  bool fixed_er_trigger = false;
};

AttackRun run_core(Variant v, const enc::EncoderParams& encoder,
                   std::shared_ptr<const Graph> graph, const NodeSplit& split_in,
                   const AttackConfig& cfg, const CoreOpts& opts) {
  if (!encoder.frozen)
    throw TrainError("attack refused: encoder is not frozen (frozen-weight contract)");
  cfg.validate();
  if (!graph || graph->num_nodes() == 0) throw DataError("attack: empty graph");
  int num_classes = graph->num_classes();
  if (num_classes < 2) throw DataError("attack: need at least two classes");
  if (cfg.target_class < 0 || cfg.target_class >= num_classes)
    throw ConfigError("attack: target class " + std::to_string(cfg.target_class) +
                      " outside [0, " + std::to_string(num_classes) + ")");

  AttackRun run;
  run.variant = to_string(v);
  run.encoder = encoder;
  run.cfg = cfg;
  run.encoder_checksum_before = encoder.weights_checksum();

  PromptContext ctx(graph, &run.encoder);
  Rng rng(cfg.seed);

  EgoDataset labeled = with_stage("labeled ego extraction", [&] {
    return build_ego_dataset(graph, split_in.labeled, cfg.hops);
  });

  PromptState ps = PromptState::init(cfg.scheme, encoder.hidden, graph->feat_dim(),
                                     cfg.num_tokens, rng);
  TaskHeader hdr = TaskHeader::init(cfg.header_kind, num_classes, encoder.hidden, rng);
  with_stage("clean stage", [&] {
    std::tie(ps, hdr) = prompt::train_clean(std::move(ps), std::move(hdr), ctx, labeled,
                                            cfg.clean);
    return 0;
  });

  NodeSplit split = split_in;
  if (opts.diverse_poison) {
    EgoDataset pool = build_ego_dataset(graph, split.unlabeled, cfg.hops);
    if (pool.entries.empty()) throw DataError("attack: no unlabeled nodes to poison");
    std::size_t want = static_cast<std::size_t>(
        std::ceil(cfg.poison_ratio * static_cast<double>(split.unlabeled.size())));
    split.poison = diverse_nodes(ctx, pool, std::max<std::size_t>(1, want));
  } else if (split.poison.empty()) {
    split = select_poison_nodes(split, cfg.poison_ratio, cfg.seed);
  }
  if (split.poison.empty()) throw DataError("attack: empty poison set");

  EgoDataset poison = with_stage("poison ego extraction", [&] {
    return build_ego_dataset(graph, split.poison, cfg.hops);
  });
  EgoDataset trig_pool = with_stage("trigger-pool ego extraction", [&] {
    return build_ego_dataset(graph, split.unlabeled, cfg.hops);
  });
  if (trig_pool.entries.empty()) throw DataError("attack: empty unlabeled pool");

  if (opts.prompt_noise) {
    double dim = static_cast<double>(ps.p.size());
    double sigma = cfg.prompt_noise_rel * prompt::prompt_norm(ps.p) / std::sqrt(dim);
    ps.p += gaussian(ps.p.rows(), ps.p.cols(), rng, sigma);
  }

  TriggerGeneratorParams gen = TriggerGeneratorParams::init(
      encoder.hidden, graph->feat_dim(), cfg.trigger_size, rng);
  if (opts.fixed_er_trigger) {
    const std::vector<int>& pool =
        split.labeled.empty() ? split.unlabeled : split.labeled;
    run.fixed_trigger = er_trigger(*graph, pool, cfg.trigger_size, cfg.er_edge_prob, rng);
  }

  Adam opt_prompt(cfg.lr_prompt), opt_header(cfg.lr_header), opt_gen(cfg.lr_gen);
  BatchSampler sam_lab(labeled.entries, cfg.batch_labeled, rng());
  BatchSampler sam_poi(poison.entries, cfg.batch_poison, rng());
  BatchSampler sam_unl(trig_pool.entries, cfg.batch_unlabeled, rng());

  std::ofstream logf;
  if (!cfg.log_csv.empty()) {
    logf.open(cfg.log_csv, std::ios::trunc);
    if (!logf) throw DataError("attack: cannot write log file '" + cfg.log_csv + "'");
    logf << "iter,loss_clean,loss_backdoor,loss_trigger,delta_norm\n" << std::flush;
  }

  for (int k = 0; k < cfg.outer_iters; ++k) {
    with_stage("outer iteration " + std::to_string(k), [&] {
      Mat delta = Mat::Zero(ps.p.rows(), ps.p.cols());
      if (cfg.epsilon > 0.0) {
        auto batch = sam_poi.next();
        delta = run.fixed_trigger ? ascend_fixed(ctx, ps, *run.fixed_trigger, hdr, batch, cfg)
                                  : ascend_delta(ctx, ps, gen, hdr, batch, cfg);
      }
      double lc = 0.0, lb = 0.0, lg = 0.0;
      for (int n = 0; n < cfg.inner_steps; ++n) {
        cov::touch("inner_update");
        cov::touch("loss_resistant");
        inner_step(ctx, ps, hdr, gen, run.fixed_trigger, delta, sam_lab.next(),
                   sam_poi.next(), cfg, opt_prompt, opt_header, opts.update_prompt, &lc,
                   &lb);
      }
      if (opts.train_generator) {
        outer_update(ctx, ps, hdr, gen, sam_unl.next(), cfg, opt_gen, &lg);
      } else {
        cov::touch("loss_trigger");
        lg = fixed_trigger_loss_value(ctx, ps, *run.fixed_trigger, hdr, sam_unl.next(),
                                      cfg);
      }
      run.log.push_back(LogRow{k, lc, lb, lg, delta.norm()});
      if (logf) {
        logf << k << "," << lc << "," << lb << "," << lg << "," << delta.norm() << "\n"
             << std::flush;
      }
      return 0;
    });
  }

  run.prompt = std::move(ps);
  run.header = std::move(hdr);
  run.gen = std::move(gen);
  run.encoder_checksum_after = run.encoder.weights_checksum();
  if (run.encoder_checksum_after != run.encoder_checksum_before)
    throw TrainError("attack: frozen encoder weights drifted during the run");
  return run;
}

}  // namespace

AttackRun run_tgpa(const enc::EncoderParams& encoder, std::shared_ptr<const Graph> graph,
                   const NodeSplit& split, const AttackConfig& cfg) {
  cov::touch("run_tgpa");
  return run_core(Variant::tgpa, encoder, std::move(graph), split, cfg, CoreOpts{});
}

AttackRun run_variant(Variant v, const enc::EncoderParams& encoder,
                      std::shared_ptr<const Graph> graph, const NodeSplit& split,
                      const AttackConfig& cfg) {
  cov::touch("run_variant");
  AttackConfig c = cfg;
  CoreOpts o;
  switch (v) {
    case Variant::tgpa:
      return run_tgpa(encoder, std::move(graph), split, cfg);
    case Variant::tgpa_r:
      // Resistance removed: unit backdoor weight, no perturbation budget.
      c.lambda = 1.0;
      c.epsilon = 0.0;
      break;
    case Variant::tgpa_p:
      o.update_prompt = false;
      o.prompt_noise = true;
      break;
    case Variant::bl_rand:
      o.train_generator = false;
      o.fixed_er_trigger = true;
      break;
    case Variant::sba_p:
      o.train_generator = false;
      o.fixed_er_trigger = true;
      o.update_prompt = false;
      c.lambda = 1.0;
      c.epsilon = 0.0;
      break;
    case Variant::gta_p:
      o.update_prompt = false;
      c.lambda = 1.0;
      c.epsilon = 0.0;
      break;
    case Variant::ugba_p:
      o.update_prompt = false;
      o.diverse_poison = true;
      c.lambda = 1.0;
      c.epsilon = 0.0;
      if (c.unnotice_weight <= 0.0) c.unnotice_weight = 1.0;
      break;
  }
  return run_core(v, encoder, std::move(graph), split, c, o);
}

// ---- persistence ----

void AttackRun::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
  encoder.save(dir + "/encoder.json");
  prompt.save(dir + "/prompt.json");
  header.save(dir + "/header.json");
  {
    std::ofstream f(dir + "/generator.json");
    if (!f) throw DataError("cannot write '" + dir + "/generator.json'");
    f << gen.to_json().dump(2) << "\n";
  }
  json meta{{"variant", variant},
            {"encoder_checksum_before", encoder_checksum_before},
            {"encoder_checksum_after", encoder_checksum_after},
            {"config", cfg.to_json()}};
  if (fixed_trigger) meta["fixed_trigger"] = fixed_trigger->to_json();
  {
    std::ofstream f(dir + "/meta.json");
    if (!f) throw DataError("cannot write '" + dir + "/meta.json'");
    f << meta.dump(2) << "\n";
  }
  {
    std::ofstream f(dir + "/log.csv");
    if (!f) throw DataError("cannot write '" + dir + "/log.csv'");
    f << "iter,loss_clean,loss_backdoor,loss_trigger,delta_norm\n";
    for (const LogRow& r : log)
      f << r.iter << "," << r.loss_clean << "," << r.loss_backdoor << ","
        << r.loss_trigger << "," << r.delta_norm << "\n";
  }
}

AttackRun AttackRun::load(const std::string& dir) {
  AttackRun run;
  run.encoder = enc::EncoderParams::load(dir + "/encoder.json");
  run.prompt = PromptState::load(dir + "/prompt.json");
  run.header = TaskHeader::load(dir + "/header.json");
  {
    std::ifstream f(dir + "/generator.json");
    if (!f) throw DataError("cannot read '" + dir + "/generator.json'");
    json j;
    f >> j;
    run.gen = TriggerGeneratorParams::from_json(j);
  }
  {
    std::ifstream f(dir + "/meta.json");
    if (!f) throw DataError("cannot read '" + dir + "/meta.json'");
    json j;
    f >> j;
    run.variant = j.at("variant").get<std::string>();
    run.encoder_checksum_before = j.at("encoder_checksum_before").get<std::uint64_t>();
    run.encoder_checksum_after = j.at("encoder_checksum_after").get<std::uint64_t>();
    run.cfg = AttackConfig::from_json(j.at("config"));
    if (j.contains("fixed_trigger"))
      run.fixed_trigger = Trigger::from_json(j.at("fixed_trigger"));
  }
  {
    std::ifstream f(dir + "/log.csv");
    if (f) {
      std::string line;
      std::getline(f, line);  // header
      while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        LogRow r;
        char comma;
        ss >> r.iter >> comma >> r.loss_clean >> comma >> r.loss_backdoor >> comma >>
            r.loss_trigger >> comma >> r.delta_norm;
        run.log.push_back(r);
      }
    }
  }
  return run;
}

}  // namespace gplab::atk
