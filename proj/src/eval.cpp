#include "gplab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "gplab/coverage.hpp"

namespace gplab::ev {

using atk::AttackRun;
using prompt::PromptContext;

json Metrics::to_json() const {
  return json{{"scenario", scenario}, {"asr", asr},     {"ca", ca},
              {"targets", targets},   {"hits", hits},   {"clean", clean},
              {"correct", correct}};
}

void audit_no_leakage(const NodeSplit& split) {
  cov::touch("audit_no_leakage");
  std::set<int> test(split.test_targets.begin(), split.test_targets.end());
  test.insert(split.test_clean.begin(), split.test_clean.end());
  for (int v : split.labeled)
    if (test.count(v))
      throw EvalError("leakage: labeled node " + std::to_string(v) + " is a test node");
  for (int v : split.unlabeled)
    if (test.count(v))
      throw EvalError("leakage: unlabeled node " + std::to_string(v) + " is a test node");
  std::set<int> unl(split.unlabeled.begin(), split.unlabeled.end());
  for (int v : split.poison)
    if (!unl.count(v))
      throw EvalError("leakage: poison node " + std::to_string(v) +
                      " is outside the unlabeled pool");
}

namespace {

int predict_with_trigger(PromptContext& ctx, const AttackRun& run, const EgoEntry& e,
                         const atk::Trigger& trig) {
  ad::Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  ad::Var p = t.constant(run.prompt.p);
  prompt::GraftBlock blk{t.constant(trig.x), t.constant(trig.adj),
                         atk::anchor_links(run.cfg.anchor, static_cast<int>(trig.x.rows()))};
  ad::Var pooled = prompt::pooled_prompted(t, ctx, ev, e, run.prompt.scheme,
                                           run.prompt.link_threshold, p, &blk);
  return prompt::head_predict(run.header, t.val(pooled));
}

Metrics eval_with(const AttackRun& run, std::shared_ptr<const Graph> graph,
                  const NodeSplit& split, const prompt::PromptState& ps,
                  const prompt::TaskHeader& hdr, const std::string& tag) {
  AttackRun swapped = run;
  swapped.prompt = ps;
  swapped.header = hdr;
  Metrics m = evaluate(swapped, std::move(graph), split);
  m.scenario = tag;
  return m;
}

}  // namespace

Metrics evaluate(const AttackRun& run, std::shared_ptr<const Graph> graph,
                 const NodeSplit& split, std::optional<double> prune_threshold) {
  cov::touch("evaluate");
  if (!graph || graph->num_nodes() == 0) throw EvalError("evaluate: empty graph");
  if (split.test_targets.empty()) throw EvalError("evaluate: empty target set");
  if (split.test_clean.empty()) throw EvalError("evaluate: empty clean test set");
  audit_no_leakage(split);

  PromptContext ctx(graph, &run.encoder);
  EgoDataset targets = build_ego_dataset(graph, split.test_targets, run.cfg.hops);
  EgoDataset clean = build_ego_dataset(graph, split.test_clean, run.cfg.hops);

  Metrics m;
  m.scenario = prune_threshold ? "defense_prune" : "direct";
  m.targets = static_cast<int>(targets.entries.size());
  m.clean = static_cast<int>(clean.entries.size());

  for (const EgoEntry& e : targets.entries) {
    atk::Trigger trig = run.trigger_for(ctx, e);
    int pred;
    if (prune_threshold) {
      Graph assembled = atk::attach_trigger(e, *graph, trig, run.cfg.anchor);
      Graph defended = defense_prune(assembled, *prune_threshold);
      Mat pooled = prompt::apply_prompt(run.prompt, defended, run.encoder);
      pred = prompt::head_predict(run.header, pooled);
    } else {
      pred = predict_with_trigger(ctx, run, e, trig);
    }
    if (pred == run.cfg.target_class) ++m.hits;
  }

  if (prune_threshold) {
    for (const EgoEntry& e : clean.entries) {
      Graph defended = defense_prune(materialize_ego(*graph, e), *prune_threshold);
      Mat pooled = prompt::apply_prompt(run.prompt, defended, run.encoder);
      if (prompt::head_predict(run.header, pooled) == e.label) ++m.correct;
    }
  } else {
    std::vector<const EgoEntry*> ptrs;
    ptrs.reserve(clean.entries.size());
    for (const EgoEntry& e : clean.entries) ptrs.push_back(&e);
    Mat pooled = prompt::pooled_rows(ctx, run.prompt, ptrs);
    for (std::size_t i = 0; i < clean.entries.size(); ++i) {
      Mat row = pooled.row(static_cast<Eigen::Index>(i));
      if (prompt::head_predict(run.header, row) == clean.entries[i].label) ++m.correct;
    }
  }

  m.asr = static_cast<double>(m.hits) / m.targets;
  m.ca = static_cast<double>(m.correct) / m.clean;
  return m;
}

Metrics scenario_finetune_header(const AttackRun& run, std::shared_ptr<const Graph> graph,
                                 const NodeSplit& split, const prompt::TrainCfg& cfg) {
  cov::touch("scenario_finetune_header");
  PromptContext ctx(graph, &run.encoder);
  EgoDataset lab = build_ego_dataset(graph, split.labeled, run.cfg.hops);
  prompt::TaskHeader tuned = prompt::finetune_header(run.header, run.prompt, ctx, lab, cfg);
  return eval_with(run, std::move(graph), split, run.prompt, tuned, "finetune_header");
}

Metrics scenario_finetune_prompt(const AttackRun& run, std::shared_ptr<const Graph> graph,
                                 const NodeSplit& split, const prompt::TrainCfg& cfg,
                                 bool also_header) {
  cov::touch("scenario_finetune_prompt");
  PromptContext ctx(graph, &run.encoder);
  EgoDataset lab = build_ego_dataset(graph, split.labeled, run.cfg.hops);
  prompt::PromptState tuned_p = prompt::finetune_prompt(run.prompt, run.header, ctx, lab, cfg);
  prompt::TaskHeader hdr = run.header;
  if (also_header) hdr = prompt::finetune_header(hdr, tuned_p, ctx, lab, cfg);
  return eval_with(run, std::move(graph), split, tuned_p, hdr,
                   also_header ? "finetune_both" : "finetune_prompt");
}

Metrics scenario_user_header(const AttackRun& run, std::shared_ptr<const Graph> graph,
                             const NodeSplit& split, const prompt::TrainCfg& cfg) {
  cov::touch("scenario_user_header");
  PromptContext ctx(graph, &run.encoder);
  EgoDataset lab = build_ego_dataset(graph, split.labeled, run.cfg.hops);
  Rng rng(cfg.seed);
  prompt::TaskHeader fresh = prompt::TaskHeader::init(
      run.header.kind, run.header.num_classes(), run.encoder.hidden, rng);
  if (fresh.kind == prompt::HeaderKind::prototype) {
    // from scratch for prototypes = one accumulation of the user's clean data
    std::vector<const EgoEntry*> es;
    std::vector<int> labels;
    es.reserve(lab.entries.size());
    for (const auto& e : lab.entries) {
      es.push_back(&e);
      labels.push_back(e.label);
    }
    prompt::fit_prototype(fresh, prompt::pooled_rows(ctx, run.prompt, es), labels);
  } else {
    fresh = prompt::finetune_header(fresh, run.prompt, ctx, lab, cfg);
  }
  return eval_with(run, std::move(graph), split, run.prompt, fresh, "user_header");
}

Metrics scenario_cross_dataset(const Graph& pretrain_graph, const Graph& downstream_graph,
                               const CrossDatasetCfg& cfg) {
  cov::touch("scenario_cross_dataset");
  Graph a = pretrain_graph;
  a.x = svd_reduce(pretrain_graph.x, cfg.svd_dim);
  Graph b = downstream_graph;
  b.x = svd_reduce(downstream_graph.x, cfg.svd_dim);
  auto a_sh = std::make_shared<const Graph>(std::move(a));
  auto b_sh = std::make_shared<const Graph>(std::move(b));

  Rng rng(cfg.pretrain.seed);
  enc::EncoderParams init =
      enc::EncoderParams::init(cfg.backbone, cfg.svd_dim, cfg.hidden, rng);
  enc::EncoderParams trained;
  if (cfg.pretrainer == "edgepred") {
    trained = pre::pretrain_edgepred(std::move(init), *a_sh, cfg.pretrain);
  } else {
    int k = std::max(1, std::min(cfg.partition_k, a_sh->num_nodes()));
    pre::PretrainCorpus corpus = pre::partition_corpus(a_sh, k, cfg.pretrain.seed);
    if (cfg.pretrainer == "simgrace")
      trained = pre::pretrain_simgrace(std::move(init), corpus, cfg.pretrain);
    else if (cfg.pretrainer == "graphcl")
      trained = pre::pretrain_graphcl(std::move(init), corpus, cfg.pretrain);
    else
      throw ConfigError("unknown pretrainer '" + cfg.pretrainer +
                        "' (expected one of {simgrace, graphcl, edgepred})");
  }
  enc::EncoderParams frozen = enc::freeze(std::move(trained));

  NodeSplit split = make_split(*b_sh, cfg.shots, cfg.attack.seed);
  split = select_poison_nodes(split, cfg.attack.poison_ratio, cfg.attack.seed);
  AttackRun run = atk::run_tgpa(frozen, b_sh, split, cfg.attack);
  Metrics m = evaluate(run, b_sh, split);
  m.scenario = "cross_dataset";
  return m;
}

Graph defense_prune(const Graph& g, double threshold) {
  cov::touch("defense_prune");
  if (threshold < -1.0 || threshold > 1.0)
    throw ConfigError("prune threshold must lie in [-1, 1]");
  Graph out = g;
  out.edges.clear();
  for (auto [u, v] : g.edges) {
    double nu = g.x.row(u).norm();
    double nv = g.x.row(v).norm();
    double cs = (nu == 0.0 || nv == 0.0) ? 0.0 : g.x.row(u).dot(g.x.row(v)) / (nu * nv);
    if (!(cs < threshold)) out.edges.emplace_back(u, v);
  }
  return out;
}

SweepKind sweep_kind_from_string(const std::string& s) {
  if (s == "trigger_size") return SweepKind::trigger_size;
  if (s == "poison_ratio") return SweepKind::poison_ratio;
  if (s == "lambda") return SweepKind::lambda;
  if (s == "epsilon") return SweepKind::epsilon;
  throw ConfigError("unknown sweep kind '" + s +
                    "' (expected one of {trigger_size, poison_ratio, lambda, epsilon})");
}

std::string to_string(SweepKind k) {
  switch (k) {
    case SweepKind::trigger_size: return "trigger_size";
    case SweepKind::poison_ratio: return "poison_ratio";
    case SweepKind::lambda: return "lambda";
    case SweepKind::epsilon: return "epsilon";
  }
  throw ConfigError("unknown sweep kind");
}

std::vector<SweepPoint> sweep(SweepKind kind, const std::vector<double>& values,
                              atk::Variant variant, const enc::EncoderParams& encoder,
                              std::shared_ptr<const Graph> graph, const NodeSplit& split,
                              const atk::AttackConfig& base) {
  cov::touch("sweep");
  if (values.empty()) throw ConfigError("sweep: empty value list");
  std::vector<SweepPoint> out;
  out.reserve(values.size());
  for (double v : values) {
    atk::AttackConfig c = base;
    switch (kind) {
      case SweepKind::trigger_size:
        c.trigger_size = static_cast<int>(std::lround(v));
        if (c.trigger_size < 1) throw ConfigError("sweep: trigger size must be >= 1");
        break;
      case SweepKind::poison_ratio:
        c.poison_ratio = v;
        break;
      case SweepKind::lambda:
        c.lambda = v;
        break;
      case SweepKind::epsilon:
        c.epsilon = v;
        break;
    }
    NodeSplit s = split;
    s.poison.clear();  // re-selected inside the run from the configured ratio
    AttackRun run = atk::run_variant(variant, encoder, graph, s, c);
    Metrics m = evaluate(run, graph, s);
    out.push_back(SweepPoint{v, m});
  }
  return out;
}

json ResultRow::to_json() const {
  return json{{"scenario", scenario}, {"dataset", dataset},   {"gpl", gpl},
              {"backbone", backbone}, {"method", method},     {"asr", asr},
              {"ca", ca},             {"seed", seed},         {"config_hash", config_hash},
              {"aggregate", aggregate}};
}

void append_result(const std::string& path, const ResultRow& row) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw DataError("cannot append to results file '" + path + "'");
  f << row.to_json().dump() << "\n";
}

}  // namespace gplab::ev
