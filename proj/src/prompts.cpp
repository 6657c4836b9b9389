#include "gplab/prompts.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "gplab/coverage.hpp"
#include "gplab/optim.hpp"
#include "gplab/serialize.hpp"

namespace gplab::prompt {

using ad::Tape;
using ad::Var;

Scheme scheme_from_string(const std::string& s) {
  if (s == "graphprompt") return Scheme::graphprompt;
  if (s == "gppt") return Scheme::gppt;
  if (s == "allinone" || s == "all-in-one") return Scheme::allinone;
  throw ConfigError("unknown gpl scheme '" + s +
                    "' (expected one of {graphprompt, gppt, allinone})");
}

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::graphprompt:
      return "graphprompt";
    case Scheme::gppt:
      return "gppt";
    case Scheme::allinone:
      return "allinone";
  }
  return "?";
}

HeaderKind header_from_string(const std::string& s) {
  if (s == "prototype") return HeaderKind::prototype;
  if (s == "token_link") return HeaderKind::token_link;
  if (s == "linear") return HeaderKind::linear;
  throw ConfigError("unknown header kind '" + s +
                    "' (expected one of {prototype, token_link, linear})");
}

std::string to_string(HeaderKind k) {
  switch (k) {
    case HeaderKind::prototype:
      return "prototype";
    case HeaderKind::token_link:
      return "token_link";
    case HeaderKind::linear:
      return "linear";
  }
  return "?";
}

PromptState PromptState::init(Scheme scheme, int hidden, int in_dim, int num_tokens,
                              Rng& rng) {
  PromptState ps;
  ps.scheme = scheme;
  switch (scheme) {
    case Scheme::graphprompt:
      ps.p = Mat::Ones(1, hidden);  // multiplicative identity
      break;
    case Scheme::gppt:
      ps.p = Mat::Zero(1, hidden);  // additive identity
      break;
    case Scheme::allinone:
      if (num_tokens < 1) throw ConfigError("allinone prompt needs >= 1 token");
      ps.p = gaussian(num_tokens, in_dim, rng, 0.1);
      break;
  }
  return ps;
}

json PromptState::to_json() const {
  return json{{"scheme", to_string(scheme)},
              {"p", mat_to_json(p)},
              {"link_threshold", link_threshold}};
}

PromptState PromptState::from_json(const json& j) {
  PromptState ps;
  ps.scheme = scheme_from_string(j.at("scheme").get<std::string>());
  ps.p = mat_from_json(j.at("p"));
  ps.link_threshold = j.value("link_threshold", 0.0);
  return ps;
}

void PromptState::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << to_json().dump(1) << "\n";
}

PromptState PromptState::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  json j;
  in >> j;
  return from_json(j);
}

TaskHeader TaskHeader::init(HeaderKind kind, int num_classes, int hidden, Rng& rng) {
  if (num_classes < 1 || hidden < 1) throw ConfigError("header dims must be positive");
  TaskHeader h;
  h.kind = kind;
  switch (kind) {
    case HeaderKind::prototype:
      h.w = Mat::Zero(num_classes, hidden);
      h.counts.assign(static_cast<std::size_t>(num_classes), 0.0);
      break;
    case HeaderKind::token_link:
      h.w = gaussian(num_classes, hidden, rng, 0.1);
      break;
    case HeaderKind::linear:
      h.w = gaussian(hidden, num_classes, rng, std::sqrt(1.0 / hidden));
      h.b = Mat::Zero(1, num_classes);
      break;
  }
  return h;
}

int TaskHeader::num_classes() const {
  return static_cast<int>(kind == HeaderKind::linear ? w.cols() : w.rows());
}

bool TaskHeader::fitted() const {
  if (kind != HeaderKind::prototype) return w.size() > 0;
  for (double c : counts)
    if (c <= 0.0) return false;
  return !counts.empty();
}

json TaskHeader::to_json() const {
  json j{{"kind", to_string(kind)}, {"w", mat_to_json(w)}, {"temperature", temperature}};
  if (kind == HeaderKind::linear) j["b"] = mat_to_json(b);
  if (kind == HeaderKind::prototype) j["counts"] = counts;
  return j;
}

TaskHeader TaskHeader::from_json(const json& j) {
  TaskHeader h;
  h.kind = header_from_string(j.at("kind").get<std::string>());
  h.w = mat_from_json(j.at("w"));
  h.temperature = j.value("temperature", 0.1);
  if (h.kind == HeaderKind::linear) h.b = mat_from_json(j.at("b"));
  if (h.kind == HeaderKind::prototype) h.counts = j.at("counts").get<std::vector<double>>();
  return h;
}

void TaskHeader::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << to_json().dump(1) << "\n";
}

TaskHeader TaskHeader::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  json j;
  in >> j;
  return from_json(j);
}

namespace {

Mat dense_adj_from_entry(const EgoEntry& e) {
  auto n = static_cast<Eigen::Index>(e.nodes.size());
  Mat a = Mat::Zero(n, n);
  for (auto [u, v] : e.edges) {
    a(u, v) = 1.0;
    a(v, u) = 1.0;
  }
  return a;
}

}  // namespace

PromptContext::PromptContext(std::shared_ptr<const Graph> source,
                             const enc::EncoderParams* encoder)
    : source_(std::move(source)), encoder_(encoder) {
  cache_ = enc::build_projection_cache(*encoder_, source_->x);
}

Mat PromptContext::xw1_rows(const EgoEntry& e) const {
  Mat r(static_cast<Eigen::Index>(e.nodes.size()), cache_.xw1.cols());
  for (std::size_t i = 0; i < e.nodes.size(); ++i)
    r.row(static_cast<Eigen::Index>(i)) = cache_.xw1.row(e.nodes[i]);
  return r;
}

Mat PromptContext::xw1nb_rows(const EgoEntry& e) const {
  Mat r(static_cast<Eigen::Index>(e.nodes.size()), cache_.xw1_nb.cols());
  for (std::size_t i = 0; i < e.nodes.size(); ++i)
    r.row(static_cast<Eigen::Index>(i)) = cache_.xw1_nb.row(e.nodes[i]);
  return r;
}

Mat PromptContext::feature_rows(const EgoEntry& e) const {
  Mat r(static_cast<Eigen::Index>(e.nodes.size()), source_->x.cols());
  for (std::size_t i = 0; i < e.nodes.size(); ++i)
    r.row(static_cast<Eigen::Index>(i)) = source_->x.row(e.nodes[i]);
  return r;
}

const Mat& PromptContext::clean_pooled(const EgoEntry& e) {
  auto it = pooled_.find(e.center);
  if (it != pooled_.end()) return it->second;
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, *encoder_, false);
  enc::Layer1Pre pre;
  pre.xw1 = t.constant(xw1_rows(e));
  if (encoder_->arch == enc::Backbone::sage) pre.xw1_nb = t.constant(xw1nb_rows(e));
  Var adj = t.constant(dense_adj_from_entry(e));
  Var h2 = enc::encode_from_pre(t, *encoder_, ev, pre, adj);
  Mat pooled = t.val(enc::readout_t(t, h2));
  return pooled_.emplace(e.center, std::move(pooled)).first->second;
}

Mat PromptContext::clean_pooled_batch(const std::vector<const EgoEntry*>& es) {
  if (es.empty()) throw TrainError("clean_pooled_batch: empty batch");
  Mat s(static_cast<Eigen::Index>(es.size()), encoder_->hidden);
  for (std::size_t i = 0; i < es.size(); ++i)
    s.row(static_cast<Eigen::Index>(i)) = clean_pooled(*es[i]);
  return s;
}

Var pooled_prompted(Tape& t, PromptContext& ctx, const enc::EncoderVars& ev,
                    const EgoEntry& e, Scheme scheme, double link_threshold, Var prompt,
                    const GraftBlock* block) {
  const enc::EncoderParams& ep = ctx.encoder();
  if (scheme != Scheme::allinone && block == nullptr) {
    Var base = t.constant(ctx.clean_pooled(e));
    return scheme == Scheme::graphprompt ? t.mul(prompt, base) : t.add(base, prompt);
  }

  auto n0 = static_cast<int>(e.nodes.size());
  int m = scheme == Scheme::allinone ? static_cast<int>(t.val(prompt).rows()) : 0;
  int s = block ? static_cast<int>(t.val(block->x).rows()) : 0;
  int n = n0 + m + s;

  // layer-1 projections: cached rows for ego nodes, live products for
  // grafted token/block features
  std::vector<Var> self_parts{t.constant(ctx.xw1_rows(e))};
  std::vector<Var> nb_parts;
  bool sage = ep.arch == enc::Backbone::sage;
  if (sage) nb_parts.push_back(t.constant(ctx.xw1nb_rows(e)));
  auto project = [&](Var feats) {
    if (sage) {
      self_parts.push_back(t.matmul(feats, t.slice_rows(ev.w1, 0, ep.in_dim)));
      nb_parts.push_back(t.matmul(feats, t.slice_rows(ev.w1, ep.in_dim, ep.in_dim)));
    } else {
      self_parts.push_back(t.matmul(feats, ev.w1));
    }
  };
  if (m > 0) project(prompt);
  if (s > 0) project(block->x);

  enc::Layer1Pre pre;
  pre.xw1 = self_parts.size() == 1 ? self_parts[0] : t.concat_rows(self_parts);
  if (sage) pre.xw1_nb = nb_parts.size() == 1 ? nb_parts[0] : t.concat_rows(nb_parts);

  // adjacency: ego edges, token links (recomputed from current values),
  // anchor links — constants; the block's own adjacency keeps its gradient
  Mat base = Mat::Zero(n, n);
  for (auto [u, v] : e.edges) {
    base(u, v) = 1.0;
    base(v, u) = 1.0;
  }
  if (m > 0) {
    Mat tok = t.val(prompt);               // m x d
    Mat feats = ctx.feature_rows(e);       // n0 x d
    Mat dots = tok * feats.transpose();    // m x n0
    for (int k = 0; k < m; ++k)
      for (int i = 0; i < n0; ++i)
        if (dots(k, i) > link_threshold) {
          base(n0 + k, i) = 1.0;
          base(i, n0 + k) = 1.0;
        }
    for (int k = 0; k < m; ++k)
      for (int l = 0; l < m; ++l)
        if (k != l) base(n0 + k, n0 + l) = 1.0;
  }
  if (block) {
    for (int j : block->anchor_links) {
      if (j < 0 || j >= s) throw IndexError("graft block: anchor link out of range");
      base(0, n0 + m + j) = 1.0;
      base(n0 + m + j, 0) = 1.0;
    }
  }
  Var adj = t.constant(base);
  if (block) adj = t.add(adj, t.place_block(block->adj, n, n, n0 + m, n0 + m));

  Var h2 = enc::encode_from_pre(t, ep, ev, pre, adj);
  Var pooled = enc::readout_t(t, h2);
  switch (scheme) {
    case Scheme::graphprompt:
      return t.mul(prompt, pooled);
    case Scheme::gppt:
      return t.add(pooled, prompt);
    case Scheme::allinone:
      return pooled;
  }
  throw ConfigError("pooled_prompted: unknown scheme");
}

Var pooled_batch(Tape& t, PromptContext& ctx, const enc::EncoderVars& ev,
                 const std::vector<const EgoEntry*>& batch, Scheme scheme,
                 double link_threshold, Var prompt) {
  if (batch.empty()) throw TrainError("pooled_batch: empty batch");
  if (scheme != Scheme::allinone) {
    Var s = t.constant(ctx.clean_pooled_batch(batch));
    return scheme == Scheme::graphprompt ? t.mul(s, prompt) : t.add(s, prompt);
  }
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (const EgoEntry* e : batch)
    rows.push_back(pooled_prompted(t, ctx, ev, *e, scheme, link_threshold, prompt, nullptr));
  return rows.size() == 1 ? rows[0] : t.concat_rows(rows);
}

HeaderVars register_header(Tape& t, const TaskHeader& h, bool trainable) {
  HeaderVars hv;
  hv.w = t.input(h.w, trainable);
  if (h.kind == HeaderKind::linear) hv.b = t.input(h.b, trainable);
  return hv;
}

Var head_scores_t(Tape& t, const TaskHeader& h, const HeaderVars& hv, Var pooled) {
  if (h.kind == HeaderKind::linear) return t.add(t.matmul(pooled, hv.w), hv.b);
  Var dots = t.matmul(pooled, t.transpose(hv.w));
  // epsilon inside the sqrt: d/dx sqrt(x) blows up at x = 0 (all-zero row)
  Var pn = t.pow(t.add_scalar(t.row_sums(t.mul(pooled, pooled)), 1e-12), 0.5);
  Var cn = t.pow(t.add_scalar(t.row_sums(t.mul(hv.w, hv.w)), 1e-12), 0.5);
  return t.div(t.div(dots, pn), t.transpose(cn));
}

Var head_loss_t(Tape& t, const TaskHeader& h, const HeaderVars& hv, Var pooled,
                const std::vector<int>& labels) {
  Var scores = head_scores_t(t, h, hv, pooled);
  if (h.kind != HeaderKind::linear) scores = t.scale(scores, 1.0 / h.temperature);
  return t.cross_entropy(scores, labels);
}

Mat head_scores(const TaskHeader& h, const Mat& pooled) {
  if (!h.fitted()) throw EvalError("head_scores: header not fitted");
  if (h.kind == HeaderKind::linear) {
    Mat s = pooled * h.w;
    s.rowwise() += h.b.row(0);
    return s;
  }
  Mat dots = pooled * h.w.transpose();
  Vec pn = pooled.rowwise().norm().array() + 1e-12;
  Vec cn = h.w.rowwise().norm().array() + 1e-12;
  return ((dots.array().colwise() / pn.array()).rowwise() / cn.transpose().array()).matrix();
}

int head_predict(const TaskHeader& h, const Mat& pooled_row) {
  cov::touch("head_predict");
  Mat s = head_scores(h, pooled_row);
  int best = 0;
  for (int c = 1; c < s.cols(); ++c)
    if (s(0, c) > s(0, best)) best = c;  // strict: ties keep the lowest id
  return best;
}

void fit_prototype(TaskHeader& h, const Mat& pooled, const std::vector<int>& labels) {
  if (h.kind != HeaderKind::prototype) throw TrainError("fit_prototype: wrong header kind");
  int c = h.num_classes();
  h.w.setZero();
  h.counts.assign(static_cast<std::size_t>(c), 0.0);
  for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw TrainError("fit_prototype: label out of range");
    h.w.row(y) += pooled.row(i);
    h.counts[static_cast<std::size_t>(y)] += 1.0;
  }
  for (int k = 0; k < c; ++k)
    if (h.counts[static_cast<std::size_t>(k)] > 0.0)
      h.w.row(k) /= h.counts[static_cast<std::size_t>(k)];
}

namespace {

std::vector<const EgoEntry*> entry_ptrs(const EgoDataset& data) {
  std::vector<const EgoEntry*> out;
  out.reserve(data.entries.size());
  for (const auto& e : data.entries) out.push_back(&e);
  return out;
}

std::vector<int> entry_labels(const std::vector<const EgoEntry*>& es) {
  std::vector<int> y;
  y.reserve(es.size());
  for (const EgoEntry* e : es) y.push_back(e->label);
  return y;
}

// prompted pooled rows for a set of entries, no gradients
Mat pooled_values(PromptContext& ctx, const PromptState& prompt,
                  const std::vector<const EgoEntry*>& es) {
  Tape t;
  enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
  Var p = t.constant(prompt.p);
  return t.val(pooled_batch(t, ctx, ev, es, prompt.scheme, prompt.link_threshold, p));
}

void accumulate_prototype(TaskHeader& h, const Mat& pooled, const std::vector<int>& labels) {
  int c = h.num_classes();
  Mat sums = Mat::Zero(c, h.w.cols());
  std::vector<double> m(static_cast<std::size_t>(c), 0.0);
  for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw TrainError("prototype update: label out of range");
    sums.row(y) += pooled.row(i);
    m[static_cast<std::size_t>(y)] += 1.0;
  }
  for (int k = 0; k < c; ++k) {
    double n = h.counts[static_cast<std::size_t>(k)];
    double mk = m[static_cast<std::size_t>(k)];
    if (mk == 0.0) continue;
    h.w.row(k) = (n * h.w.row(k) + sums.row(k)) / (n + mk);
    h.counts[static_cast<std::size_t>(k)] = n + mk;
  }
}

}  // namespace

Mat pooled_rows(PromptContext& ctx, const PromptState& ps,
                const std::vector<const EgoEntry*>& batch) {
  return pooled_values(ctx, ps, batch);
}

std::pair<PromptState, TaskHeader> train_clean(PromptState prompt, TaskHeader header,
                                               PromptContext& ctx, const EgoDataset& data,
                                               const TrainCfg& cfg) {
  cov::touch("train_clean");
  if (data.entries.empty()) throw TrainError("train_clean: empty dataset");
  if (ctx.encoder().frozen == false)
    throw TrainError("train_clean: encoder must be frozen first");
  auto all = entry_ptrs(data);
  auto labels_all = entry_labels(all);
  int c = header.num_classes();
  std::vector<bool> present(static_cast<std::size_t>(c), false);
  for (int y : labels_all) {
    if (y < 0 || y >= c) throw TrainError("train_clean: label out of range");
    present[static_cast<std::size_t>(y)] = true;
  }
  for (int k = 0; k < c; ++k)
    if (!present[static_cast<std::size_t>(k)])
      throw TrainError("train_clean: class " + std::to_string(k) + " absent from data");

  bool grad_header = header.kind != HeaderKind::prototype;
  Rng rng(cfg.seed);
  Adam opt_p(cfg.lr_prompt);
  Adam opt_h(cfg.lr_header);

  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (header.kind == HeaderKind::prototype)
      fit_prototype(header, pooled_values(ctx, prompt, all), labels_all);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<const EgoEntry*> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(all[order[i]]);
        labels.push_back(labels_all[order[i]]);
      }
      Tape t;
      enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
      Var p = t.input(prompt.p, true);
      HeaderVars hv = register_header(t, header, grad_header);
      Var pooled = pooled_batch(t, ctx, ev, batch, prompt.scheme, prompt.link_threshold, p);
      Var loss = head_loss_t(t, header, hv, pooled, labels);
      t.backward(loss);
      opt_p.step({&prompt.p}, {t.grad(p)});
      if (grad_header) {
        if (header.kind == HeaderKind::linear)
          opt_h.step({&header.w, &header.b}, {t.grad(hv.w), t.grad(hv.b)});
        else
          opt_h.step({&header.w}, {t.grad(hv.w)});
      }
    }
  }
  if (header.kind == HeaderKind::prototype)
    fit_prototype(header, pooled_values(ctx, prompt, all), labels_all);
  return {std::move(prompt), std::move(header)};
}

TaskHeader finetune_header(TaskHeader header, const PromptState& prompt, PromptContext& ctx,
                           const EgoDataset& clean_data, const TrainCfg& cfg) {
  cov::touch("finetune_header");
  if (!header.fitted()) throw TrainError("finetune_header: header not fitted");
  if (cfg.epochs <= 0 || clean_data.entries.empty()) return header;
  auto all = entry_ptrs(clean_data);
  auto labels_all = entry_labels(all);
  if (header.kind == HeaderKind::prototype) {
    accumulate_prototype(header, pooled_values(ctx, prompt, all), labels_all);
    return header;
  }
  Adam opt(cfg.lr_header);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<const EgoEntry*> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(all[order[i]]);
        labels.push_back(labels_all[order[i]]);
      }
      Tape t;
      enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
      Var p = t.constant(prompt.p);
      HeaderVars hv = register_header(t, header, true);
      Var pooled = pooled_batch(t, ctx, ev, batch, prompt.scheme, prompt.link_threshold, p);
      Var loss = head_loss_t(t, header, hv, pooled, labels);
      t.backward(loss);
      if (header.kind == HeaderKind::linear)
        opt.step({&header.w, &header.b}, {t.grad(hv.w), t.grad(hv.b)});
      else
        opt.step({&header.w}, {t.grad(hv.w)});
    }
  }
  return header;
}

PromptState finetune_prompt(PromptState prompt, const TaskHeader& header, PromptContext& ctx,
                            const EgoDataset& clean_data, const TrainCfg& cfg) {
  cov::touch("finetune_prompt");
  if (clean_data.entries.empty()) return prompt;
  auto all = entry_ptrs(clean_data);
  auto labels_all = entry_labels(all);
  Adam opt(cfg.lr_prompt);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<const EgoEntry*> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(all[order[i]]);
        labels.push_back(labels_all[order[i]]);
      }
      Tape t;
      enc::EncoderVars ev = enc::register_encoder(t, ctx.encoder(), false);
      Var p = t.input(prompt.p, true);
      HeaderVars hv = register_header(t, header, false);
      Var pooled = pooled_batch(t, ctx, ev, batch, prompt.scheme, prompt.link_threshold, p);
      Var loss = head_loss_t(t, header, hv, pooled, labels);
      t.backward(loss);
      opt.step({&prompt.p}, {t.grad(p)});
    }
  }
  return prompt;
}

Mat apply_prompt(const PromptState& ps, const Graph& g, const enc::EncoderParams& ep) {
  cov::touch("apply_prompt");
  if (g.num_nodes() == 0) throw EvalError("apply_prompt: empty graph");
  if (ps.scheme == Scheme::allinone) {
    if (static_cast<int>(ps.p.cols()) != g.feat_dim())
      throw DimensionError("apply_prompt: token width " + std::to_string(ps.p.cols()) +
                           " != feature dim " + std::to_string(g.feat_dim()));
    int n0 = g.num_nodes();
    int m = static_cast<int>(ps.p.rows());
    Graph aug;
    aug.name = g.name;
    aug.x.resize(n0 + m, g.feat_dim());
    aug.x.topRows(n0) = g.x;
    aug.x.bottomRows(m) = ps.p;
    aug.edges = g.edges;
    for (int k = 0; k < m; ++k)
      for (int i = 0; i < n0; ++i)
        if (g.x.row(i).dot(ps.p.row(k)) > ps.link_threshold)
          aug.edges.emplace_back(i, n0 + k);
    for (int k = 0; k < m; ++k)
      for (int l = k + 1; l < m; ++l) aug.edges.emplace_back(n0 + k, n0 + l);
    canonicalize_edges(aug.edges);
    return enc::readout(enc::encode(ep, aug));
  }
  Mat pooled = enc::readout(enc::encode(ep, g));
  if (static_cast<int>(ps.p.cols()) != pooled.cols())
    throw DimensionError("apply_prompt: prompt width mismatch");
  if (ps.scheme == Scheme::graphprompt) return pooled.cwiseProduct(ps.p);
  return pooled + ps.p;
}

double prompt_norm(const Mat& p) { return p.norm(); }

}  // namespace gplab::prompt
