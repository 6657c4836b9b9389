#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gplab/prompts.hpp"
#include "test_util.hpp"

using namespace gplab;
using namespace gplab::prompt;
using enc::Backbone;
using enc::EncoderParams;

namespace {

struct Fixture {
  std::shared_ptr<Graph> g;
  EncoderParams encp;
  std::unique_ptr<PromptContext> ctx;
  EgoDataset data;

  explicit Fixture(Backbone b = Backbone::gcn, int hidden = 10, std::uint64_t seed = 51) {
    g = std::make_shared<Graph>(tu::blob_graph(16, 2, 8, seed));
    Rng rng(seed + 1);
    encp = enc::freeze(EncoderParams::init(b, g->feat_dim(), hidden, rng));
    ctx = std::make_unique<PromptContext>(g, &encp);
    std::vector<int> centers;
    for (int v = 0; v < g->num_nodes(); ++v) centers.push_back(v);
    data = build_ego_dataset(g, centers, 2);
  }

  std::vector<const EgoEntry*> ptrs(std::size_t n = 0) const {
    std::vector<const EgoEntry*> out;
    for (const auto& e : data.entries) {
      out.push_back(&e);
      if (n && out.size() == n) break;
    }
    return out;
  }

  std::vector<int> labels(const std::vector<const EgoEntry*>& es) const {
    std::vector<int> out;
    for (const auto* e : es) out.push_back(e->label);
    return out;
  }
};

}  // namespace

TEST_CASE("scheme and header names round trip") {
  for (Scheme s : {Scheme::graphprompt, Scheme::gppt, Scheme::allinone})
    CHECK(scheme_from_string(to_string(s)) == s);
  for (HeaderKind k : {HeaderKind::prototype, HeaderKind::token_link, HeaderKind::linear})
    CHECK(header_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(scheme_from_string("gpf"), ConfigError);
  CHECK_THROWS_AS(header_from_string("mlp"), ConfigError);
}

TEST_CASE("cached pooled embeddings equal the direct encoder forward") {
  for (Backbone b : {Backbone::gcn, Backbone::sage, Backbone::gat}) {
    Fixture f(b);
    for (std::size_t i = 0; i < 5; ++i) {
      Mat direct = enc::readout(enc::encode(f.encp, f.data.materialize(i)));
      CHECK(tu::max_rel_err(f.ctx->clean_pooled(f.data.entries[i]), direct) < 1e-9);
    }
    auto es = f.ptrs(4);
    Mat batch = f.ctx->clean_pooled_batch(es);
    for (int i = 0; i < 4; ++i)
      CHECK(tu::max_rel_err(batch.row(i), f.ctx->clean_pooled(*es[static_cast<std::size_t>(i)])) <
            1e-12);
  }
}

TEST_CASE("identity prompts leave pooled embeddings unchanged") {
  Fixture f;
  Rng rng(1);
  PromptState mul_id = PromptState::init(Scheme::graphprompt, 10, 8, 0, rng);
  PromptState add_id = PromptState::init(Scheme::gppt, 10, 8, 0, rng);
  auto es = f.ptrs(6);
  Mat clean = f.ctx->clean_pooled_batch(es);
  CHECK(tu::max_rel_err(pooled_rows(*f.ctx, mul_id, es), clean) == 0.0);
  CHECK(tu::max_rel_err(pooled_rows(*f.ctx, add_id, es), clean) == 0.0);
}

TEST_CASE("multiplicative prompts scale pooled embeddings coordinatewise") {
  Fixture f;
  Rng rng(2);
  PromptState ps = PromptState::init(Scheme::graphprompt, 10, 8, 0, rng);
  ps.p = gaussian(1, 10, rng);
  auto es = f.ptrs(5);
  Mat clean = f.ctx->clean_pooled_batch(es);
  Mat got = pooled_rows(*f.ctx, ps, es);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 10; ++j)
      CHECK(tu::close(got(i, j), clean(i, j) * ps.p(0, j), 1e-12));
  // scaling the prompt scales the output linearly
  PromptState ps2 = ps;
  ps2.p *= 3.0;
  CHECK(tu::max_rel_err(pooled_rows(*f.ctx, ps2, es), Mat(3.0 * got)) < 1e-12);
}

TEST_CASE("additive structure tokens shift pooled embeddings") {
  Fixture f;
  Rng rng(3);
  PromptState ps = PromptState::init(Scheme::gppt, 10, 8, 0, rng);
  ps.p = gaussian(1, 10, rng);
  auto es = f.ptrs(5);
  Mat clean = f.ctx->clean_pooled_batch(es);
  Mat got = pooled_rows(*f.ctx, ps, es);
  for (int i = 0; i < 5; ++i)
    CHECK(tu::max_rel_err(got.row(i), Mat(clean.row(i) + ps.p.row(0))) < 1e-12);
}

TEST_CASE("input-level tokens graft onto the ego graph with similarity links") {
  Fixture f;
  Rng rng(4);
  PromptState ps = PromptState::init(Scheme::allinone, 10, 8, 3, rng);
  const EgoEntry& e = f.data.entries[0];
  Graph ego = materialize_ego(*f.g, e);

  // independent composition: append tokens, link where dot > threshold,
  // interconnect tokens, then encode and pool
  int n = ego.num_nodes(), m = 3;
  Graph aug;
  aug.x = Mat::Zero(n + m, 8);
  aug.x.topRows(n) = ego.x;
  aug.x.bottomRows(m) = ps.p;
  aug.edges = ego.edges;
  for (int k = 0; k < m; ++k)
    for (int v = 0; v < n; ++v)
      if (ego.x.row(v).dot(ps.p.row(k)) > ps.link_threshold)
        aug.edges.emplace_back(v, n + k);
  for (int k = 0; k < m; ++k)
    for (int l = k + 1; l < m; ++l) aug.edges.emplace_back(n + k, n + l);
  canonicalize_edges(aug.edges);
  Mat want = enc::readout(enc::encode(f.encp, aug));

  Mat got = pooled_rows(*f.ctx, ps, {&e});
  CHECK(tu::max_rel_err(got, want) < 1e-9);
  CHECK(tu::max_rel_err(apply_prompt(ps, ego, f.encp), want) < 1e-9);
}

TEST_CASE("deployment-side composition matches the training fast path") {
  for (Backbone b : {Backbone::gcn, Backbone::sage, Backbone::gat}) {
    Fixture f(b);
    Rng rng(5);
    for (Scheme s : {Scheme::graphprompt, Scheme::gppt, Scheme::allinone}) {
      PromptState ps = PromptState::init(s, 10, 8, 2, rng);
      ps.p = gaussian(ps.p.rows() > 0 ? static_cast<int>(ps.p.rows()) : 1,
                      static_cast<int>(ps.p.cols()), rng, 0.5);
      for (std::size_t i : {std::size_t{0}, std::size_t{9}}) {
        const EgoEntry& e = f.data.entries[i];
        Mat fast = pooled_rows(*f.ctx, ps, {&e});
        Mat composed = apply_prompt(ps, materialize_ego(*f.g, e), f.encp);
        CHECK(tu::max_rel_err(fast, composed) < 1e-9);
      }
    }
  }
}

TEST_CASE("prompt gradients match finite differences for every scheme") {
  Fixture f;
  auto es = f.ptrs(3);
  Rng rng(6);
  Mat w = gaussian(3, 10, rng);
  for (Scheme s : {Scheme::graphprompt, Scheme::gppt, Scheme::allinone}) {
    PromptState ps = PromptState::init(s, 10, 8, 2, rng);
    ps.p = gaussian(static_cast<int>(ps.p.rows()), static_cast<int>(ps.p.cols()), rng, 0.5);
    auto value = [&](const Mat& pv) {
      ad::Tape t;
      auto ev = enc::register_encoder(t, f.encp, false);
      ad::Var pooled =
          pooled_batch(t, *f.ctx, ev, es, s, ps.link_threshold, t.constant(pv));
      return (t.val(pooled).cwiseProduct(w)).sum();
    };
    ad::Tape t;
    auto ev = enc::register_encoder(t, f.encp, false);
    ad::Var p = t.param(ps.p);
    ad::Var loss =
        t.sum_all(t.mul(pooled_batch(t, *f.ctx, ev, es, s, ps.link_threshold, p),
                        t.constant(w)));
    t.backward(loss);
    CHECK(tu::max_rel_err(t.grad(p), tu::fd_grad(ps.p, value)) < 1e-4);
  }
}

TEST_CASE("prototype fitting computes class means and counts") {
  Mat pooled(4, 3);
  pooled << 1, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 5;
  std::vector<int> labels = {0, 0, 1, 2};
  Rng rng(7);
  TaskHeader h = TaskHeader::init(HeaderKind::prototype, 3, 3, rng);
  CHECK_FALSE(h.fitted());
  fit_prototype(h, pooled, labels);
  CHECK(h.fitted());
  CHECK(h.w(0, 0) == 2.0);  // mean of 1 and 3
  CHECK(h.w(1, 1) == 2.0);
  CHECK(h.w(2, 2) == 5.0);
  CHECK(h.counts == std::vector<double>{2.0, 1.0, 1.0});
}

TEST_CASE("running-mean accumulation equals a one-shot fit over the union") {
  Fixture f;
  Rng rng(8);
  PromptState ps = PromptState::init(Scheme::gppt, 10, 8, 0, rng);
  // nodes are ordered by class, so slice both blocks to cover every class
  auto all = f.ptrs();
  std::vector<const EgoEntry*> a, b;
  for (std::size_t i = 0; i < all.size(); ++i)
    ((i % 16) < 5 ? a : b).push_back(all[i]);

  TaskHeader h = TaskHeader::init(HeaderKind::prototype, 2, 10, rng);
  fit_prototype(h, pooled_rows(*f.ctx, ps, a), f.labels(a));
  EgoDataset rest;
  rest.source = f.g;
  rest.hops = 2;
  for (const auto* e : b) rest.entries.push_back(*e);
  TrainCfg cfg;
  TaskHeader two_step = finetune_header(h, ps, *f.ctx, rest, cfg);

  TaskHeader oneshot = TaskHeader::init(HeaderKind::prototype, 2, 10, rng);
  fit_prototype(oneshot, pooled_rows(*f.ctx, ps, all), f.labels(all));
  CHECK(tu::max_rel_err(two_step.w, oneshot.w) < 1e-9);
  CHECK(two_step.counts == oneshot.counts);
}

TEST_CASE("zero-epoch fine-tuning is an exact no-op for every header kind") {
  Fixture f;
  Rng rng(9);
  PromptState ps = PromptState::init(Scheme::graphprompt, 10, 8, 0, rng);
  TrainCfg zero;
  zero.epochs = 0;
  auto all = f.ptrs();
  std::vector<const EgoEntry*> mixed = {all[0], all[1], all[2], all[16], all[17], all[18]};
  for (HeaderKind k : {HeaderKind::prototype, HeaderKind::token_link, HeaderKind::linear}) {
    TaskHeader h = TaskHeader::init(k, 2, 10, rng);
    if (k == HeaderKind::prototype)
      fit_prototype(h, pooled_rows(*f.ctx, ps, mixed), f.labels(mixed));
    TaskHeader out = finetune_header(h, ps, *f.ctx, f.data, zero);
    CHECK(checksum(out.w) == checksum(h.w));
    CHECK(out.counts == h.counts);
    PromptState pout = finetune_prompt(ps, h, *f.ctx, f.data, zero);
    CHECK(checksum(pout.p) == checksum(ps.p));
  }
}

TEST_CASE("cosine scores match a hand oracle and ties break to the lowest id") {
  TaskHeader h;
  h.kind = HeaderKind::prototype;
  h.w = Mat(2, 3);
  h.w << 1, 0, 0, 0, 1, 0;
  h.counts = {1.0, 1.0};
  Mat pooled(1, 3);
  pooled << 2, 0, 0;
  Mat s = head_scores(h, pooled);
  CHECK(tu::close(s(0, 0), 1.0, 1e-9));
  CHECK(tu::close(s(0, 1), 0.0, 1e-9));
  CHECK(head_predict(h, pooled) == 0);

  // symmetric diagonal input ties both centers: lowest class id wins
  Mat tied(1, 3);
  tied << 1, 1, 0;
  CHECK(head_predict(h, tied) == 0);
}

TEST_CASE("linear scores are affine and a biased zero header is constant") {
  TaskHeader h;
  h.kind = HeaderKind::linear;
  h.w = Mat::Zero(3, 3);
  h.b = Mat(1, 3);
  h.b << 0.0, 0.5, 0.1;
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    Mat row = gaussian(1, 3, rng);
    CHECK(head_predict(h, row) == 1);
  }
  h.w = Mat::Identity(3, 3);
  Mat row(1, 3);
  row << 0.2, -0.1, 5.0;
  Mat s = head_scores(h, row);
  CHECK(tu::close(s(0, 2), 5.1, 1e-12));
  CHECK(head_predict(h, row) == 2);
}

TEST_CASE("unfitted prototype headers refuse to score") {
  Rng rng(11);
  TaskHeader h = TaskHeader::init(HeaderKind::prototype, 2, 4, rng);
  CHECK_THROWS_AS(head_scores(h, Mat::Ones(1, 4)), EvalError);
}

TEST_CASE("header training loss scales cosine scores by the temperature") {
  Fixture f;
  Rng rng(12);
  TaskHeader h = TaskHeader::init(HeaderKind::token_link, 2, 10, rng);
  Mat pooled = gaussian(4, 10, rng);
  std::vector<int> labels = {0, 1, 1, 0};
  ad::Tape t;
  auto hv = register_header(t, h, false);
  double got = t.val(head_loss_t(t, h, hv, t.constant(pooled), labels))(0, 0);
  Mat scaled = head_scores(h, pooled) / h.temperature;
  ad::Tape t2;
  double want = t2.val(t2.cross_entropy(t2.constant(scaled), labels))(0, 0);
  CHECK(tu::close(got, want, 1e-9));
}

TEST_CASE("header gradients match finite differences for every kind") {
  Rng rng(13);
  Mat pooled = gaussian(5, 6, rng);
  std::vector<int> labels = {0, 1, 2, 1, 0};
  for (HeaderKind k : {HeaderKind::prototype, HeaderKind::token_link, HeaderKind::linear}) {
    TaskHeader h = TaskHeader::init(k, 3, 6, rng);
    if (k == HeaderKind::prototype) {
      h.w = gaussian(3, 6, rng);
      h.counts = {1.0, 1.0, 1.0};
    }
    auto value_w = [&](const Mat& wv) {
      TaskHeader q = h;
      q.w = wv;
      ad::Tape t;
      auto hv = register_header(t, q, false);
      return t.val(head_loss_t(t, q, hv, t.constant(pooled), labels))(0, 0);
    };
    ad::Tape t;
    auto hv = register_header(t, h, true);
    t.backward(head_loss_t(t, h, hv, t.constant(pooled), labels));
    CHECK(tu::max_rel_err(t.grad(hv.w), tu::fd_grad(h.w, value_w)) < 1e-4);
    if (k == HeaderKind::linear) {
      auto value_b = [&](const Mat& bv) {
        TaskHeader q = h;
        q.b = bv;
        ad::Tape t2;
        auto hv2 = register_header(t2, q, false);
        return t2.val(head_loss_t(t2, q, hv2, t2.constant(pooled), labels))(0, 0);
      };
      CHECK(tu::max_rel_err(t.grad(hv.b), tu::fd_grad(h.b, value_b)) < 1e-4);
    }
  }
}

TEST_CASE("clean training reaches high accuracy on separable data") {
  Fixture f(Backbone::gcn, 16, 61);
  Rng rng(14);
  PromptState ps = PromptState::init(Scheme::graphprompt, 16, 8, 0, rng);
  TaskHeader h = TaskHeader::init(HeaderKind::prototype, 2, 16, rng);
  TrainCfg cfg;
  cfg.epochs = 30;
  cfg.seed = 15;
  auto [tp, th] = train_clean(ps, h, *f.ctx, f.data, cfg);
  CHECK(th.fitted());
  int correct = 0;
  auto es = f.ptrs();
  Mat rows = pooled_rows(*f.ctx, tp, es);
  for (std::size_t i = 0; i < es.size(); ++i)
    if (head_predict(th, rows.row(static_cast<Eigen::Index>(i))) == es[i]->label) ++correct;
  CHECK(static_cast<double>(correct) / static_cast<double>(es.size()) >= 0.8);
  // determinism: a rerun reproduces the same parameters bit-for-bit
  auto [tp2, th2] = train_clean(ps, h, *f.ctx, f.data, cfg);
  CHECK(checksum(tp2.p) == checksum(tp.p));
  CHECK(checksum(th2.w) == checksum(th.w));
}

TEST_CASE("prompt-only fine-tuning moves the prompt and not the header") {
  Fixture f;
  Rng rng(16);
  PromptState ps = PromptState::init(Scheme::graphprompt, 10, 8, 0, rng);
  TaskHeader h = TaskHeader::init(HeaderKind::linear, 2, 10, rng);
  TrainCfg cfg;
  cfg.epochs = 3;
  cfg.seed = 17;
  PromptState out = finetune_prompt(ps, h, *f.ctx, f.data, cfg);
  CHECK(checksum(out.p) != checksum(ps.p));
}

TEST_CASE("prompt and header serialization round trips") {
  tu::TmpDir dir("prompt");
  Rng rng(18);
  for (Scheme s : {Scheme::graphprompt, Scheme::gppt, Scheme::allinone}) {
    PromptState ps = PromptState::init(s, 6, 5, 2, rng);
    ps.link_threshold = 0.25;
    std::string path = (dir.path / (to_string(s) + ".json")).string();
    ps.save(path);
    PromptState q = PromptState::load(path);
    CHECK(q.scheme == s);
    CHECK(q.link_threshold == 0.25);
    CHECK(checksum(q.p) == checksum(ps.p));
  }
  for (HeaderKind k : {HeaderKind::prototype, HeaderKind::token_link, HeaderKind::linear}) {
    TaskHeader h = TaskHeader::init(k, 3, 6, rng);
    if (k == HeaderKind::prototype) {
      h.w = gaussian(3, 6, rng);
      h.counts = {2.0, 1.0, 4.0};
    }
    std::string path = (dir.path / (to_string(k) + ".json")).string();
    h.save(path);
    TaskHeader q = TaskHeader::load(path);
    CHECK(q.kind == k);
    CHECK(checksum(q.w) == checksum(h.w));
    CHECK(q.counts == h.counts);
    CHECK(q.temperature == h.temperature);
  }
}

TEST_CASE("prompt norm is the flattened euclidean norm") {
  Mat p(2, 2);
  p << 3, 0, 0, 4;
  CHECK(tu::close(prompt_norm(p), 5.0, 1e-12));
}
