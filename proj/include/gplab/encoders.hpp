#pragma once

#include <string>

#include "gplab/autodiff.hpp"
#include "gplab/graph.hpp"

namespace gplab::enc {

enum class Backbone { gcn, sage, gat };

Backbone backbone_from_string(const std::string& s);
std::string to_string(Backbone b);

// Two-layer message-passing encoder. Weight layout per backbone:
//   gcn  — w1: in x h,  w2: h x h
//   sage — w1: 2in x h (self block on top, neighbor-mean block below),
//          w2: 2h x h; concat aggregation expressed as the two-block product
//   gat  — w1: in x h, w2: h x h, plus per-layer attention vectors
//          a1/a2: 2h x 1 (source half on top, destination half below)
struct EncoderParams {
  Backbone arch = Backbone::gcn;
  int in_dim = 0;
  int hidden = 0;
  Mat w1, w2;
  Mat a1, a2;  // gat only
  bool frozen = false;

  static EncoderParams init(Backbone arch, int in_dim, int hidden, Rng& rng);

  std::vector<Mat*> weights();
  std::vector<const Mat*> weights() const;
  std::uint64_t weights_checksum() const;

  json to_json() const;
  static EncoderParams from_json(const json& j);
  void save(const std::string& path) const;
  static EncoderParams load(const std::string& path);
};

// Frozen copy; weights become immutable by contract (training code refuses
// to update frozen parameters, enforced by checksum tests).
EncoderParams freeze(EncoderParams p);

// Tape handles for the encoder weights. Trainable registers them as
// parameters; frozen parameters are always constants.
struct EncoderVars {
  ad::Var w1, w2, a1, a2;
};
EncoderVars register_encoder(ad::Tape& t, const EncoderParams& p, bool trainable);

// Layer-1 linear projections of the node features; cacheable for frozen
// encoders because they do not depend on graph structure.
//   gcn/gat — xw1 = X W1 (gat reuses it as Z1)
//   sage    — xw1 = X W1_self, xw1_nb = X W1_nb
struct Layer1Pre {
  ad::Var xw1;
  ad::Var xw1_nb;  // sage only
};
Layer1Pre project_layer1(ad::Tape& t, const EncoderParams& p, const EncoderVars& ev,
                         ad::Var x);

// Full forward over a dense 0/1 adjacency (no self-loops stored; they are
// added inside). adj may carry gradients (trigger adjacency via the
// straight-through path). Returns n x h node embeddings.
ad::Var encode_dense(ad::Tape& t, const EncoderParams& p, const EncoderVars& ev, ad::Var x,
                     ad::Var adj);

// Forward from precomputed layer-1 projections (frozen-encoder fast path).
ad::Var encode_from_pre(ad::Tape& t, const EncoderParams& p, const EncoderVars& ev,
                        const Layer1Pre& pre, ad::Var adj);

// Sum pooling over node rows -> 1 x h.
ad::Var readout_t(ad::Tape& t, ad::Var node_emb);

// Convenience non-tape forward for a constant graph (shares the tape code
// path: builds a throwaway tape of constants).
Mat encode(const EncoderParams& p, const Graph& g);
Mat readout(const Mat& node_emb);

Mat dense_adjacency(const Graph& g);

// Per-node layer-1 projections for a whole source graph, computed once per
// frozen encoder and then row-sliced per ego-graph.
struct ProjectionCache {
  Mat xw1;     // N x h
  Mat xw1_nb;  // sage only: N x h
};
ProjectionCache build_projection_cache(const EncoderParams& p, const Mat& features);

}  // namespace gplab::enc
