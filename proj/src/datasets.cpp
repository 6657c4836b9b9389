#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "gplab/graph.hpp"

#include "gplab/coverage.hpp"

namespace gplab {

namespace fs = std::filesystem;

namespace {

struct BuiltinSpec {
  int n;
  int e;
  int d;
  std::vector<int> class_sizes;
  double homophily;
};

// Statistically matched stand-ins for the three citation networks: exact
// node/edge/class counts, sparse binary bag-of-words features with per-class
// topic blocks, homophilous edges, bounded degree.
const BuiltinSpec& builtin_spec(const std::string& name) {
  static const BuiltinSpec cora{2708, 5429, 1433, {351, 217, 418, 818, 426, 298, 180}, 0.81};
  static const BuiltinSpec citeseer{3327, 4732, 3703, {264, 590, 668, 701, 596, 508}, 0.74};
  static const BuiltinSpec pubmed{19717, 44338, 500, {4103, 7875, 7739}, 0.80};
  if (name == "cora") return cora;
  if (name == "citeseer") return citeseer;
  if (name == "pubmed") return pubmed;
  throw DataError("unknown dataset: " + name);
}

Graph synthesize(const std::string& name) {
  const BuiltinSpec& spec = builtin_spec(name);
  int n = spec.n;
  int c = static_cast<int>(spec.class_sizes.size());
  Rng rng(fnv1a(name.data(), name.size()));

  Graph g;
  g.name = name;

  // labels: class blocks shuffled into a random node order
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < c; ++k)
    labels.insert(labels.end(), static_cast<std::size_t>(spec.class_sizes[k]), k);
  std::shuffle(labels.begin(), labels.end(), rng);
  g.labels = labels;

  std::vector<std::vector<int>> class_nodes(static_cast<std::size_t>(c));
  for (int v = 0; v < n; ++v)
    class_nodes[static_cast<std::size_t>(labels[static_cast<std::size_t>(v)])].push_back(v);

  // features: ~18 active words per node; 12 from the class topic block,
  // 2 bleeding into the next class's block, 4 anywhere. Within a block,
  // word popularity is Zipfian so same-class nodes share core vocabulary
  // (within-class cosine ~0.2, like real bag-of-words corpora); uniform
  // blocks would make same-class rows nearly orthogonal.
  g.x = Mat::Zero(n, spec.d);
  int bw = spec.d / c;
  std::vector<double> zipf(static_cast<std::size_t>(bw));
  for (int k = 0; k < bw; ++k) zipf[static_cast<std::size_t>(k)] = 1.0 / (k + 1);
  std::discrete_distribution<int> word(zipf.begin(), zipf.end());
  std::uniform_int_distribution<int> any_dim(0, spec.d - 1);
  for (int v = 0; v < n; ++v) {
    int y = labels[static_cast<std::size_t>(v)];
    int yn = (y + 1) % c;
    for (int t = 0; t < 12; ++t) g.x(v, y * bw + word(rng)) = 1.0;
    for (int t = 0; t < 2; ++t) g.x(v, yn * bw + word(rng)) = 1.0;
    for (int t = 0; t < 4; ++t) g.x(v, any_dim(rng)) = 1.0;
  }

  // edges: homophilous random pairing with a degree cap so 2-hop
  // neighborhoods stay small
  const int degree_cap = 15;
  std::vector<int> deg(static_cast<std::size_t>(n), 0);
  std::unordered_set<std::int64_t> seen;
  seen.reserve(static_cast<std::size_t>(spec.e) * 2);
  std::uniform_int_distribution<int> any_node(0, n - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  g.edges.reserve(static_cast<std::size_t>(spec.e));
  long long guard = 0;
  while (static_cast<int>(g.edges.size()) < spec.e) {
    if (++guard > 200LL * spec.e)
      throw DataError("synthesize: edge generation failed to converge");
    int u = any_node(rng);
    if (deg[static_cast<std::size_t>(u)] >= degree_cap) continue;
    int v;
    if (coin(rng) < spec.homophily) {
      const auto& pool =
          class_nodes[static_cast<std::size_t>(labels[static_cast<std::size_t>(u)])];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      v = pool[pick(rng)];
    } else {
      v = any_node(rng);
    }
    if (v == u || deg[static_cast<std::size_t>(v)] >= degree_cap) continue;
    int a = std::min(u, v), b = std::max(u, v);
    std::int64_t key = static_cast<std::int64_t>(a) * n + b;
    if (!seen.insert(key).second) continue;
    g.edges.emplace_back(a, b);
    ++deg[static_cast<std::size_t>(a)];
    ++deg[static_cast<std::size_t>(b)];
  }
  canonicalize_edges(g.edges);
  g.validate();
  return g;
}

Mat read_features_bin(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::int64_t n = 0, d = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  in.read(reinterpret_cast<char*>(&d), sizeof d);
  if (!in || n < 0 || d < 0) throw DataError(p.string() + ": bad header");
  Mat x(n, d);
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(d));
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(sizeof(double) * row.size()));
    if (!in) throw DataError(p.string() + ": truncated row " + std::to_string(i));
    for (std::int64_t j = 0; j < d; ++j) x(i, j) = row[static_cast<std::size_t>(j)];
  }
  return x;
}

Mat read_features_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError(p.string() + ": bad numeric cell '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw DataError(p.string() + ": non-rectangular row " + std::to_string(rows.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(p.string() + ": no feature rows");
  Mat x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return x;
}

Graph load_directory(const fs::path& dir) {
  fs::path edges_p = dir / "edges.txt";
  fs::path feat_csv = dir / "features.csv";
  fs::path feat_bin = dir / "features.bin";
  fs::path labels_p = dir / "labels.txt";
  if (!fs::exists(edges_p)) throw DataError("missing " + edges_p.string());
  if (!fs::exists(feat_csv) && !fs::exists(feat_bin))
    throw DataError("missing " + feat_csv.string() + " (or features.bin)");
  if (!fs::exists(labels_p)) throw DataError("missing " + labels_p.string());

  Graph g;
  g.name = dir.filename().string();
  g.x = fs::exists(feat_bin) ? read_features_bin(feat_bin) : read_features_csv(feat_csv);
  int n = g.num_nodes();

  std::ifstream ein(edges_p);
  std::string line;
  while (std::getline(ein, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    int u, v;
    if (!(ss >> u >> v)) throw DataError(edges_p.string() + ": bad edge line '" + line + "'");
    if (u < 0 || u >= n || v < 0 || v >= n)
      throw DataError(edges_p.string() + ": endpoint out of range in '" + line + "'");
    g.edges.emplace_back(u, v);
  }
  canonicalize_edges(g.edges);

  std::ifstream lin(labels_p);
  while (std::getline(lin, line)) {
    if (line.empty()) continue;
    try {
      g.labels.push_back(std::stoi(line));
    } catch (const std::exception&) {
      throw DataError(labels_p.string() + ": bad label line '" + line + "'");
    }
  }
  if (static_cast<int>(g.labels.size()) != n)
    throw DataError(labels_p.string() + ": " + std::to_string(g.labels.size()) +
                    " labels for " + std::to_string(n) + " nodes");
  g.validate();
  return g;
}

}  // namespace

Graph load_dataset(const std::string& path_or_name) {
  cov::touch("load_dataset");
  if (fs::is_directory(path_or_name)) return load_directory(path_or_name);
  std::string lower = path_or_name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return synthesize(lower);
}

}  // namespace gplab
