#include "gplab/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "gplab/coverage.hpp"

namespace fs = std::filesystem;

namespace gplab::cli {

const std::vector<std::string>& known_scenarios() {
  static const std::vector<std::string> s = {
      "direct",      "finetune_header", "finetune_prompt", "finetune_both",
      "user_header", "defense_prune",   "cross_dataset"};
  return s;
}

json ExperimentConfig::to_json() const {
  return json{{"dataset", dataset},
              {"pretrain_dataset", pretrain_dataset},
              {"backbone", backbone},
              {"pretrainer", pretrainer},
              {"gpl", gpl},
              {"header", header},
              {"method", method},
              {"hidden", hidden},
              {"shots", shots},
              {"partition_k", partition_k},
              {"svd_dim", svd_dim},
              {"scenarios", scenarios},
              {"seeds", seeds},
              {"out", out_dir},
              {"encoder", encoder_path},
              {"prune_threshold", prune_threshold},
              {"pretrain",
               json{{"epochs", pretrain.epochs},
                    {"lr", pretrain.lr},
                    {"noise_scale", pretrain.noise_scale},
                    {"edge_drop", pretrain.edge_drop},
                    {"feat_mask", pretrain.feat_mask},
                    {"temperature", pretrain.temperature},
                    {"seed", pretrain.seed}}},
              {"attack", attack.to_json()},
              {"finetune",
               json{{"epochs", finetune.epochs},
                    {"lr_prompt", finetune.lr_prompt},
                    {"lr_header", finetune.lr_header},
                    {"batch", finetune.batch},
                    {"seed", finetune.seed}}},
              {"sweep", json{{"kind", sweep_kind}, {"values", sweep_values}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a json object");
  static const std::set<std::string> allowed = {
      "dataset", "pretrain_dataset", "backbone",  "pretrainer",      "gpl",
      "header",  "method",           "hidden",    "shots",           "partition_k",
      "svd_dim", "scenarios",        "seeds",     "out",             "encoder",
      "prune_threshold",             "pretrain",  "attack",          "finetune",
      "sweep"};
  for (const auto& item : j.items())
    if (!allowed.count(item.key()))
      throw ConfigError("unknown config field '" + item.key() + "'");

  ExperimentConfig c;
  c.dataset = j.value("dataset", c.dataset);
  c.pretrain_dataset = j.value("pretrain_dataset", c.pretrain_dataset);
  c.backbone = j.value("backbone", c.backbone);
  c.pretrainer = j.value("pretrainer", c.pretrainer);
  c.gpl = j.value("gpl", c.gpl);
  c.header = j.value("header", c.header);
  c.method = j.value("method", c.method);
  c.hidden = j.value("hidden", c.hidden);
  c.shots = j.value("shots", c.shots);
  c.partition_k = j.value("partition_k", c.partition_k);
  c.svd_dim = j.value("svd_dim", c.svd_dim);
  if (j.contains("scenarios")) c.scenarios = j.at("scenarios").get<std::vector<std::string>>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.out_dir = j.value("out", c.out_dir);
  c.encoder_path = j.value("encoder", c.encoder_path);
  c.prune_threshold = j.value("prune_threshold", c.prune_threshold);
  if (j.contains("pretrain")) {
    const json& k = j.at("pretrain");
    c.pretrain.epochs = k.value("epochs", c.pretrain.epochs);
    c.pretrain.lr = k.value("lr", c.pretrain.lr);
    c.pretrain.noise_scale = k.value("noise_scale", c.pretrain.noise_scale);
    c.pretrain.edge_drop = k.value("edge_drop", c.pretrain.edge_drop);
    c.pretrain.feat_mask = k.value("feat_mask", c.pretrain.feat_mask);
    c.pretrain.temperature = k.value("temperature", c.pretrain.temperature);
    c.pretrain.seed = k.value("seed", c.pretrain.seed);
  }
  c.attack = atk::AttackConfig::from_json(j.value("attack", json::object()));
  if (j.contains("finetune")) {
    const json& k = j.at("finetune");
    c.finetune.epochs = k.value("epochs", c.finetune.epochs);
    c.finetune.lr_prompt = k.value("lr_prompt", c.finetune.lr_prompt);
    c.finetune.lr_header = k.value("lr_header", c.finetune.lr_header);
    c.finetune.batch = k.value("batch", c.finetune.batch);
    c.finetune.seed = k.value("seed", c.finetune.seed);
  }
  if (j.contains("sweep")) {
    const json& k = j.at("sweep");
    c.sweep_kind = k.value("kind", c.sweep_kind);
    if (k.contains("values")) c.sweep_values = k.at("values").get<std::vector<double>>();
  }

  // Enum/range validation before any compute; the *_from_string helpers name
  // the accepted values in their messages.
  enc::backbone_from_string(c.backbone);
  c.attack.scheme = prompt::scheme_from_string(c.gpl);
  c.attack.header_kind = prompt::header_from_string(c.header);
  atk::variant_from_string(c.method);
  ev::sweep_kind_from_string(c.sweep_kind);
  static const std::set<std::string> pretrainers = {"simgrace", "graphcl", "edgepred"};
  if (!pretrainers.count(c.pretrainer))
    throw ConfigError("unknown pretrainer '" + c.pretrainer +
                      "' (expected one of {simgrace, graphcl, edgepred})");
  if (c.dataset.empty()) throw ConfigError("'dataset' must not be empty");
  if (c.hidden < 1) throw ConfigError("'hidden' must be >= 1");
  if (c.shots < 1) throw ConfigError("'shots' must be >= 1");
  if (c.partition_k < 1) throw ConfigError("'partition_k' must be >= 1");
  if (c.svd_dim < 1) throw ConfigError("'svd_dim' must be >= 1");
  if (c.prune_threshold < -1.0 || c.prune_threshold > 1.0)
    throw ConfigError("'prune_threshold' must lie in [-1, 1]");
  if (c.scenarios.empty()) throw ConfigError("'scenarios' must not be empty");
  for (const std::string& s : c.scenarios) {
    const auto& known = known_scenarios();
    if (std::find(known.begin(), known.end(), s) == known.end()) {
      std::string list;
      for (const auto& k : known) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("unknown scenario '" + s + "' (expected one of {" + list + "})");
    }
  }
  if (c.seeds.empty()) throw ConfigError("'seeds' must not be empty");
  if (c.sweep_values.empty()) throw ConfigError("'sweep.values' must not be empty");
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  json j;
  try {
    f >> j;
    return from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

std::string ExperimentConfig::hash() const {
  std::string dump = to_json().dump();
  std::uint64_t h = fnv1a(dump.data(), dump.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t pos = 0;
      unsigned long long v = std::stoull(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("invalid seed '" + tok + "' in --seeds");
    }
  }
  if (out.empty()) throw ConfigError("--seeds produced an empty list");
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

enc::EncoderParams load_frozen_encoder(const ExperimentConfig& cfg,
                                       const std::string& out_dir) {
  std::string path =
      cfg.encoder_path.empty() ? out_dir + "/encoder.json" : cfg.encoder_path;
  enc::EncoderParams encoder = enc::EncoderParams::load(path);
  if (!encoder.frozen)
    throw ConfigError("encoder checkpoint '" + path +
                      "' is not frozen; attacks operate on frozen encoders only");
  return encoder;
}

std::string run_dir_for(const std::string& out_dir, const std::string& method,
                        std::uint64_t seed) {
  return out_dir + "/" + method + "_seed" + std::to_string(seed);
}

}  // namespace

int cmd_pretrain(const ExperimentConfig& cfg, const std::string& out_dir) {
  cov::touch("cmd_pretrain");
  ensure_dir(out_dir);
  auto graph = std::make_shared<const Graph>(load_dataset(cfg.dataset));
  Rng rng(cfg.pretrain.seed);
  enc::EncoderParams params = enc::EncoderParams::init(
      enc::backbone_from_string(cfg.backbone), graph->feat_dim(), cfg.hidden, rng);
  std::vector<double> losses;
  pre::PretrainCfg pc = cfg.pretrain;
  pc.loss_log = &losses;
  enc::EncoderParams trained;
  if (cfg.pretrainer == "edgepred") {
    trained = pre::pretrain_edgepred(std::move(params), *graph, pc);
  } else {
    int k = std::max(1, std::min(cfg.partition_k, graph->num_nodes()));
    pre::PretrainCorpus corpus = pre::partition_corpus(graph, k, pc.seed);
    trained = cfg.pretrainer == "simgrace"
                  ? pre::pretrain_simgrace(std::move(params), corpus, pc)
                  : pre::pretrain_graphcl(std::move(params), corpus, pc);
  }
  enc::EncoderParams frozen = enc::freeze(std::move(trained));
  std::string path = out_dir + "/encoder.json";
  frozen.save(path);
  {
    std::ofstream f(out_dir + "/pretrain_log.csv");
    if (!f) throw DataError("cannot write '" + out_dir + "/pretrain_log.csv'");
    f << "epoch,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) f << i << "," << losses[i] << "\n";
  }
  std::cout << "encoder: " << path << "\n"
            << "checksum: " << frozen.weights_checksum() << "\n";
  return 0;
}

int cmd_attack(const ExperimentConfig& cfg, const std::string& out_dir) {
  cov::touch("cmd_attack");
  ensure_dir(out_dir);
  auto graph = std::make_shared<const Graph>(load_dataset(cfg.dataset));
  enc::EncoderParams encoder = load_frozen_encoder(cfg, out_dir);
  atk::Variant variant = atk::variant_from_string(cfg.method);
  for (std::uint64_t seed : cfg.seeds) {
    atk::AttackConfig ac = cfg.attack;
    ac.seed = seed;
    ac.clean.seed = seed;
    std::string run_dir = run_dir_for(out_dir, cfg.method, seed);
    ensure_dir(run_dir);
    ac.log_csv = run_dir + "/log.csv";
    NodeSplit split = make_split(*graph, cfg.shots, seed);
    split = select_poison_nodes(split, ac.poison_ratio, seed);
    atk::AttackRun run = atk::run_variant(variant, encoder, graph, split, ac);
    run.save(run_dir);
    std::cout << "run: " << run_dir << "\n";
  }
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& out_dir) {
  cov::touch("cmd_eval");
  if (cfg.scenarios.empty()) throw ConfigError("scenario list is empty");
  ensure_dir(out_dir);
  auto graph = std::make_shared<const Graph>(load_dataset(cfg.dataset));
  std::string results = out_dir + "/results.jsonl";
  std::string chash = cfg.hash();
  std::map<std::string, std::pair<double, double>> sums;  // scenario -> (asr, ca)
  std::map<std::string, int> counts;
  for (std::uint64_t seed : cfg.seeds) {
    NodeSplit split = make_split(*graph, cfg.shots, seed);
    split = select_poison_nodes(split, cfg.attack.poison_ratio, seed);
    prompt::TrainCfg ft = cfg.finetune;
    ft.seed = seed;
    std::optional<atk::AttackRun> run;
    auto loaded = [&]() -> const atk::AttackRun& {
      if (!run) run = atk::AttackRun::load(run_dir_for(out_dir, cfg.method, seed));
      return *run;
    };
    for (const std::string& scenario : cfg.scenarios) {
      ev::Metrics m;
      if (scenario == "direct") {
        m = ev::evaluate(loaded(), graph, split);
      } else if (scenario == "finetune_header") {
        m = ev::scenario_finetune_header(loaded(), graph, split, ft);
      } else if (scenario == "finetune_prompt") {
        m = ev::scenario_finetune_prompt(loaded(), graph, split, ft, false);
      } else if (scenario == "finetune_both") {
        m = ev::scenario_finetune_prompt(loaded(), graph, split, ft, true);
      } else if (scenario == "user_header") {
        m = ev::scenario_user_header(loaded(), graph, split, ft);
      } else if (scenario == "defense_prune") {
        m = ev::evaluate(loaded(), graph, split, cfg.prune_threshold);
      } else {  // cross_dataset (validated at parse time)
        if (cfg.pretrain_dataset.empty())
          throw ConfigError("cross_dataset scenario requires 'pretrain_dataset'");
        Graph a = load_dataset(cfg.pretrain_dataset);
        ev::CrossDatasetCfg cc;
        cc.pretrainer = cfg.pretrainer;
        cc.backbone = enc::backbone_from_string(cfg.backbone);
        cc.hidden = cfg.hidden;
        cc.svd_dim = cfg.svd_dim;
        cc.shots = cfg.shots;
        cc.partition_k = cfg.partition_k;
        cc.pretrain = cfg.pretrain;
        cc.attack = cfg.attack;
        cc.attack.seed = seed;
        cc.attack.clean.seed = seed;
        m = ev::scenario_cross_dataset(a, *graph, cc);
      }
      ev::ResultRow row;
      row.scenario = m.scenario;
      row.dataset = cfg.dataset;
      row.gpl = cfg.gpl;
      row.backbone = cfg.backbone;
      row.method = cfg.method;
      row.asr = m.asr;
      row.ca = m.ca;
      row.seed = seed;
      row.config_hash = chash;
      ev::append_result(results, row);
      sums[m.scenario].first += m.asr;
      sums[m.scenario].second += m.ca;
      counts[m.scenario] += 1;
    }
  }
  for (const auto& [scenario, sum] : sums) {
    ev::ResultRow row;
    row.scenario = scenario;
    row.dataset = cfg.dataset;
    row.gpl = cfg.gpl;
    row.backbone = cfg.backbone;
    row.method = cfg.method;
    row.asr = sum.first / counts[scenario];
    row.ca = sum.second / counts[scenario];
    row.seed = 0;
    row.config_hash = chash;
    row.aggregate = true;
    ev::append_result(results, row);
  }
  std::cout << "results: " << results << "\n";
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir) {
  cov::touch("cmd_sweep");
  ensure_dir(out_dir);
  auto graph = std::make_shared<const Graph>(load_dataset(cfg.dataset));
  enc::EncoderParams encoder = load_frozen_encoder(cfg, out_dir);
  std::uint64_t seed = cfg.seeds.front();
  NodeSplit split = make_split(*graph, cfg.shots, seed);
  atk::AttackConfig ac = cfg.attack;
  ac.seed = seed;
  ac.clean.seed = seed;
  ev::SweepKind kind = ev::sweep_kind_from_string(cfg.sweep_kind);
  std::vector<ev::SweepPoint> points =
      ev::sweep(kind, cfg.sweep_values, atk::variant_from_string(cfg.method), encoder,
                graph, split, ac);
  std::string results = out_dir + "/results.jsonl";
  std::string chash = cfg.hash();
  std::string csv_path = out_dir + "/sweep_" + cfg.sweep_kind + ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw DataError("cannot write '" + csv_path + "'");
  csv << "value,ca,asr\n";
  for (const ev::SweepPoint& pt : points) {
    std::ostringstream tag;
    tag << "sweep_" << cfg.sweep_kind << "=" << pt.value;
    ev::ResultRow row;
    row.scenario = tag.str();
    row.dataset = cfg.dataset;
    row.gpl = cfg.gpl;
    row.backbone = cfg.backbone;
    row.method = cfg.method;
    row.asr = pt.metrics.asr;
    row.ca = pt.metrics.ca;
    row.seed = seed;
    row.config_hash = chash;
    ev::append_result(results, row);
    csv << pt.value << "," << pt.metrics.ca << "," << pt.metrics.asr << "\n";
  }
  std::cout << "sweep: " << csv_path << "\n";
  return 0;
}

std::vector<json> load_results(const std::string& path) {
  std::string file = path;
  if (fs::is_directory(path)) file = path + "/results.jsonl";
  std::ifstream f(file);
  if (!f) throw DataError("cannot read results file '" + file + "'");
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError("results file '" + file + "' line " + std::to_string(lineno) +
                      ": " + e.what());
    }
  }
  return rows;
}

ReportTables render_report(const std::vector<json>& rows) {
  // scenario -> (dataset, method) -> gpl -> accumulated (ca, asr, n)
  struct Cell {
    double ca = 0.0, asr = 0.0;
    int n = 0;
  };
  std::map<std::string, std::map<std::pair<std::string, std::string>,
                                 std::map<std::string, Cell>>>
      tables;
  std::map<std::string, std::set<std::string>> columns;
  for (const json& r : rows) {
    if (r.value("aggregate", false)) continue;
    std::string scenario = r.value("scenario", "direct");
    std::string dataset = r.value("dataset", "?");
    std::string method = r.value("method", "?");
    std::string gpl = r.value("gpl", "?");
    Cell& c = tables[scenario][{dataset, method}][gpl];
    c.ca += r.value("ca", 0.0);
    c.asr += r.value("asr", 0.0);
    c.n += 1;
    columns[scenario].insert(gpl);
  }

  auto cell_text = [](const Cell& c) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f|%.1f", 100.0 * c.ca / c.n, 100.0 * c.asr / c.n);
    return std::string(buf);
  };

  std::ostringstream text;
  std::ostringstream csv;
  csv << "scenario,dataset,method,gpl,ca,asr\n";
  bool first_table = true;
  for (const auto& [scenario, table] : tables) {
    const auto& cols = columns[scenario];
    // column widths
    std::size_t w0 = std::string("dataset").size();
    std::size_t w1 = std::string("method").size();
    for (const auto& [key, cells] : table) {
      w0 = std::max(w0, key.first.size());
      w1 = std::max(w1, key.second.size());
    }
    std::map<std::string, std::size_t> wc;
    for (const std::string& c : cols) wc[c] = c.size();
    for (const auto& [key, cells] : table)
      for (const std::string& c : cols) {
        auto it = cells.find(c);
        std::size_t len = it == cells.end() ? 1 : cell_text(it->second).size();
        wc[c] = std::max(wc[c], len);
      }
    auto pad = [](const std::string& s, std::size_t w) {
      return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
    };
    if (!first_table) text << "\n";
    first_table = false;
    text << "== " << scenario << " — CA (%) | ASR (%) ==\n";
    text << pad("dataset", w0) << "  " << pad("method", w1);
    for (const std::string& c : cols) text << "  " << pad(c, wc[c]);
    text << "\n";
    for (const auto& [key, cells] : table) {
      text << pad(key.first, w0) << "  " << pad(key.second, w1);
      for (const std::string& c : cols) {
        auto it = cells.find(c);
        std::string body = it == cells.end() ? "—" : cell_text(it->second);
        // em dash is three bytes but one display column
        std::size_t disp = it == cells.end() ? 1 : body.size();
        text << "  " << body << std::string(wc[c] > disp ? wc[c] - disp : 0, ' ');
      }
      text << "\n";
      for (const std::string& c : cols) {
        auto it = cells.find(c);
        if (it == cells.end()) {
          csv << scenario << "," << key.first << "," << key.second << "," << c
              << ",—,—\n";
        } else {
          char buf[64];
          std::snprintf(buf, sizeof(buf), "%.1f,%.1f", 100.0 * it->second.ca / it->second.n,
                        100.0 * it->second.asr / it->second.n);
          csv << scenario << "," << key.first << "," << key.second << "," << c << ","
              << buf << "\n";
        }
      }
    }
  }
  return ReportTables{text.str(), csv.str()};
}

int cmd_report(const std::string& results_path, const std::string& out_dir) {
  cov::touch("cmd_report");
  std::vector<json> rows = load_results(results_path);
  ReportTables tables = render_report(rows);
  ensure_dir(out_dir);
  {
    std::ofstream f(out_dir + "/report.txt");
    if (!f) throw DataError("cannot write '" + out_dir + "/report.txt'");
    f << tables.text;
  }
  {
    std::ofstream f(out_dir + "/report.csv");
    if (!f) throw DataError("cannot write '" + out_dir + "/report.csv'");
    f << tables.csv;
  }
  std::cout << tables.text;
  return 0;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"trojan prompt laboratory for graph prompt learning"};
  app.require_subcommand(1);

  std::string config_path, out_override, seeds_csv, results_path;
  int jobs = 1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (json)")->required();
    sub->add_option("--out", out_override, "output directory override");
    sub->add_option("--seeds", seeds_csv, "comma-separated seed list override");
    sub->add_option("--jobs", jobs,
                    "max parallel jobs (runs execute sequentially on one core)");
  };

  CLI::App* sub_pretrain = app.add_subcommand("pretrain", "pretrain and freeze an encoder");
  add_common(sub_pretrain);
  CLI::App* sub_attack = app.add_subcommand("attack", "run a trojan prompt attack per seed");
  add_common(sub_attack);
  CLI::App* sub_eval = app.add_subcommand("eval", "evaluate scenarios over stored runs");
  add_common(sub_eval);
  CLI::App* sub_sweep = app.add_subcommand("sweep", "attack + evaluate across a knob");
  add_common(sub_sweep);
  CLI::App* sub_report = app.add_subcommand("report", "render CA|ASR tables from results");
  sub_report->add_option("--results", results_path, "results file or directory")->required();
  sub_report->add_option("--out", out_override, "output directory for report files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (sub_report->parsed()) {
      std::string out = out_override.empty() ? "." : out_override;
      return cmd_report(results_path, out);
    }
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (!seeds_csv.empty()) cfg.seeds = parse_seed_list(seeds_csv);
    if (jobs < 1) throw ConfigError("--jobs must be >= 1");
    if (sub_pretrain->parsed()) return cmd_pretrain(cfg, cfg.out_dir);
    if (sub_attack->parsed()) return cmd_attack(cfg, cfg.out_dir);
    if (sub_eval->parsed()) return cmd_eval(cfg, cfg.out_dir);
    return cmd_sweep(cfg, cfg.out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace gplab::cli
