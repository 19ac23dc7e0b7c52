// mint: data generation, training, calibration, evaluation, drop-off
// simulation, the session service and transcript replay.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mint/baselines.hpp"
#include "mint/calibrate.hpp"
#include "mint/classifier.hpp"
#include "mint/dropoff.hpp"
#include "mint/engine.hpp"
#include "mint/evalharness.hpp"
#include "mint/parallel.hpp"
#include "mint/service.hpp"
#include "mint/synthdata.hpp"

// After the Eigen-based headers: resolv.h, pulled in by httplib, defines _res.
#include <httplib.h>

#ifndef MINT_VERSION
#define MINT_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace mint;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitInfeasible = 3;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::optional<uint64_t> seed;
  std::string config;
  std::string out;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--seed", c.seed, "Root seed");
  cmd->add_option("--config", c.config, "JSON config file");
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
  cmd->add_option("--threads", c.threads, "Worker threads (MINT_THREADS wins when set)");
}

void apply_threads(const Common& c) {
  if (std::getenv("MINT_THREADS") == nullptr && c.threads > 0) set_thread_count(c.threads);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

json load_config(const Common& c) { return c.config.empty() ? json::object() : read_json(c.config); }

// Collects the files a command writes and records them in manifest.json.
class Artifacts {
 public:
  Artifacts(std::string command, const Common& common, std::vector<std::string> argv)
      : command_(std::move(command)), dir_(common.out), argv_(std::move(argv)),
        start_(std::chrono::steady_clock::now()) {
    fs::create_directories(dir_);
  }

  fs::path path(const std::string& name) const { return dir_ / name; }

  void write(const std::string& name, const std::string& content) {
    {
      std::ofstream out(dir_ / name, std::ios::binary);
      out << content;
      if (!out) throw std::runtime_error("cannot write " + (dir_ / name).string());
    }  // closed, so the recorded hash sees the whole file
    record(name);
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }
  // For files written by library helpers.
  void record(const std::string& name) { outputs_[name] = fnv1a_hex(read_text(dir_ / name)); }

  void input(const std::string& role, const std::string& path) { inputs_[role] = path; }
  void set_config(json config) { config_ = std::move(config); }
  void set_seed(uint64_t seed) { seed_ = seed; }

  void finish() {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json m = {{"command", command_},
              {"argv", argv_},
              {"version", MINT_VERSION},
              {"seed", seed_},
              {"config", config_},
              {"config_hash", fnv1a_hex(config_.dump())},
              {"inputs", inputs_},
              {"outputs", outputs_},
              {"wall_time_seconds", wall}};
    std::ofstream out(dir_ / "manifest.json");
    out << m.dump(2) << "\n";
  }

 private:
  std::string command_;
  fs::path dir_;
  std::vector<std::string> argv_;
  std::chrono::steady_clock::time_point start_;
  json config_ = json::object();
  uint64_t seed_ = 0;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

struct Data {
  MetadataSchema schema;
  std::vector<Case> train, val, test;
};

Data load_data(const fs::path& dir, bool with_train = false) {
  Data d;
  try {
    d.schema = MetadataSchema::from_json(read_json(dir / "schema.json"));
  } catch (const SchemaError& e) {
    throw ConfigError(e.what());
  }
  auto split = [&](const char* name) {
    const auto p = dir / (std::string(name) + ".jsonl");
    if (!fs::exists(p)) throw ConfigError("missing " + p.string());
    return read_cases_jsonl(p.string(), d.schema);
  };
  if (with_train) d.train = split("train");
  d.val = split("val");
  d.test = split("test");
  return d;
}

struct Models {
  std::unique_ptr<MlpClassifier> model;
  ImageValueModel ivm;
  bool has_ivm = false;
};

Models load_models(const fs::path& dir, const MetadataSchema& schema, bool need_ivm) {
  Models m;
  const auto mp = dir / "model.json";
  if (!fs::exists(mp)) throw ConfigError("missing " + mp.string());
  m.model = std::make_unique<MlpClassifier>(load_model(mp.string(), schema), schema);
  const auto ip = dir / "image_value.json";
  if (fs::exists(ip)) {
    m.ivm = ImageValueModel::from_json(read_json(ip));
    m.has_ivm = true;
  } else if (need_ivm) {
    throw ConfigError("missing " + ip.string() + " (run train with --fit-image-value)");
  }
  return m;
}

std::span<const Case> pick_split(const Data& d, const std::string& split) {
  if (split == "val") return d.val;
  if (split == "test") return d.test;
  throw ConfigError("split must be val or test, not " + split);
}

// ---- gen-data

int cmd_gen_data(const Common& c, const std::vector<std::string>& argv) {
  GeneratorConfig g;
  try {
    g = GeneratorConfig::from_json(load_config(c));
    if (c.seed) g.seed = *c.seed;
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  Artifacts a("gen-data", c, argv);
  a.set_config(g.to_json());
  a.set_seed(g.seed);
  const auto data = generate(g);
  write_schema(a.path("schema.json").string(), data.schema);
  a.record("schema.json");
  for (auto [name, cases] : {std::pair{"train.jsonl", &data.train}, std::pair{"val.jsonl", &data.val},
                             std::pair{"test.jsonl", &data.test}}) {
    write_cases_jsonl(a.path(name).string(), *cases);
    a.record(name);
  }
  a.write_json("generator.json", g.to_json());
  a.finish();
  std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
            << " cases to " << c.out << "\n";
  return 0;
}

// ---- train

int cmd_train(const Common& c, const std::vector<std::string>& argv, const std::string& data_dir,
              bool fit_ivm) {
  ModelConfig mc;
  try {
    mc = ModelConfig::from_json(load_config(c));
    if (c.seed) mc.seed = *c.seed;
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  const auto d = load_data(data_dir, true);
  Artifacts a("train", c, argv);
  a.input("data", data_dir);
  a.set_config(mc.to_json());
  a.set_seed(mc.seed);
  const auto r = train(d.train, d.schema, mc, d.val);
  save_model(a.path("model.json").string(), r.model);
  a.record("model.json");
  std::ostringstream hist;
  hist.precision(17);
  hist << "step,train_loss,val_top3\n";
  for (const auto& h : r.history) hist << h.step << ',' << h.train_loss << ',' << h.val_top3 << '\n';
  a.write("history.csv", hist.str());
  MlpClassifier model(r.model, d.schema);
  if (fit_ivm) {
    // The value model is fit on validation data the classifier never trained on.
    const auto ivm = train_image_value_model(d.val, model, d.schema, mc.seed);
    a.write_json("image_value.json", ivm.to_json());
  }
  std::vector<PredictiveDistribution> preds;
  std::vector<int> labels;
  for (const auto& cs : d.val) {
    preds.push_back(predict_full(cs, model, d.schema));
    labels.push_back(cs.label);
  }
  const double top3 = topk_accuracy(preds, labels, 3);
  a.write_json("train_summary.json", {{"selected_step", r.selected_step},
                                      {"val_top3_full", top3},
                                      {"max_meta_grad_norm", r.max_meta_grad_norm}});
  a.finish();
  std::cout << "trained; validation top-3 with all inputs " << top3 << "\n";
  return 0;
}

// ---- calibrate

struct CalibrateArgs {
  std::string task = "task1";
  std::optional<double> epsilon;
  std::optional<double> budget;
  std::string data, model, split = "val", grid = "data:12", loss = "aggregate";
  std::string engine = "mint:js:t_meta=0:t_image=0:instr=0:start=first";
};

ThresholdGrid make_grid(const std::string& spec, std::span<const Case> cases, const Models& m,
                        const MetadataSchema& schema, const EngineConfig& base) {
  if (spec == "default") return default_grid();
  if (spec.rfind("data:", 0) == 0) {
    int n = 0;
    try {
      n = std::stoi(spec.substr(5));
    } catch (const std::exception&) {
      throw ConfigError("bad grid spec " + spec);
    }
    if (n < 2) throw ConfigError("data grid needs at least 2 points per axis");
    EngineConfig ex = base;
    ex.t_meta = ex.t_image = -std::numeric_limits<double>::infinity();
    ex.max_steps.reset();
    return data_driven_grid(run_episodes(cases, *m.model, schema, m.ivm, ex), n);
  }
  if (fs::exists(spec)) return ThresholdGrid::from_json(read_json(spec));
  throw ConfigError("grid must be default, data:N or a grid JSON file");
}

int cmd_calibrate(const Common& c, const std::vector<std::string>& argv, const CalibrateArgs& ca) {
  json cfg = load_config(c);
  const std::string engine = cfg.value("engine", ca.engine);
  EngineConfig base;
  try {
    base = EngineConfig::parse(engine);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.seed) base.seed = *c.seed;
  const std::string loss = cfg.value("loss", ca.loss);
  if (loss != "aggregate" && loss != "ce") throw ConfigError("loss must be aggregate or ce");
  const LossMode mode = loss == "ce" ? LossMode::PerCaseCrossEntropy : LossMode::AggregateTop3;
  const std::string grid_spec = cfg.value("grid", ca.grid);
  if (ca.task != "task1" && ca.task != "task2") throw ConfigError("task must be task1 or task2");
  if (ca.task == "task1" && !ca.epsilon) throw ConfigError("task1 needs --epsilon");
  if (ca.task == "task2" && !ca.epsilon && !ca.budget) throw ConfigError("task2 needs --epsilon or --budget");

  const auto d = load_data(ca.data);
  const auto m = load_models(ca.model, d.schema, true);
  const auto cases = pick_split(d, ca.split);
  Artifacts a("calibrate", c, argv);
  a.input("data", ca.data);
  a.input("model", ca.model);
  a.set_seed(base.seed);
  const auto grid = make_grid(grid_spec, cases, m, d.schema, base);
  const auto sweep = sweep_thresholds(cases, *m.model, d.schema, m.ivm, base, grid, mode);

  double epsilon = ca.epsilon.value_or(0.0);
  if (ca.task == "task2" && ca.budget) {
    // A budget of B acquired inputs per case is a required reduction of
    // (mean available - B); start images count as acquired.
    double avail = 0.0;
    for (const auto& cs : cases) avail += static_cast<double>(cs.images.size()) + d.schema.size();
    epsilon = avail / static_cast<double>(cases.size()) - *ca.budget;
  }
  a.set_config({{"task", ca.task}, {"epsilon", epsilon}, {"engine", base.token()}, {"loss", loss},
                {"grid", grid_spec}, {"split", ca.split}});
  try {
    const auto op = ca.task == "task1" ? calibrate_task1(sweep, epsilon) : calibrate_task2(sweep, epsilon);
    a.write_json("cal.json", calibration_report(sweep, op));
    a.finish();
    std::cout << "chosen " << calibration_report(sweep, op).at("engine_token").get<std::string>() << "\n";
    return 0;
  } catch (const InfeasibleError& e) {
    a.write_json("cal.json", {{"infeasible", true}, {"message", e.what()}, {"best", e.best()},
                              {"task", ca.task}, {"epsilon", epsilon}});
    a.finish();
    std::cerr << "infeasible: " << e.what() << "\n";
    return kExitInfeasible;
  }
}

// ---- eval

std::pair<double, double> parse_thresholds(const std::string& spec) {
  if (spec.rfind("from:", 0) == 0) {
    const json cal = read_json(spec.substr(5));
    if (cal.value("infeasible", false)) throw ConfigError(spec.substr(5) + " records an infeasible calibration");
    const auto& ch = cal.at("chosen");
    return {real_from_json(ch.at("t_meta")), real_from_json(ch.at("t_image"))};
  }
  const auto comma = spec.find(',');
  if (comma == std::string::npos) throw ConfigError("thresholds must be from:<cal.json> or t_meta,t_image");
  try {
    return {real_from_json(json(spec.substr(0, comma))), real_from_json(json(spec.substr(comma + 1)))};
  } catch (const std::exception&) {
    return {std::stod(spec.substr(0, comma)), std::stod(spec.substr(comma + 1))};
  }
}

std::string policy_dir_name(size_t i, const std::string& token) {
  std::string name = std::to_string(i) + "_" + token.substr(0, token.find(':'));
  return name;
}

struct EvalArgs {
  std::vector<std::string> policies;
  std::string thresholds;
  std::string data, model, split = "test";
  bool analysis = false;
  int n_perm = 10000;
  int k = 3;
};

int cmd_eval(const Common& c, const std::vector<std::string>& argv, const EvalArgs& ea) {
  std::vector<Policy> policies;
  for (const auto& tok : ea.policies) {
    try {
      policies.push_back(parse_policy(tok));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (policies.empty()) throw ConfigError("eval needs at least one --policy");
  std::optional<std::pair<double, double>> thresholds;
  if (!ea.thresholds.empty()) thresholds = parse_thresholds(ea.thresholds);

  const auto d = load_data(ea.data);
  const auto m = load_models(ea.model, d.schema, true);
  const auto cases = pick_split(d, ea.split);
  const uint64_t seed = c.seed.value_or(1);
  const auto full = full_input_results(cases, *m.model, d.schema);

  Artifacts a("eval", c, argv);
  a.input("data", ea.data);
  a.input("model", ea.model);
  if (!ea.thresholds.empty()) a.input("thresholds", ea.thresholds);
  a.set_seed(seed);
  json resolved = json::array();

  for (size_t i = 0; i < policies.size(); ++i) {
    Policy& p = policies[i];
    if (auto* mp = std::get_if<MintPolicy>(&p); mp && thresholds) {
      mp->config.t_meta = thresholds->first;
      mp->config.t_image = thresholds->second;
    }
    if (auto* gp = std::get_if<GlobalStaticPolicy>(&p); gp && gp->order.empty()) {
      gp->order = fit_global_order(d.val, *m.model, d.schema);
    }
    const std::string token = policy_token(p);
    resolved.push_back(token);
    const auto ts = run_policy(p, cases, *m.model, d.schema, m.ivm);
    const std::string prefix = policies.size() == 1 ? "" : policy_dir_name(i, token) + "/";
    if (!prefix.empty()) fs::create_directories(a.path(prefix));

    const auto curve = interaction_curve(ts, ea.k);
    a.write(prefix + "curve.csv", curve_csv(curve));
    a.write(prefix + "hist.csv", histogram_csv(input_histogram(ts, HistogramKind::Total)));
    a.write(prefix + "hist_images.csv", histogram_csv(input_histogram(ts, HistogramKind::Images)));
    a.write(prefix + "hist_meta.csv", histogram_csv(input_histogram(ts, HistogramKind::Metadata)));
    write_transcripts_jsonl(a.path(prefix + "transcripts.jsonl").string(), ts);
    a.record(prefix + "transcripts.jsonl");

    std::vector<EpisodeSummary> sums;
    std::vector<double> counts;
    for (const auto& t : ts) {
      sums.push_back(summarize(t));
      counts.push_back(t.n_inputs());
    }
    const auto agg = operating_stats(sums, full, LossMode::AggregateTop3);
    const auto ce = operating_stats(sums, full, LossMode::PerCaseCrossEntropy);
    json stats = {{"policy", token},
                  {"split", ea.split},
                  {"n_cases", ts.size()},
                  {"k", ea.k},
                  {"auc", curve.auc},
                  {"stats", stats_to_json(agg)},
                  {"o2_per_case_ce", ce.o2},
                  {"input_variance", variance(counts)}};
    double full_top3 = 0.0;
    for (const auto& f : full) full_top3 += f.prediction.in_top_k(f.label, 3);
    stats["top3_full"] = full_top3 / static_cast<double>(full.size());
    if (ea.analysis) stats["analysis"] = behaviour_analysis(ts, cases, d.schema, ea.n_perm, seed);
    a.write_json(prefix + "stats.json", stats);
    std::cout << token << ": top3 " << agg.top3 << ", mean inputs " << agg.mean_inputs << ", auc "
              << curve.auc << "\n";
  }
  a.set_config({{"policies", resolved}, {"split", ea.split}, {"k", ea.k}, {"analysis", ea.analysis},
                {"n_perm", ea.n_perm}});
  a.finish();
  return 0;
}

// ---- dropoff

struct DropoffArgs {
  std::string transcripts, baseline, schema;
  int n_sims = 1000;
  bool traces = false;
};

int cmd_dropoff(const Common& c, const std::vector<std::string>& argv, const DropoffArgs& da) {
  MetadataSchema schema;
  try {
    schema = MetadataSchema::from_json(read_json(da.schema));
  } catch (const SchemaError& e) {
    throw ConfigError(e.what());
  }
  FlowModel flow;
  try {
    flow = c.config.empty() ? FlowModel::defaults(schema) : FlowModel::from_json(read_json(c.config));
    flow.validate(schema);
  } catch (const SchemaError& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  if (da.n_sims < 1) throw ConfigError("--n-sims must be at least 1");
  const uint64_t seed = c.seed.value_or(1);
  const auto a_ts = read_transcripts_jsonl(da.transcripts, schema);
  Artifacts a("dropoff", c, argv);
  a.input("transcripts", da.transcripts);
  a.input("schema", da.schema);
  a.set_config({{"flow", flow.to_json()}, {"n_sims", da.n_sims}});
  a.set_seed(seed);
  if (da.baseline.empty()) {
    const auto r = simulate_dropoff(a_ts, flow, schema, da.n_sims, seed);
    json j = r.to_json(da.traces);
    j["expected_drop_rate"] = expected_drop_rate(a_ts, flow, schema);
    a.write_json("dropoff.json", j);
    std::cout << "drop rate " << r.drop_rate.mean << " [" << r.drop_rate.lo << ", " << r.drop_rate.hi << "]\n";
  } else {
    a.input("baseline", da.baseline);
    const auto b_ts = read_transcripts_jsonl(da.baseline, schema);
    DropoffComparison cmp;
    try {
      cmp = compare_dropoff(a_ts, b_ts, flow, schema, da.n_sims, seed);
    } catch (const PreconditionError& e) {
      throw ConfigError(e.what());
    }
    json j = cmp.to_json();
    if (da.traces) {
      j["a"] = cmp.a.to_json(true);
      j["b"] = cmp.b.to_json(true);
    }
    a.write_json("dropoff.json", j);
    std::cout << "drop rate " << cmp.a.drop_rate.mean << " vs " << cmp.b.drop_rate.mean
              << "; correct shown delta " << cmp.correct_delta.mean << " [" << cmp.correct_delta.lo
              << ", " << cmp.correct_delta.hi << "]\n";
  }
  a.finish();
  return 0;
}

// ---- serve

struct ServeArgs {
  std::string data, model, split = "test", host = "127.0.0.1", static_dir, engine;
  int port = 8080;
  int ttl_minutes = 30;
};

int cmd_serve(const Common& c, const ServeArgs& sa) {
  const auto d = load_data(sa.data);
  const auto m = load_models(sa.model, d.schema, true);
  const auto cases = pick_split(d, sa.split);
  ServiceOptions opts;
  opts.ttl = std::chrono::minutes(sa.ttl_minutes);
  if (!sa.engine.empty()) {
    try {
      EngineConfig::parse(sa.engine);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    opts.default_engine = sa.engine;
  }
  (void)c;
  SessionManager manager(*m.model, d.schema, m.ivm, {cases.begin(), cases.end()}, opts);
  httplib::Server server;
  install_routes(server, manager, sa.static_dir);
  std::cout << "serving " << cases.size() << " cases on http://" << sa.host << ":" << sa.port << "\n"
            << std::flush;
  if (!server.listen(sa.host, sa.port)) {
    std::cerr << "cannot listen on " << sa.host << ":" << sa.port << "\n";
    return 1;
  }
  return 0;
}

// ---- replay

std::string render_action(const Action& a, const MetadataSchema& schema) {
  if (const auto* m = std::get_if<AcquireMetadata>(&a)) return "ask " + schema.field(m->field_id).name;
  if (const auto* im = std::get_if<AcquireImage>(&a)) {
    return im->view ? "request " + std::string(to_string(*im->view)) + " image" : "request any image";
  }
  return "stop (" + std::string(to_string(std::get<Stop>(a).reason)) + ")";
}

std::string render_topk(const PredictiveDistribution& p, int k) {
  std::ostringstream os;
  os.precision(3);
  bool first = true;
  for (int c : p.top_k(std::min<int>(k, static_cast<int>(p.size())))) {
    os << (first ? "" : ", ") << "class " << c << " " << p[static_cast<size_t>(c)];
    first = false;
  }
  return os.str();
}

std::string render_transcript(const EpisodeTranscript& t, const MetadataSchema& schema) {
  std::ostringstream os;
  os << "case " << t.case_id;
  if (t.label >= 0) os << " (label " << t.label << ")";
  os << " policy " << t.policy << "\n";
  for (const auto& s : t.steps) {
    os << "  " << s.index << ". ";
    if (s.initial) {
      os << "initial image #" << s.image_index.value_or(-1);
      if (s.image_view) os << " (" << to_string(*s.image_view) << ")";
    } else {
      os << render_action(s.action, schema);
      if (s.answer) os << " -> " << answer_to_json(*s.answer).dump();
      if (s.image_index) {
        os << " -> image #" << *s.image_index;
        if (s.image_view) os << " (" << to_string(*s.image_view) << ")";
        if (s.substituted) os << " [substituted]";
      }
    }
    if (!s.prediction.empty()) os << " | top-3: " << render_topk(s.prediction, 3);
    os << "\n";
  }
  os << "  stopped: " << to_string(t.stop_reason) << "; " << t.n_images() << " images, " << t.n_meta()
     << " answers\n";
  if (t.label >= 0) {
    os << "  label in final top-3: " << (t.final_prediction.in_top_k(t.label, 3) ? "yes" : "no") << "\n";
  }
  return os.str();
}

int cmd_replay(const Common& c, const std::vector<std::string>& argv, const std::string& transcripts,
               const std::string& schema_path, std::optional<int64_t> case_id) {
  MetadataSchema schema;
  try {
    schema = MetadataSchema::from_json(read_json(schema_path));
  } catch (const SchemaError& e) {
    throw ConfigError(e.what());
  }
  const auto ts = read_transcripts_jsonl(transcripts, schema);
  std::string text;
  for (const auto& t : ts) {
    if (!case_id || t.case_id == *case_id) text += render_transcript(t, schema);
  }
  if (case_id && text.empty()) throw ConfigError("no transcript for case " + std::to_string(*case_id));
  std::cout << text;
  if (!c.out.empty()) {
    Artifacts a("replay", c, argv);
    a.input("transcripts", transcripts);
    a.write("replay.txt", text);
    a.finish();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  CLI::App app{"Interactive input acquisition for multi-modal classifiers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", MINT_VERSION);

  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  add_common(gen, common);

  std::string data_dir, model_dir;
  bool fit_ivm = false;
  auto* tr = app.add_subcommand("train", "Train the classifier");
  add_common(tr, common);
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_flag("--fit-image-value", fit_ivm, "Also fit the image value model");

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate", "Choose thresholds on validation data");
  add_common(cal, common);
  cal->add_option("task", ca.task, "task1 (max reduction) or task2 (min loss)")->required();
  cal->add_option("--epsilon", ca.epsilon, "Allowed loss (task1) or required input reduction (task2)");
  cal->add_option("--budget", ca.budget, "Task 2 target of mean acquired inputs per case");
  cal->add_option("--data", ca.data)->required();
  cal->add_option("--model", ca.model)->required();
  cal->add_option("--split", ca.split, "val or test")->capture_default_str();
  cal->add_option("--grid", ca.grid, "default, data:N or a grid JSON file")->capture_default_str();
  cal->add_option("--loss", ca.loss, "aggregate or ce")->capture_default_str();
  cal->add_option("--engine", ca.engine, "Base engine token")->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Run policies and write curves, histograms and stats");
  add_common(ev, common);
  ev->add_option("--policy", ea.policies, "Policy token (repeatable)")->required();
  ev->add_option("--thresholds", ea.thresholds, "from:<cal.json> or t_meta,t_image");
  ev->add_option("--data", ea.data)->required();
  ev->add_option("--model", ea.model)->required();
  ev->add_option("--split", ea.split)->capture_default_str();
  ev->add_option("--k", ea.k)->capture_default_str();
  ev->add_flag("--analysis", ea.analysis, "Add rank, ANOVA and chi-square analyses");
  ev->add_option("--n-perm", ea.n_perm)->capture_default_str();

  DropoffArgs da;
  auto* dr = app.add_subcommand("dropoff", "Simulate user drop-off (--config is the flow model)");
  add_common(dr, common);
  dr->add_option("--transcripts", da.transcripts)->required();
  dr->add_option("--baseline", da.baseline, "Transcripts to compare against with common random numbers");
  dr->add_option("--schema", da.schema)->required();
  dr->add_option("--n-sims", da.n_sims)->capture_default_str();
  dr->add_flag("--traces", da.traces, "Include per-simulation rates");

  ServeArgs sa;
  auto* sv = app.add_subcommand("serve", "Run the session service");
  add_common(sv, common, false);
  sv->add_option("--data", sa.data)->required();
  sv->add_option("--model", sa.model)->required();
  sv->add_option("--split", sa.split)->capture_default_str();
  sv->add_option("--host", sa.host)->capture_default_str();
  sv->add_option("--port", sa.port)->capture_default_str();
  sv->add_option("--static", sa.static_dir, "Directory served under /");
  sv->add_option("--engine", sa.engine, "Default engine token for new sessions");
  sv->add_option("--ttl-minutes", sa.ttl_minutes)->capture_default_str();

  std::string replay_file, replay_schema;
  std::optional<int64_t> replay_case;
  auto* rp = app.add_subcommand("replay", "Render transcripts as text");
  add_common(rp, common, false);
  rp->add_option("--transcripts", replay_file)->required();
  rp->add_option("--schema", replay_schema)->required();
  rp->add_option("--case-id", replay_case);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  apply_threads(common);
  try {
    if (*gen) return cmd_gen_data(common, args);
    if (*tr) return cmd_train(common, args, data_dir, fit_ivm);
    if (*cal) return cmd_calibrate(common, args, ca);
    if (*ev) return cmd_eval(common, args, ea);
    if (*dr) return cmd_dropoff(common, args, da);
    if (*sv) return cmd_serve(common, sa);
    if (*rp) return cmd_replay(common, args, replay_file, replay_schema, replay_case);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DatasetError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitConfig;
}
