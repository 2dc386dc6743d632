#include "gflow/harness/pipeline.hpp"

#include <chrono>
#include <climits>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "gflow/error.hpp"

namespace gflow::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

std::string exact(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) : cols_(header.size()) { line(header); }
  Csv& row(const std::vector<std::string>& cells) {
    if (cells.size() != cols_) throw std::logic_error("csv row width mismatch");
    line(cells);
    return *this;
  }
  const std::string& str() const { return text_; }

 private:
  void line(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += "\n";
  }
  std::size_t cols_;
  std::string text_;
};

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

json cell_value(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (!s.empty() && end == s.c_str() + s.size() && std::isfinite(v)) {
    const long long iv = static_cast<long long>(v);
    if (static_cast<double>(iv) == v && s.find_first_of(".eE") == std::string::npos) return iv;
    return v;
  }
  return s;
}

std::string csv_to_jsonl(const std::string& csv, const std::string& report, const std::string& fp) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  const auto header = split(line, ',');
  std::string out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    json rec = json::object();
    rec["report"] = report;
    rec["fingerprint"] = fp;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) rec[header[i]] = cell_value(cells[i]);
    out += rec.dump() + "\n";
  }
  return out;
}

std::string key_of(std::initializer_list<std::string> parts) {
  std::uint64_t h = fnv1a("gflow-stage");
  for (const auto& p : parts) h = fnv1a(p + '\x1f', h);
  return hex64(h);
}

class Runner {
 public:
  Runner(const PipelineConfig& cfg, std::ostream* log) : cache_(cfg.cache_dir), log_(log) {
    fs::create_directories(cache_);
  }

  /// Runs `build(dir)` unless the stage's completion marker exists; returns
  /// the stage directory.
  template <class Build>
  fs::path stage(const std::string& name, const std::string& key, Build build) {
    const fs::path dir = cache_ / (name + "-" + key);
    const fs::path marker = cache_ / (name + "-" + key + ".done");
    StageLog entry{name, key, fs::exists(marker), 0};
    const auto t0 = Clock::now();
    if (!entry.cache_hit) {
      if (log_) *log_ << "[" << name << "] running (key " << key << ")" << std::endl;
      try {
        fs::remove_all(dir);
        fs::create_directories(dir);
        build(dir);
        write_text(marker, key + "\n");
      } catch (const std::exception& e) {
        throw std::runtime_error("stage '" + name + "' failed: " + e.what());
      }
    } else if (log_) {
      *log_ << "[" << name << "] cache hit (key " << key << ")" << std::endl;
    }
    entry.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    logs_.push_back(entry);
    return dir;
  }

  /// Loads a stage artifact, attributing failures to the stage.
  template <class Load>
  auto load(const std::string& name, Load load) -> decltype(load()) {
    try {
      return load();
    } catch (const std::exception& e) {
      throw std::runtime_error("stage '" + name + "' failed: " + e.what());
    }
  }

  std::vector<StageLog> logs_;

 private:
  fs::path cache_;
  std::ostream* log_;
};

std::string eval_csv(const EvalReport& rep) {
  Csv csv({"variant", "group", "domain", "protocol", "n", "mean_acc", "ci95"});
  for (const auto& r : rep.rows)
    csv.row({r.variant, r.group, r.domain < 0 ? "all" : std::to_string(r.domain), r.protocol, std::to_string(r.acc.n),
             num(r.acc.mean), num(r.acc.ci95)});
  return csv.str();
}

std::string tuning_csv(const TuningTables& t, const AdaptSettings& s) {
  Csv csv({"group", "variant", "value", "mean_accuracy", "chosen"});
  for (const auto& [group, per] : t.eta)
    for (const auto& [v, res] : per)
      for (const auto& row : res.table)
        csv.row({group, to_string(v), exact(row.value), num(row.mean_accuracy),
                 row.value == s.tuning.at(group).eta.at(v) ? "true" : "false"});
  for (const auto& [group, res] : t.lr)
    for (const auto& row : res.table)
      csv.row({group, to_string(Variant::kBiasTune), exact(row.value), num(row.mean_accuracy),
               row.value == s.tuning.at(group).lr ? "true" : "false"});
  return csv.str();
}

json settings_json(const AdaptSettings& s) {
  json j;
  j["solver_steps"] = s.solver_steps;
  j["finetune_steps"] = s.finetune_steps;
  for (const auto& [group, g] : s.tuning) {
    json e = json::object();
    for (const auto& [v, eta] : g.eta) e[to_string(v)] = eta;
    j["groups"][group] = {{"eta", e}, {"lr", g.lr}};
  }
  return j;
}

AdaptSettings settings_from_json(const json& j) {
  AdaptSettings s;
  s.solver_steps = j.at("solver_steps").get<int>();
  s.finetune_steps = j.at("finetune_steps").get<int>();
  for (const auto& [group, g] : j.at("groups").items()) {
    GroupTuning t;
    t.lr = g.at("lr").get<double>();
    for (const auto& [v, eta] : g.at("eta").items()) t.eta[variant_from_string(v)] = eta.get<double>();
    s.tuning[group] = t;
  }
  return s;
}

std::vector<Protocol> protocols_of(const PipelineConfig& cfg) {
  std::vector<Protocol> out;
  for (const auto& p : cfg.protocols) out.push_back(protocol_from_string(p, cfg.query));
  return out;
}

std::vector<EvalEpisode> filter_group(const std::vector<EvalEpisode>& set, const std::string& group) {
  std::vector<EvalEpisode> out;
  for (const auto& e : set)
    if (e.group == group) out.push_back(e);
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  Csv csv({"axis", "level", "group", "n", "mean_acc", "ci95", "eta"});
  for (const auto& r : rows)
    csv.row({r.axis, std::to_string(r.level), r.group, std::to_string(r.acc.n), num(r.acc.mean), num(r.acc.ci95),
             exact(r.eta)});
  return csv.str();
}

std::string cost_csv(const std::vector<CostRow>& rows) {
  Csv csv({"variant", "steps", "adapt_ms", "infer_ms", "forward", "backward", "encode", "graph_nodes", "peak_bytes"});
  for (const auto& r : rows)
    csv.row({r.variant, std::to_string(r.steps), num(r.adapt_ms), num(r.infer_ms), num(r.forward), num(r.backward),
             num(r.encode), num(r.graph_nodes), num(r.peak_bytes)});
  return csv.str();
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

std::string summary_text(const std::string& fp, const fs::path& out) {
  std::ostringstream os;
  os << "config fingerprint " << fp << "\n\n";
  auto pct = [](const std::string& s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%6.2f", 100.0 * std::stod(s));
    return std::string(buf);
  };
  if (fs::exists(out / "eval.csv")) {
    os << "Query accuracy (%), mean +- 95% CI over episodes\n";
    os << pad("variant", 14) << pad("base", 18) << pad("ood", 18) << "all\n";
    std::map<std::string, std::map<std::string, std::string>> cells;
    std::vector<std::string> order;
    for (const auto& r : read_csv((out / "eval.csv").string())) {
      if (r.at("domain") != "all" || r.at("protocol") != "all") continue;
      if (!cells.count(r.at("variant"))) order.push_back(r.at("variant"));
      cells[r.at("variant")][r.at("group")] = pct(r.at("mean_acc")) + " +- " + pct(r.at("ci95"));
    }
    for (const auto& v : order)
      os << pad(v, 14) << pad(cells[v]["base"], 18) << pad(cells[v]["ood"], 18) << cells[v]["all"] << "\n";
    os << "\n";
  }
  if (fs::exists(out / "loss_summary.csv")) {
    os << "Relative support loss L_N / L_0\n" << pad("variant", 14) << pad("group", 8) << pad("n", 7)
       << pad("final < 1", 12) << "mean final\n";
    for (const auto& r : read_csv((out / "loss_summary.csv").string()))
      os << pad(r.at("variant"), 14) << pad(r.at("group"), 8) << pad(r.at("n"), 7)
         << pad(pct(r.at("frac_below_one")) + "%", 12) << r.at("mean_final") << "\n";
    os << "\n";
  }
  if (fs::exists(out / "tuning.csv")) {
    os << "Tuned hyper-parameters (validation episodes)\n";
    for (const auto& r : read_csv((out / "tuning.csv").string()))
      if (r.at("chosen") == "true")
        os << "  " << pad(r.at("group"), 6) << pad(r.at("variant"), 14) << r.at("value") << "\n";
    os << "\n";
  }
  if (fs::exists(out / "ablation.csv")) {
    os << "Ablation (hyperflow-C)\n" << pad("axis", 9) << pad("level", 7) << pad("group", 7) << "accuracy (%)\n";
    for (const auto& r : read_csv((out / "ablation.csv").string()))
      os << pad(r.at("axis"), 9) << pad(r.at("level"), 7) << pad(r.at("group"), 7) << pct(r.at("mean_acc")) << " +- "
         << pct(r.at("ci95")) << "\n";
    os << "\n";
  }
  os << "Timing reports: cost.csv, frontier.csv\n";
  return os.str();
}

}  // namespace

std::vector<std::map<std::string, std::string>> read_csv(const std::string& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty csv '" + path + "'");
  const auto header = split(line, ',');
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != header.size()) throw FormatError("csv '" + path + "': ragged row");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<AblationRow> ablation_sweep(const std::string& axis, const std::vector<int>& levels, const Artifacts& art,
                                        const TrajectoryStore& train, const TrajectoryStore& val_store,
                                        const PipelineConfig& cfg, const std::vector<EvalEpisode>& val,
                                        const std::vector<EvalEpisode>& test, const DriftNet* full_net,
                                        std::ostream* log) {
  for (std::size_t i = 1; i < levels.size(); ++i)
    if (levels[i] <= levels[i - 1]) throw ConfigError("ablation levels must ascend");
  int n_domains = 0;
  std::map<int, int> eps_per_domain;
  for (const auto& e : train.episodes) ++eps_per_domain[e.domain];
  n_domains = static_cast<int>(eps_per_domain.size());
  int max_inits = 0;
  for (const auto& t : train.trajectories) max_inits = std::max(max_inits, static_cast<int>(t.init_index) + 1);
  int min_eps = INT_MAX;
  for (const auto& [d, n] : eps_per_domain) min_eps = std::min(min_eps, n);

  std::vector<AblationRow> rows;
  for (int level : levels) {
    bool full = false;
    TrajectoryStore sub;
    if (axis == "domains") {
      if (level < 1 || level > n_domains) throw ConfigError("ablation: domain level " + std::to_string(level) + " exceeds available data");
      std::vector<int> keep;
      for (const auto& [d, n] : eps_per_domain)
        if (static_cast<int>(keep.size()) < level) keep.push_back(d);
      sub = subset_store(train, [&](const Episode& e) { return std::find(keep.begin(), keep.end(), e.domain) != keep.end(); },
                         INT_MAX, INT_MAX);
      full = level == n_domains;
    } else if (axis == "tasks") {
      if (level < 1 || level > min_eps) throw ConfigError("ablation: task level " + std::to_string(level) + " exceeds available data");
      sub = subset_store(train, [](const Episode&) { return true; }, level, INT_MAX);
      full = level == min_eps && eps_per_domain.begin()->second == min_eps;
    } else if (axis == "inits") {
      if (level < 1 || level > max_inits) throw ConfigError("ablation: init level " + std::to_string(level) + " exceeds available data");
      sub = subset_store(train, [](const Episode&) { return true; }, INT_MAX, level);
      full = level == max_inits;
    } else {
      throw ConfigError("unknown ablation axis '" + axis + "'");
    }
    Artifacts a;
    a.backbone = art.backbone;
    a.selection = art.selection;
    if (full && full_net != nullptr) {
      a.nets[Variant::kCubic] = *full_net;
    } else {
      if (log) *log << "  ablation " << axis << "=" << level << ": training on " << sub.size() << " trajectories" << std::endl;
      DriftArch arch = cfg.arch;
      arch.theta_dim = art.selection.layout.size();
      arch.proto_dim = art.backbone.embed_dim();
      TrajectoryStore v = val_store;
      v.stats = sub.stats;
      DriftNet net(arch, art.backbone, art.selection.layout, sub.steps, FlowObjective::kCubic, sub.stats, cfg.drift.seed);
      a.nets[Variant::kCubic] = train_drift(std::move(net), sub, v, cfg.drift);
    }
    AdaptSettings s = tune(a, val, cfg.solver_steps, cfg.finetune_steps, cfg.eta_multipliers, cfg.lr_grid,
                           {Variant::kCubic});
    s.record_loss = false;
    const auto res = evaluate(Variant::kCubic, test, a, s, cfg.threads);
    for (const std::string g : {"base", "ood"}) {
      std::vector<double> acc;
      for (const auto& r : res)
        if (r.group == g) acc.push_back(r.accuracy);
      if (acc.empty()) continue;
      rows.push_back({axis, level, g, mean_ci(acc), s.tuning.count(g) ? s.tuning.at(g).eta.at(Variant::kCubic) : 0.0});
    }
  }
  return rows;
}

std::vector<FrontierRow> steps_frontier(const std::vector<Variant>& variants, const std::vector<int>& levels,
                                        const Artifacts& art, const PipelineConfig& cfg,
                                        const std::vector<EvalEpisode>& val, const std::vector<EvalEpisode>& test) {
  std::vector<FrontierRow> rows;
  for (int steps : levels) {
    AdaptSettings s = tune(art, val, steps, steps, cfg.eta_multipliers, cfg.lr_grid, variants);
    s.record_loss = false;
    for (Variant v : variants) {
      const auto res = evaluate(v, test, art, s, 1);
      std::vector<double> acc;
      double ms = 0;
      for (const auto& r : res) {
        acc.push_back(r.accuracy);
        ms += r.adapt_ms;
      }
      const int n_steps = v == Variant::kHypernet ? 1 : v == Variant::kDirect ? 0 : steps;
      rows.push_back({to_string(v), n_steps, mean_ci(acc), res.empty() ? 0.0 : ms / static_cast<double>(res.size())});
    }
  }
  return rows;
}

std::string frontier_csv(const std::vector<FrontierRow>& rows) {
  Csv csv({"variant", "steps", "mean_acc", "ci95", "adapt_ms"});
  for (const auto& r : rows)
    csv.row({r.variant, std::to_string(r.steps), num(r.acc.mean), num(r.acc.ci95), num(r.adapt_ms)});
  return csv.str();
}

PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream* log) {
  cfg.validate();
  Runner run(cfg, log);
  PipelineResult result;
  result.fingerprint = fingerprint(cfg);
  result.out_dir = cfg.out_dir;
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);

  const auto domains = make_domains(cfg);
  std::vector<DomainSpec> base;
  for (const auto& d : domains)
    if (d.severity == Severity::kBase) base.push_back(d);

  // backbone
  const std::string k_backbone = key_of({canonical_text(cfg, "domains"), canonical_text(cfg, "backbone")});
  const fs::path d_backbone = run.stage("backbone", k_backbone, [&](const fs::path& dir) {
    MetaTrainReport rep;
    const Backbone bb = meta_train_backbone(base, cfg.meta, &rep);
    save_backbone(bb, (dir / "backbone.ckpt").string());
    Csv csv({"epoch", "loss", "accuracy"});
    for (std::size_t i = 0; i < rep.epoch_loss.size(); ++i)
      csv.row({std::to_string(i + 1), num(rep.epoch_loss[i]), num(rep.epoch_accuracy[i])});
    write_text(dir / "meta_train.csv", csv.str());
  });
  Artifacts art;
  art.backbone = run.load("backbone", [&] { return load_backbone((d_backbone / "backbone.ckpt").string()); });
  art.selection = select_bias_params(art.backbone, cfg.bias_layers);
  const std::uint64_t layout_hash = art.selection.layout.hash();

  // trajectories
  const std::string k_traj = key_of({k_backbone, canonical_text(cfg, "trajectories")});
  const fs::path d_traj = run.stage("trajectories", k_traj, [&](const fs::path& dir) {
    CollectedData data = collect_dataset(art.backbone, art.selection, base, cfg.collect);
    save_store(data.train, (dir / "train.traj").string());
    save_store(data.val, (dir / "val.traj").string());
  });
  const TrajectoryStore train =
      run.load("trajectories", [&] { return load_store((d_traj / "train.traj").string(), layout_hash); });
  const TrajectoryStore val_store =
      run.load("trajectories", [&] { return load_store((d_traj / "val.traj").string(), layout_hash); });

  // drift nets
  std::string drift_training;
  std::map<Variant, std::string> k_drift;
  for (Variant v : {Variant::kLinear, Variant::kCubic, Variant::kHypernet}) {
    const FlowObjective obj = objective_of(v);
    const std::string name = "drift-" + to_string(obj);
    k_drift[v] = key_of({k_traj, canonical_text(cfg, "drift"), to_string(obj)});
    const fs::path dir = run.stage(name, k_drift[v], [&](const fs::path& d) {
      DriftArch arch = cfg.arch;
      arch.theta_dim = art.selection.layout.size();
      arch.proto_dim = art.backbone.embed_dim();
      DriftNet net(arch, art.backbone, art.selection.layout, train.steps, obj, train.stats, cfg.drift.seed);
      DriftTrainReport rep;
      net = train_drift(std::move(net), train, val_store, cfg.drift, &rep);
      save_drift(net, (d / "drift.ckpt").string());
      Csv csv({"objective", "step", "train_loss", "val_loss"});
      csv.row({to_string(obj), "0", "", num(rep.initial_val_loss)});
      for (std::size_t i = 0; i < rep.eval_step.size(); ++i)
        csv.row({to_string(obj), std::to_string(rep.eval_step[i]), num(rep.train_loss[i]), num(rep.val_loss[i])});
      write_text(d / "training.csv", csv.str());
    });
    art.nets[v] = run.load(name, [&] { return load_drift_for_solve((dir / "drift.ckpt").string(), layout_hash); });
    const std::string t = read_text(dir / "training.csv");
    drift_training += drift_training.empty() ? t : t.substr(t.find('\n') + 1);
  }

  const auto protocols = protocols_of(cfg);
  const auto val = make_eval_set(domains, protocols, Split::kVal, cfg.val_per_domain, cfg.val_seed);
  const auto test = make_eval_set(domains, protocols, Split::kTest, cfg.test_per_domain, cfg.eval_seed);
  const std::string eval_cfg = canonical_text(cfg, "solver") + canonical_text(cfg, "finetune") + canonical_text(cfg, "eval");

  // tuning
  const std::string k_tune =
      key_of({k_drift[Variant::kLinear], k_drift[Variant::kCubic], k_drift[Variant::kHypernet], eval_cfg});
  const fs::path d_tune = run.stage("tune", k_tune, [&](const fs::path& dir) {
    TuningTables tables;
    const AdaptSettings s = tune(art, val, cfg.solver_steps, cfg.finetune_steps, cfg.eta_multipliers, cfg.lr_grid,
                                 {Variant::kLinear, Variant::kCubic, Variant::kBiasTune}, &tables);
    write_text(dir / "settings.json", settings_json(s).dump(2) + "\n");
    write_text(dir / "tuning.csv", tuning_csv(tables, s));
  });
  AdaptSettings settings =
      run.load("tune", [&] { return settings_from_json(json::parse(read_text(d_tune / "settings.json"))); });

  // evaluation and loss curves
  const std::string k_eval = key_of({k_tune, "evaluate"});
  const fs::path d_eval = run.stage("evaluate", k_eval, [&](const fs::path& dir) {
    std::map<Variant, std::vector<EpisodeResult>> results;
    for (Variant v : all_variants()) {
      if (log) *log << "  evaluating " << to_string(v) << " on " << test.size() << " episodes" << std::endl;
      results[v] = evaluate(v, test, art, settings, cfg.threads);
    }
    write_text(dir / "eval.csv", eval_csv(summarize(results, "")));
    Csv episodes({"variant", "group", "domain", "protocol", "index", "accuracy", "final_rel_loss", "diverged"});
    Csv curves({"variant", "group", "index", "step", "rel_loss"});
    for (const auto& [v, rs] : results)
      for (std::size_t i = 0; i < rs.size(); ++i) {
        const auto c = relative_curve(rs[i]);
        episodes.row({to_string(v), rs[i].group, std::to_string(rs[i].domain), rs[i].protocol, std::to_string(i),
                      num(rs[i].accuracy), c.empty() ? "" : num(c.back()), rs[i].diverged ? "true" : "false"});
        if (v == Variant::kDirect) continue;
        for (std::size_t k = 0; k < c.size(); ++k)
          curves.row({to_string(v), rs[i].group, std::to_string(i), std::to_string(k), num(c[k])});
      }
    write_text(dir / "eval_episodes.csv", episodes.str());
    write_text(dir / "loss_curves.csv", curves.str());
    Csv summary({"variant", "group", "n", "frac_below_one", "mean_final"});
    for (const auto& s : loss_summary(results))
      summary.row({s.variant, s.group, std::to_string(s.n), num(s.frac_below_one), num(s.mean_final)});
    write_text(dir / "loss_summary.csv", summary.str());
  });

  // cost profile: every iterative variant at the same step count
  const std::string k_profile = key_of({k_tune, canonical_text(cfg, "profile")});
  const fs::path d_profile = run.stage("profile", k_profile, [&](const fs::path& dir) {
    std::vector<EvalEpisode> eps;
    for (const auto& e : filter_group(test, "ood"))
      if (static_cast<int>(eps.size()) < cfg.profile_episodes) eps.push_back(e);
    AdaptSettings s = settings;
    s.solver_steps = cfg.profile_steps;
    s.finetune_steps = cfg.profile_steps;
    s.record_loss = false;
    // same horizon as the tuned solver, split into more steps
    for (auto& [group, tun] : s.tuning)
      for (auto& [v, eta] : tun.eta) eta *= static_cast<double>(cfg.solver_steps) / cfg.profile_steps;
    write_text(dir / "cost.csv", cost_csv(profile_cost(all_variants(), eps, art, s, cfg.profile_repeats)));
  });

  std::vector<fs::path> report_dirs{d_backbone, d_tune, d_eval, d_profile};

  if (cfg.ablation) {
    const std::string k_abl =
        key_of({k_traj, k_drift[Variant::kCubic], canonical_text(cfg, "drift"), eval_cfg, canonical_text(cfg, "ablation")});
    report_dirs.push_back(run.stage("ablation", k_abl, [&](const fs::path& dir) {
      const auto abl_test = make_eval_set(domains, protocols, Split::kTest, cfg.ablation_test_per_domain, cfg.eval_seed);
      auto rows = ablation_sweep("domains", cfg.ablation_domains, art, train, val_store, cfg, val, abl_test,
                                 &art.net(Variant::kCubic), log);
      const auto inits = ablation_sweep("inits", cfg.ablation_inits, art, train, val_store, cfg, val, abl_test,
                                        &art.net(Variant::kCubic), log);
      rows.insert(rows.end(), inits.begin(), inits.end());
      write_text(dir / "ablation.csv", ablation_csv(rows));
    }));
  }

  if (cfg.frontier) {
    const std::string k_front = key_of({k_tune, canonical_text(cfg, "frontier")});
    report_dirs.push_back(run.stage("frontier", k_front, [&](const fs::path& dir) {
      const auto fr_test =
          filter_group(make_eval_set(domains, protocols, Split::kTest, cfg.frontier_test_per_domain, cfg.eval_seed), "ood");
      const auto rows = steps_frontier({Variant::kLinear, Variant::kCubic, Variant::kBiasTune}, cfg.frontier_steps, art,
                                       cfg, filter_group(val, "ood"), fr_test);
      write_text(dir / "frontier.csv", frontier_csv(rows));
    }));
  }

  // publish reports
  write_text(out / "drift_training.csv", drift_training);
  write_text(out / "drift_training.jsonl", csv_to_jsonl(drift_training, "drift_training", result.fingerprint));
  for (const auto& dir : report_dirs)
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.path().extension() != ".csv") continue;
      const std::string text = read_text(entry.path());
      const std::string stem = entry.path().stem().string();
      write_text(out / entry.path().filename(), text);
      write_text(out / (stem + ".jsonl"), csv_to_jsonl(text, stem, result.fingerprint));
    }
  write_text(out / "config.toml", experiment_text(cfg));
  write_text(out / "summary.txt", summary_text(result.fingerprint, out));

  result.stages = run.logs_;
  json logj;
  logj["fingerprint"] = result.fingerprint;
  for (const auto& s : result.stages)
    logj["stages"].push_back({{"name", s.name}, {"key", s.key}, {"cache_hit", s.cache_hit}, {"seconds", s.seconds}});
  write_text(out / "run_log.json", logj.dump(2) + "\n");
  return result;
}

}  // namespace gflow::harness
