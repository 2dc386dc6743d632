// gflow: command-line front end for the synthetic benchmark, the trajectory
// store, drift-network training, test-time adaptation and the full pipeline.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "gflow/adapt.hpp"
#include "gflow/drift_net.hpp"
#include "gflow/episodes.hpp"
#include "gflow/error.hpp"
#include "gflow/flows.hpp"
#include "gflow/harness/config.hpp"
#include "gflow/harness/evaluate.hpp"
#include "gflow/harness/pipeline.hpp"
#include "gflow/rng.hpp"
#include "gflow/target_model.hpp"
#include "gflow/trajectories.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace gflow;
using namespace gflow::harness;

namespace {

harness::PipelineConfig config_or_default(const std::string& path) {
  return path.empty() ? PipelineConfig{} : load_pipeline_config(path);
}

json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json result_json(const AdaptResult& r, int index, const Episode& ep, double accuracy) {
  json diag = json::array();
  for (const auto& d : r.diagnostics) diag.push_back({{"t", d.t}, {"loss", std::isfinite(d.loss) ? json(d.loss) : json()}});
  return {{"episode", index},
          {"domain", ep.domain},
          {"way", ep.way},
          {"accuracy", accuracy},
          {"theta", to_json(r.theta)},
          {"diagnostics", diag},
          {"wall_ms", r.wall_ms},
          {"peak_bytes", r.peak_bytes},
          {"forward_count", r.forward_count},
          {"encode_count", r.encode_count},
          {"backward_count", r.backward_count},
          {"graph_nodes", r.graph_nodes},
          {"diverged", r.diverged},
          {"chosen_lr", r.chosen_lr}};
}

void print_csv_table(const std::string& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) return;
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  std::cout << header << "\n";
  std::string line;
  while (std::getline(in, line)) std::cout << line << "\n";
}

std::string tensor_stats(const Matrix& m) {
  std::ostringstream os;
  os << "min " << m.minCoeff() << " max " << m.maxCoeff() << " mean " << m.mean();
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gflow: gradient-free test-time adaptation with learned parameter flows"};
  app.require_subcommand(1);

  // ---- episodes
  auto* episodes = app.add_subcommand("episodes", "Synthetic few-shot episodes");
  episodes->require_subcommand(1);
  std::string cfg_path, out_path, in_path, protocol_s = "various", split_s = "test";
  int count = 10, query = 10;
  std::uint64_t seed = 0;
  auto* ep_gen = episodes->add_subcommand("gen", "Sample episodes to a JSON Lines file");
  ep_gen->add_option("--config", cfg_path, "pipeline config (domains section)");
  ep_gen->add_option("--protocol", protocol_s, "various or <way>w<shot>s");
  ep_gen->add_option("--split", split_s, "train, val or test");
  ep_gen->add_option("--count", count, "episodes per domain");
  ep_gen->add_option("--query", query, "query examples per class");
  ep_gen->add_option("--seed", seed);
  ep_gen->add_option("--out", out_path)->required();
  auto* ep_inspect = episodes->add_subcommand("inspect", "Summarize an episode file");
  ep_inspect->add_option("file", in_path)->required();

  // ---- model
  auto* model = app.add_subcommand("model", "Backbone meta-training and direct transfer");
  model->require_subcommand(1);
  std::string backbone_path, episodes_path;
  auto* meta = model->add_subcommand("meta-train", "Meta-train a backbone on the base domains");
  meta->add_option("--config", cfg_path);
  meta->add_option("--out", out_path)->required();
  auto* direct = model->add_subcommand("eval-direct", "Query accuracy with the stored biases");
  direct->add_option("--backbone", backbone_path)->required();
  direct->add_option("--episodes", episodes_path)->required();

  // ---- traj
  auto* traj = app.add_subcommand("traj", "Fine-tuning trajectory store");
  traj->require_subcommand(1);
  std::string out_dir;
  int index = 0;
  auto* collect = traj->add_subcommand("collect", "Simulate train and validation stores");
  collect->add_option("--config", cfg_path);
  collect->add_option("--backbone", backbone_path)->required();
  collect->add_option("--out-dir", out_dir)->required();
  auto* tstats = traj->add_subcommand("stats", "Store header and normalization statistics");
  tstats->add_option("file", in_path)->required();
  auto* tinspect = traj->add_subcommand("inspect", "Print one trajectory");
  tinspect->add_option("file", in_path)->required();
  tinspect->add_option("--index", index);

  // ---- flows
  auto* flows = app.add_subcommand("flows", "Flow interpolation diagnostics");
  flows->require_subcommand(1);
  auto* fcheck = flows->add_subcommand("check", "Knot interpolation and tangent continuity over a store");
  fcheck->add_option("file", in_path)->required();

  // ---- drift
  auto* drift = app.add_subcommand("drift", "Drift network training");
  drift->require_subcommand(1);
  std::string train_path, val_path, objective_s = "cubic", net_path;
  auto* dtrain = drift->add_subcommand("train", "Flow-matching training");
  dtrain->add_option("--config", cfg_path);
  dtrain->add_option("--backbone", backbone_path)->required();
  dtrain->add_option("--train", train_path)->required();
  dtrain->add_option("--val", val_path)->required();
  dtrain->add_option("--objective", objective_s, "linear, cubic or hypernet");
  dtrain->add_option("--out", out_path)->required();
  auto* dmse = drift->add_subcommand("eval-mse", "Flow-matching loss on a store");
  dmse->add_option("--net", net_path)->required();
  dmse->add_option("--store", in_path)->required();
  dmse->add_option("--samples", count, "samples drawn from the store")->default_val(1024);
  dmse->add_option("--seed", seed);

  // ---- adapt
  auto* adapt = app.add_subcommand("adapt", "Adapt episodes and emit AdaptResult JSON Lines");
  std::string engine;
  int steps = 10;
  double eta = 0;
  std::vector<double> lr_grid{1e-2, 3e-2, 1e-1, 3e-1};
  adapt->add_option("engine", engine, "euler, hypernet or finetune")
      ->required()
      ->check(CLI::IsMember({"euler", "hypernet", "finetune"}));
  adapt->add_option("--backbone", backbone_path)->required();
  adapt->add_option("--net", net_path, "drift checkpoint (euler, hypernet)");
  adapt->add_option("--episodes", episodes_path)->required();
  adapt->add_option("--steps", steps);
  adapt->add_option("--eta", eta, "Euler step; 0 uses the natural step");
  adapt->add_option("--lr-grid", lr_grid, "fine-tuning learning rates")->delimiter(',');
  std::vector<int> layers{0, 1};
  adapt->add_option("--layers", layers, "adapted bias layers (finetune)")->delimiter(',');
  adapt->add_option("--out", out_path, "output file (default stdout)");

  // ---- harness
  auto* eval = app.add_subcommand("eval", "Evaluate every variant (runs cached stages as needed)");
  auto* profile = app.add_subcommand("profile", "Cost profile of every variant");
  auto* ablate = app.add_subcommand("ablate", "Domain and init ablations of the cubic drift net");
  auto* pipeline = app.add_subcommand("pipeline", "Run the full pipeline");
  for (auto* sc : {eval, profile, ablate, pipeline}) sc->add_option("--config", cfg_path);
  auto* print_cfg = app.add_subcommand("config", "Print the canonical config and its fingerprint");
  print_cfg->add_option("--config", cfg_path);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ep_gen) {
      const PipelineConfig cfg = config_or_default(cfg_path);
      const auto doms = make_domains(cfg);
      const auto eps = sample_episodes(doms, protocol_from_string(protocol_s, query), split_from_string(split_s), count, seed);
      save_episodes(eps, out_path);
      std::cout << "wrote " << eps.size() << " episodes to " << out_path << "\n";
    } else if (*ep_inspect) {
      const auto eps = load_episodes(in_path);
      std::map<int, int> per_domain;
      double way = 0, support = 0;
      for (const auto& e : eps) {
        ++per_domain[e.domain];
        way += e.way;
        support += static_cast<double>(e.support.size());
      }
      std::cout << eps.size() << " episodes, dim " << (eps.empty() ? 0 : eps[0].dim()) << "\n";
      if (!eps.empty())
        std::cout << "mean way " << way / eps.size() << ", mean support " << support / eps.size() << "\n";
      for (const auto& [d, n] : per_domain) std::cout << "  domain " << d << ": " << n << "\n";
    } else if (*meta) {
      const PipelineConfig cfg = config_or_default(cfg_path);
      std::vector<DomainSpec> base;
      for (const auto& d : make_domains(cfg))
        if (d.severity == Severity::kBase) base.push_back(d);
      MetaTrainReport rep;
      const Backbone bb = meta_train_backbone(base, cfg.meta, &rep);
      save_backbone(bb, out_path);
      for (std::size_t i = 0; i < rep.epoch_loss.size(); ++i)
        std::cout << "epoch " << i + 1 << " loss " << rep.epoch_loss[i] << " acc " << rep.epoch_accuracy[i] << "\n";
    } else if (*direct) {
      const Backbone bb = load_backbone(backbone_path);
      const BiasLayout layout = all_bias_layout(bb);
      const Vector theta = gather_bias(bb, layout);
      std::vector<double> acc;
      for (const auto& e : load_episodes(episodes_path)) acc.push_back(query_accuracy(bb, layout, theta, e));
      const MeanCI m = mean_ci(acc);
      std::cout << "direct accuracy " << m.mean << " +- " << m.ci95 << " (n=" << m.n << ")\n";
    } else if (*collect) {
      const PipelineConfig cfg = config_or_default(cfg_path);
      std::vector<DomainSpec> base;
      for (const auto& d : make_domains(cfg))
        if (d.severity == Severity::kBase) base.push_back(d);
      const Backbone bb = load_backbone(backbone_path);
      CollectedData data = collect_dataset(bb, select_bias_params(bb, cfg.bias_layers), base, cfg.collect);
      fs::create_directories(out_dir);
      save_store(data.train, (fs::path(out_dir) / "train.traj").string());
      save_store(data.val, (fs::path(out_dir) / "val.traj").string());
      std::cout << "train " << data.train.size() << " trajectories, val " << data.val.size() << "\n";
    } else if (*tstats) {
      const TrajectoryStore s = load_store(in_path);
      std::cout << "split " << to_string(s.split) << ", " << s.size() << " trajectories over " << s.episodes.size()
                << " episodes\n"
                << "dim " << s.dim << ", steps " << s.steps << ", optimizer " << to_string(s.sim.optimizer) << " lr "
                << s.sim.lr << ", layout hash " << hex64(s.layout_hash) << "\n";
      if (!s.stats.empty()) {
        std::cout << "mean: " << tensor_stats(s.stats.mean) << "\n"
                  << "std: " << tensor_stats(s.stats.std) << "\n"
                  << "drift scale: " << tensor_stats(s.stats.drift_scale) << "\n";
      }
      int decreasing = 0;
      for (const auto& t : s.trajectories) decreasing += t.losses(t.steps()) < t.losses(0);
      std::cout << "final loss below initial: " << decreasing << " / " << s.size() << "\n";
    } else if (*tinspect) {
      const TrajectoryStore s = load_store(in_path);
      if (index < 0 || index >= static_cast<int>(s.size()))
        throw std::out_of_range("index " + std::to_string(index) + " outside [0, " + std::to_string(s.size()) + ")");
      const Trajectory& t = s.trajectories[index];
      const Episode& e = s.episode_of(t);
      std::cout << "episode " << t.episode << " (domain " << e.domain << ", way " << e.way << ", offset "
                << t.episode_offset << "), init " << t.init_index << " seed " << t.init_seed << "\n";
      for (int k = 0; k <= t.steps(); ++k)
        std::cout << "k=" << k << " loss " << t.losses(k) << " |theta| " << t.points.row(k).norm() << "\n";
    } else if (*fcheck) {
      const TrajectoryStore s = load_store(in_path);
      double knot_err = 0, c1_err = 0, lin_err = 0;
      for (const auto& t : s.trajectories) {
        const int T = t.steps();
        for (int k = 0; k <= T; ++k) {
          knot_err = std::max(knot_err, (cubic_sample(t, k).theta - t.point(k)).cwiseAbs().maxCoeff());
          const double s = static_cast<double>(k) / T;
          const Vector line = (1 - s) * t.point(0) + s * t.point(T);
          lin_err = std::max(lin_err, (linear_sample(t, k).theta - line).cwiseAbs().maxCoeff());
        }
        for (int k = 1; k < T; ++k) {
          const auto left = catmull_rom_coeffs(t.points, k);
          const auto right = catmull_rom_coeffs(t.points, k + 1);
          c1_err = std::max(c1_err, (left.velocity(1.0) - right.velocity(0.0)).cwiseAbs().maxCoeff());
        }
      }
      std::cout << "trajectories " << s.size() << "\n"
                << "max knot interpolation error " << knot_err << "\n"
                << "max interior tangent jump " << c1_err << "\n"
                << "max linear path error " << lin_err << "\n";
    } else if (*dtrain) {
      const PipelineConfig cfg = config_or_default(cfg_path);
      const Backbone bb = load_backbone(backbone_path);
      const BiasSelection sel = select_bias_params(bb, cfg.bias_layers);
      const TrajectoryStore train = load_store(train_path, sel.layout.hash());
      const TrajectoryStore val = load_store(val_path, sel.layout.hash());
      DriftArch arch = cfg.arch;
      arch.theta_dim = sel.layout.size();
      arch.proto_dim = bb.embed_dim();
      const FlowObjective obj = objective_from_string(objective_s);
      DriftTrainReport rep;
      DriftNet net = train_drift(DriftNet(arch, bb, sel.layout, train.steps, obj, train.stats, cfg.drift.seed), train,
                                 val, cfg.drift, &rep);
      save_drift(net, out_path);
      std::cout << "initial val " << rep.initial_val_loss << "\n";
      for (std::size_t i = 0; i < rep.eval_step.size(); ++i)
        std::cout << "step " << rep.eval_step[i] << " train " << rep.train_loss[i] << " val " << rep.val_loss[i] << "\n";
      std::cout << "best val " << rep.best_val_loss << " at step " << rep.best_step
                << (rep.early_stopped ? " (early stop)" : "") << "\n";
    } else if (*dmse) {
      const DriftNet net = load_drift(net_path);
      const TrajectoryStore s = load_store(in_path, net.layout_hash());
      const FlowBatch batch = validation_batch(net, s, store_prototypes(net, s), count, seed);
      std::cout << to_string(net.objective()) << " flow-matching loss " << flow_matching_loss(net, batch) << "\n";
    } else if (*adapt) {
      const Backbone bb = load_backbone(backbone_path);
      const auto eps = load_episodes(episodes_path);
      DriftNet net;
      BiasLayout layout;
      if (engine == "finetune") {
        layout = make_bias_layout(bb, layers);
      } else {
        if (net_path.empty()) throw ConfigError("--net is required for " + engine);
        net = load_drift(net_path);
        layout = net.layout();
      }
      const Vector theta0 = gather_bias(bb, layout);
      std::ofstream file;
      if (!out_path.empty()) file.open(out_path);
      std::ostream& out = out_path.empty() ? std::cout : file;
      for (std::size_t i = 0; i < eps.size(); ++i) {
        const Episode& e = eps[i];
        AdaptResult r;
        if (engine == "euler") {
          SolveConfig sc;
          sc.steps = steps;
          sc.eta = eta > 0 ? eta : natural_step(net.objective(), net.steps(), steps);
          r = euler_adapt(net, bb, e.support, e.way, theta0, sc);
        } else if (engine == "hypernet") {
          r = hypernet_adapt(net, bb, e.support, e.way, theta0);
        } else {
          r = finetune_adapt(bb, layout, e.support, e.way, theta0, steps, lr_grid);
        }
        out << result_json(r, static_cast<int>(i), e, query_accuracy(bb, layout, r.theta, e)).dump() << "\n";
      }
    } else if (*print_cfg) {
      const PipelineConfig cfg = config_or_default(cfg_path);
      std::cout << canonical_text(cfg) << "# fingerprint " << fingerprint(cfg) << "\n";
    } else {
      PipelineConfig cfg = config_or_default(cfg_path);
      std::string report;
      if (*eval) {
        cfg.ablation = cfg.frontier = false;
        report = "eval.csv";
      } else if (*profile) {
        cfg.ablation = cfg.frontier = false;
        report = "cost.csv";
      } else if (*ablate) {
        cfg.ablation = true;
        cfg.frontier = false;
        report = "ablation.csv";
      } else {
        report = "summary.txt";
      }
      const PipelineResult res = run_pipeline(cfg, &std::cerr);
      const fs::path p = fs::path(res.out_dir) / report;
      if (p.extension() == ".csv") {
        print_csv_table(p.string());
      } else {
        std::ifstream in(p);
        std::cout << in.rdbuf();
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
