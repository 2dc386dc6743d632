#include "gflow/harness/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "gflow/error.hpp"
#include "gflow/harness/config.hpp"
#include "gflow/rng.hpp"

namespace gflow::harness {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t) { return std::chrono::duration<double, std::milli>(Clock::now() - t).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kDirect: return "direct";
    case Variant::kLinear: return "hyperflow-L";
    case Variant::kCubic: return "hyperflow-C";
    case Variant::kHypernet: return "hypernet";
    case Variant::kBiasTune: return "bias-tune";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::kDirect, Variant::kLinear, Variant::kCubic, Variant::kHypernet,
                                      Variant::kBiasTune};
  return v;
}

FlowObjective objective_of(Variant v) {
  switch (v) {
    case Variant::kLinear: return FlowObjective::kLinear;
    case Variant::kCubic: return FlowObjective::kCubic;
    case Variant::kHypernet: return FlowObjective::kHypernet;
    default: throw ConfigError("variant " + to_string(v) + " has no drift network");
  }
}

bool uses_drift_net(Variant v) { return v == Variant::kLinear || v == Variant::kCubic || v == Variant::kHypernet; }

MeanCI mean_ci(std::span<const double> xs) {
  MeanCI r;
  r.n = static_cast<int>(xs.size());
  if (xs.empty()) return r;
  double s = 0;
  for (double x : xs) s += x;
  r.mean = s / r.n;
  if (r.n > 1) {
    double v = 0;
    for (double x : xs) v += (x - r.mean) * (x - r.mean);
    r.ci95 = 1.96 * std::sqrt(v / (r.n - 1) / r.n);
  }
  return r;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  int workers = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = std::min(workers, n);
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

std::string group_of(const DomainSpec& d) { return d.severity == Severity::kOod ? "ood" : "base"; }

std::vector<EvalEpisode> make_eval_set(const std::vector<DomainSpec>& domains, const std::vector<Protocol>& protocols,
                                       Split split, int per_domain, std::uint64_t seed) {
  std::vector<EvalEpisode> out;
  for (std::size_t j = 0; j < protocols.size(); ++j) {
    const std::uint64_t stream = derive_seed(seed, {static_cast<std::uint64_t>(j)});
    for (const auto& dom : domains)
      for (int i = 0; i < per_domain; ++i)
        out.push_back({sample_episode(dom, protocols[j], split, episode_seed(stream, dom.id, split, static_cast<std::uint64_t>(i))),
                       group_of(dom), protocol_name(protocols[j])});
  }
  return out;
}

std::vector<Episode> episodes_of(const std::vector<EvalEpisode>& set) {
  std::vector<Episode> out;
  out.reserve(set.size());
  for (const auto& e : set) out.push_back(e.episode);
  return out;
}

const DriftNet& Artifacts::net(Variant v) const {
  auto it = nets.find(v);
  if (it == nets.end()) throw ConfigError("missing drift network for variant " + to_string(v));
  return it->second;
}

EpisodeResult run_episode(Variant variant, const EvalEpisode& ep, const Artifacts& art, const AdaptSettings& s) {
  const Episode& e = ep.episode;
  EpisodeResult r;
  r.domain = e.domain;
  r.group = ep.group;
  r.protocol = ep.protocol;
  const BiasLayout& layout = art.selection.layout;
  const Vector& theta0 = art.selection.theta_init;
  Vector theta = theta0;
  const auto start = Clock::now();
  switch (variant) {
    case Variant::kDirect:
      if (s.record_loss) r.losses = {support_loss(art.backbone, layout, theta0, e.support, e.way)};
      break;
    case Variant::kLinear:
    case Variant::kCubic: {
      auto tuning = s.tuning.find(ep.group);
      if (tuning == s.tuning.end() || !tuning->second.eta.count(variant))
        throw ConfigError("no tuned step size for " + to_string(variant) + " on group " + ep.group);
      const SolveConfig cfg{s.solver_steps, tuning->second.eta.at(variant), s.record_loss};
      AdaptResult a = euler_adapt(art.net(variant), art.backbone, e.support, e.way, theta0, cfg);
      theta = a.theta;
      r.diverged = a.diverged;
      for (const auto& d : a.diagnostics) r.losses.push_back(d.loss);
      break;
    }
    case Variant::kHypernet: {
      AdaptResult a = hypernet_adapt(art.net(variant), art.backbone, e.support, e.way, theta0, s.record_loss);
      theta = a.theta;
      r.diverged = a.diverged;
      for (const auto& d : a.diagnostics) r.losses.push_back(d.loss);
      break;
    }
    case Variant::kBiasTune: {
      auto tuning = s.tuning.find(ep.group);
      if (tuning == s.tuning.end()) throw ConfigError("no tuned learning rate for group " + ep.group);
      try {
        AdaptResult a = finetune_adapt(art.backbone, layout, e.support, e.way, theta0, s.finetune_steps,
                                       {tuning->second.lr}, s.record_loss);
        theta = a.theta;
        for (const auto& d : a.diagnostics) r.losses.push_back(d.loss);
      } catch (const NumericError&) {
        r.diverged = true;
      }
      break;
    }
  }
  r.adapt_ms = ms_since(start);
  r.accuracy = query_accuracy(art.backbone, layout, theta, e);
  return r;
}

std::vector<EpisodeResult> evaluate(Variant variant, const std::vector<EvalEpisode>& episodes, const Artifacts& art,
                                    const AdaptSettings& s, int threads) {
  if (uses_drift_net(variant)) {
    const DriftNet& net = art.net(variant);
    if (net.layout_hash() != art.selection.layout.hash())
      throw CompatibilityError(to_string(variant) + " network was trained for a different bias layout");
  }
  std::vector<EpisodeResult> out(episodes.size());
  parallel_for(static_cast<int>(episodes.size()), threads,
               [&](int i) { out[static_cast<std::size_t>(i)] = run_episode(variant, episodes[static_cast<std::size_t>(i)], art, s); });
  return out;
}

const EvalRow& EvalReport::pooled(const std::string& variant, const std::string& group) const {
  for (const auto& r : rows)
    if (r.variant == variant && r.group == group && r.domain < 0 && r.protocol == "all") return r;
  throw ConfigError("report has no pooled row for " + variant + " / " + group);
}

EvalReport summarize(const std::map<Variant, std::vector<EpisodeResult>>& results, const std::string& fingerprint) {
  EvalReport rep;
  rep.fingerprint = fingerprint;
  for (Variant v : all_variants()) {
    auto it = results.find(v);
    if (it == results.end()) continue;
    const auto& rs = it->second;
    auto add = [&](const std::string& group, int domain, const std::string& protocol) {
      std::vector<double> acc;
      for (const auto& r : rs)
        if ((group == "all" || r.group == group) && (domain < 0 || r.domain == domain) &&
            (protocol == "all" || r.protocol == protocol))
          acc.push_back(r.accuracy);
      if (!acc.empty()) rep.rows.push_back({to_string(v), group, domain, protocol, mean_ci(acc)});
    };
    std::vector<int> domains;
    std::vector<std::string> protocols;
    std::map<int, std::string> group_of_domain;
    for (const auto& r : rs) {
      if (std::find(domains.begin(), domains.end(), r.domain) == domains.end()) domains.push_back(r.domain);
      if (std::find(protocols.begin(), protocols.end(), r.protocol) == protocols.end()) protocols.push_back(r.protocol);
      group_of_domain[r.domain] = r.group;
    }
    std::sort(domains.begin(), domains.end());
    for (int d : domains) add(group_of_domain[d], d, "all");
    for (const std::string g : {"base", "ood", "all"}) {
      add(g, -1, "all");
      for (const auto& p : protocols) add(g, -1, p);
    }
  }
  return rep;
}

std::vector<double> relative_curve(const EpisodeResult& r) {
  std::vector<double> c;
  if (r.losses.empty() || !(r.losses[0] > 0)) return c;
  for (double l : r.losses) c.push_back(l / r.losses[0]);
  if (r.diverged) c.back() = 1.0;
  return c;
}

std::vector<LossSummary> loss_summary(const std::map<Variant, std::vector<EpisodeResult>>& results) {
  std::vector<LossSummary> out;
  for (Variant v : all_variants()) {
    auto it = results.find(v);
    if (it == results.end() || v == Variant::kDirect) continue;
    for (const std::string g : {"base", "ood"}) {
      LossSummary s;
      s.variant = to_string(v);
      s.group = g;
      double below = 0, total = 0;
      for (const auto& r : it->second) {
        if (r.group != g) continue;
        const auto c = relative_curve(r);
        if (c.empty() || !std::isfinite(c.back())) continue;
        ++s.n;
        below += c.back() < 1.0;
        total += c.back();
      }
      if (s.n == 0) continue;
      s.frac_below_one = below / s.n;
      s.mean_final = total / s.n;
      out.push_back(s);
    }
  }
  return out;
}

std::vector<CostRow> profile_cost(const std::vector<Variant>& variants, const std::vector<EvalEpisode>& episodes,
                                  const Artifacts& art, const AdaptSettings& s, int repeats) {
  if (repeats < 3) throw ConfigError("profile_cost: repeats must be at least 3");
  if (episodes.empty()) throw ConfigError("profile_cost: no episodes");
  std::vector<CostRow> out;
  const BiasLayout& layout = art.selection.layout;
  const Vector& theta0 = art.selection.theta_init;
  const double n = static_cast<double>(episodes.size());
  for (Variant v : variants) {
    CostRow row;
    row.variant = to_string(v);
    row.steps = v == Variant::kHypernet ? 1 : v == Variant::kBiasTune ? s.finetune_steps
                                        : v == Variant::kDirect     ? 0
                                                                    : s.solver_steps;
    std::vector<double> adapt_ms, infer_ms;
    for (int rep = 0; rep <= repeats; ++rep) {
      double a_ms = 0, i_ms = 0;
      AdaptResult sum;
      for (const auto& ep : episodes) {
        const Episode& e = ep.episode;
        AdaptResult r;
        auto t0 = Clock::now();
        switch (v) {
          case Variant::kDirect: r.theta = theta0; break;
          case Variant::kLinear:
          case Variant::kCubic: {
            const auto& tun = s.tuning.at(ep.group);
            r = euler_adapt(art.net(v), art.backbone, e.support, e.way, theta0, {s.solver_steps, tun.eta.at(v), false});
            break;
          }
          case Variant::kHypernet: r = hypernet_adapt(art.net(v), art.backbone, e.support, e.way, theta0, false); break;
          case Variant::kBiasTune:
            r = finetune_adapt(art.backbone, layout, e.support, e.way, theta0, s.finetune_steps,
                               {s.tuning.at(ep.group).lr}, false);
            break;
        }
        a_ms += ms_since(t0);
        t0 = Clock::now();
        const auto pred = classify(art.backbone, layout, r.theta, e.support, e.way, e.query.x);
        i_ms += ms_since(t0);
        (void)pred;
        sum.forward_count += r.forward_count;
        sum.backward_count += r.backward_count;
        sum.encode_count += r.encode_count;
        sum.graph_nodes += r.graph_nodes;
        sum.peak_bytes = std::max(sum.peak_bytes, r.peak_bytes);
      }
      if (rep == 0) continue;  // warm-up
      adapt_ms.push_back(a_ms / n);
      infer_ms.push_back(i_ms / n);
      row.forward = sum.forward_count / n;
      row.backward = sum.backward_count / n;
      row.encode = sum.encode_count / n;
      row.graph_nodes = sum.graph_nodes / n;
      row.peak_bytes = static_cast<double>(sum.peak_bytes);
    }
    row.adapt_ms = median(adapt_ms);
    row.infer_ms = median(infer_ms);
    out.push_back(row);
  }
  return out;
}

AdaptSettings tune(const Artifacts& art, const std::vector<EvalEpisode>& val, int solver_steps, int finetune_steps,
                   const std::vector<double>& eta_multipliers, const std::vector<double>& lr_grid,
                   const std::vector<Variant>& variants, TuningTables* tables) {
  AdaptSettings s;
  s.solver_steps = solver_steps;
  s.finetune_steps = finetune_steps;
  std::map<std::string, std::vector<Episode>> by_group;
  for (const auto& e : val) by_group[e.group].push_back(e.episode);
  for (const auto& [group, eps] : by_group) {
    GroupTuning& g = s.tuning[group];
    for (Variant v : variants) {
      if (v == Variant::kLinear || v == Variant::kCubic) {
        const DriftNet& net = art.net(v);
        const double nat = natural_step(net.objective(), net.steps(), solver_steps);
        std::vector<double> grid;
        for (double m : eta_multipliers) grid.push_back(m * nat);
        SearchResult r = step_size_search(net, art.backbone, eps, grid, solver_steps);
        g.eta[v] = r.best;
        if (tables) tables->eta[group][v] = std::move(r);
      } else if (v == Variant::kBiasTune) {
        SearchResult r = lr_search(art.backbone, art.selection.layout, art.selection.theta_init, eps, lr_grid,
                                   finetune_steps);
        g.lr = r.best;
        if (tables) tables->lr[group] = std::move(r);
      }
    }
  }
  return s;
}

}  // namespace gflow::harness
