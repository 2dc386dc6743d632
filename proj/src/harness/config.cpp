#include "gflow/harness/config.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "gflow/error.hpp"

namespace gflow::harness {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string where(const std::string& section, const std::string& key, int line) {
  return "[" + section + "] " + key + (line > 0 ? " (line " + std::to_string(line) + ")" : "");
}

std::string unquote(const std::string& raw, const std::string& ctx) {
  if (raw.size() < 2 || raw.front() != '"' || raw.back() != '"') throw ConfigError(ctx + ": expected a quoted string");
  return raw.substr(1, raw.size() - 2);
}

std::vector<std::string> split_array(const std::string& raw, const std::string& ctx) {
  if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']') throw ConfigError(ctx + ": expected an array");
  std::vector<std::string> out;
  const std::string body = trim(raw.substr(1, raw.size() - 2));
  if (body.empty()) return out;
  std::string cur;
  bool quoted = false;
  for (char c : body) {
    if (c == '"') quoted = !quoted;
    if (c == ',' && !quoted) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  for (const auto& t : out)
    if (t.empty()) throw ConfigError(ctx + ": empty array element");
  return out;
}

double parse_number(const std::string& raw, const std::string& ctx) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(raw, &used);
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": '" + raw + "' is not a number");
  }
  if (used != raw.size()) throw ConfigError(ctx + ": '" + raw + "' is not a number");
  return v;
}

std::int64_t parse_integer(const std::string& raw, const std::string& ctx) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(raw, &used, 0);
  } catch (const std::exception&) {
    throw ConfigError(ctx + ": '" + raw + "' is not an integer");
  }
  if (used != raw.size()) throw ConfigError(ctx + ": '" + raw + "' is not an integer");
  return v;
}

std::string num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string quote(const std::string& s) { return "\"" + s + "\""; }

template <class T, class F>
std::string list(const std::vector<T>& v, F f) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + f(v[i]);
  return s + "]";
}

// Field table: one entry per configurable value, shared by the reader and the
// canonical writer.
struct Field {
  const char* section;
  const char* key;
  std::function<void(const ConfigDoc&, PipelineConfig&)> read;
  std::function<std::string(const PipelineConfig&)> write;
};

template <class Ref>
Field f64(const char* s, const char* k, Ref ref) {
  return {s, k, [=](const ConfigDoc& d, PipelineConfig& c) { ref(c) = d.number(s, k); },
          [=](const PipelineConfig& c) { return num(ref(const_cast<PipelineConfig&>(c))); }};
}

template <class Ref>
Field i64(const char* s, const char* k, Ref ref) {
  return {s, k,
          [=](const ConfigDoc& d, PipelineConfig& c) {
            using T = std::remove_reference_t<decltype(ref(c))>;
            ref(c) = static_cast<T>(d.integer(s, k));
          },
          [=](const PipelineConfig& c) { return std::to_string(ref(const_cast<PipelineConfig&>(c))); }};
}

template <class Ref>
Field flag(const char* s, const char* k, Ref ref) {
  return {s, k, [=](const ConfigDoc& d, PipelineConfig& c) { ref(c) = d.boolean(s, k); },
          [=](const PipelineConfig& c) { return std::string(ref(const_cast<PipelineConfig&>(c)) ? "true" : "false"); }};
}

template <class Ref>
Field text(const char* s, const char* k, Ref ref) {
  return {s, k, [=](const ConfigDoc& d, PipelineConfig& c) { ref(c) = d.string(s, k); },
          [=](const PipelineConfig& c) { return quote(ref(const_cast<PipelineConfig&>(c))); }};
}

template <class Ref>
Field f64s(const char* s, const char* k, Ref ref) {
  return {s, k, [=](const ConfigDoc& d, PipelineConfig& c) { ref(c) = d.numbers(s, k); },
          [=](const PipelineConfig& c) { return list(ref(const_cast<PipelineConfig&>(c)), num); }};
}

template <class Ref>
Field ints(const char* s, const char* k, Ref ref) {
  return {s, k,
          [=](const ConfigDoc& d, PipelineConfig& c) {
            std::vector<int> out;
            for (double x : d.numbers(s, k)) {
              if (x != static_cast<int>(x)) throw ConfigError(where(s, k, 0) + ": expected integers");
              out.push_back(static_cast<int>(x));
            }
            ref(c) = out;
          },
          [=](const PipelineConfig& c) {
            return list(ref(const_cast<PipelineConfig&>(c)), [](int x) { return std::to_string(x); });
          }};
}

template <class Ref>
Field texts(const char* s, const char* k, Ref ref) {
  return {s, k, [=](const ConfigDoc& d, PipelineConfig& c) { ref(c) = d.strings(s, k); },
          [=](const PipelineConfig& c) { return list(ref(const_cast<PipelineConfig&>(c)), quote); }};
}

using C = PipelineConfig;

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      i64("domains", "seed", [](C& c) -> auto& { return c.domain_seed; }),
      i64("domains", "n_base", [](C& c) -> auto& { return c.n_base; }),
      i64("domains", "n_ood", [](C& c) -> auto& { return c.n_ood; }),
      i64("domains", "dim", [](C& c) -> auto& { return c.dim; }),
      f64("domains", "mean_radius", [](C& c) -> auto& { return c.domain.mean_radius; }),
      f64("domains", "sigma_class", [](C& c) -> auto& { return c.domain.sigma_class; }),
      f64("domains", "base_scale_log_std", [](C& c) -> auto& { return c.domain.base_scale_log_std; }),
      f64("domains", "ood_scale_log_std", [](C& c) -> auto& { return c.domain.ood_scale_log_std; }),
      f64("domains", "base_offset_std", [](C& c) -> auto& { return c.domain.base_offset_std; }),
      f64("domains", "ood_offset_std", [](C& c) -> auto& { return c.domain.ood_offset_std; }),
      f64("domains", "ood_tanh_gain", [](C& c) -> auto& { return c.domain.ood_tanh_gain; }),
      f64("domains", "channel_noise_fraction", [](C& c) -> auto& { return c.domain.channel_noise_fraction; }),
      f64("domains", "base_channel_noise", [](C& c) -> auto& { return c.domain.base_channel_noise; }),
      f64("domains", "ood_channel_noise", [](C& c) -> auto& { return c.domain.ood_channel_noise; }),

      i64("backbone", "seed", [](C& c) -> auto& { return c.meta.seed; }),
      ints("backbone", "dims", [](C& c) -> auto& { return c.meta.dims; }),
      i64("backbone", "epochs", [](C& c) -> auto& { return c.meta.epochs; }),
      i64("backbone", "episodes_per_epoch", [](C& c) -> auto& { return c.meta.episodes_per_epoch; }),
      f64("backbone", "lr", [](C& c) -> auto& { return c.meta.lr; }),
      ints("backbone", "bias_layers", [](C& c) -> auto& { return c.bias_layers; }),

      i64("trajectories", "seed", [](C& c) -> auto& { return c.collect.seed; }),
      i64("trajectories", "episodes_per_domain", [](C& c) -> auto& { return c.collect.episodes_per_domain; }),
      i64("trajectories", "inits_per_episode", [](C& c) -> auto& { return c.collect.inits_per_episode; }),
      i64("trajectories", "val_trajectories", [](C& c) -> auto& { return c.collect.val_trajectories; }),
      i64("trajectories", "steps", [](C& c) -> auto& { return c.collect.sim.steps; }),
      f64("trajectories", "lr", [](C& c) -> auto& { return c.collect.sim.lr; }),
      f64("trajectories", "perturb_std", [](C& c) -> auto& { return c.collect.sim.perturb_std; }),
      {"trajectories", "optimizer",
       [](const ConfigDoc& d, C& c) { c.collect.sim.optimizer = optimizer_from_string(d.string("trajectories", "optimizer")); },
       [](const C& c) { return quote(to_string(c.collect.sim.optimizer)); }},

      i64("drift", "seed", [](C& c) -> auto& { return c.drift.seed; }),
      i64("drift", "width", [](C& c) -> auto& { return c.arch.width; }),
      i64("drift", "ff", [](C& c) -> auto& { return c.arch.ff; }),
      i64("drift", "blocks", [](C& c) -> auto& { return c.arch.blocks; }),
      ints("drift", "hidden", [](C& c) -> auto& { return c.arch.hidden; }),
      i64("drift", "batch", [](C& c) -> auto& { return c.drift.batch; }),
      i64("drift", "per_trajectory", [](C& c) -> auto& { return c.drift.per_trajectory; }),
      f64("drift", "lr", [](C& c) -> auto& { return c.drift.lr; }),
      i64("drift", "max_steps", [](C& c) -> auto& { return c.drift.max_steps; }),
      i64("drift", "eval_every", [](C& c) -> auto& { return c.drift.eval_every; }),
      i64("drift", "patience", [](C& c) -> auto& { return c.drift.patience; }),
      i64("drift", "val_samples", [](C& c) -> auto& { return c.drift.val_samples; }),

      i64("solver", "steps", [](C& c) -> auto& { return c.solver_steps; }),
      f64s("solver", "eta_multipliers", [](C& c) -> auto& { return c.eta_multipliers; }),

      i64("finetune", "steps", [](C& c) -> auto& { return c.finetune_steps; }),
      f64s("finetune", "lr_grid", [](C& c) -> auto& { return c.lr_grid; }),

      i64("eval", "seed", [](C& c) -> auto& { return c.eval_seed; }),
      i64("eval", "val_seed", [](C& c) -> auto& { return c.val_seed; }),
      i64("eval", "test_per_domain", [](C& c) -> auto& { return c.test_per_domain; }),
      i64("eval", "val_per_domain", [](C& c) -> auto& { return c.val_per_domain; }),
      i64("eval", "query", [](C& c) -> auto& { return c.query; }),
      texts("eval", "protocols", [](C& c) -> auto& { return c.protocols; }),

      i64("profile", "repeats", [](C& c) -> auto& { return c.profile_repeats; }),
      i64("profile", "steps", [](C& c) -> auto& { return c.profile_steps; }),
      i64("profile", "episodes", [](C& c) -> auto& { return c.profile_episodes; }),

      flag("ablation", "enabled", [](C& c) -> auto& { return c.ablation; }),
      ints("ablation", "domains", [](C& c) -> auto& { return c.ablation_domains; }),
      ints("ablation", "inits", [](C& c) -> auto& { return c.ablation_inits; }),
      i64("ablation", "test_per_domain", [](C& c) -> auto& { return c.ablation_test_per_domain; }),

      flag("frontier", "enabled", [](C& c) -> auto& { return c.frontier; }),
      ints("frontier", "steps", [](C& c) -> auto& { return c.frontier_steps; }),
      i64("frontier", "test_per_domain", [](C& c) -> auto& { return c.frontier_test_per_domain; }),

      text("pipeline", "out_dir", [](C& c) -> auto& { return c.out_dir; }),
      text("pipeline", "cache_dir", [](C& c) -> auto& { return c.cache_dir; }),
      i64("pipeline", "threads", [](C& c) -> auto& { return c.threads; }),
  };
  return table;
}

const std::vector<std::string>& section_order() {
  static const std::vector<std::string> order{"domains", "backbone", "trajectories", "drift",    "solver",  "finetune",
                                              "eval",    "profile",  "ablation",     "frontier", "pipeline"};
  return order;
}

}  // namespace

ConfigDoc ConfigDoc::parse(const std::string& text) {
  ConfigDoc doc;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3)
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(s.substr(1, s.size() - 2));
      doc.sections_[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside a section");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
    auto& sec = doc.sections_[section];
    if (sec.count(key)) throw ConfigError(where(section, key, lineno) + ": duplicate key");
    sec[key] = {value, lineno};
  }
  return doc;
}

ConfigDoc ConfigDoc::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool ConfigDoc::has(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  return it != sections_.end() && it->second.count(key);
}

const ConfigDoc::Entry& ConfigDoc::entry(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  if (it == sections_.end() || !it->second.count(key)) throw ConfigError(where(section, key, 0) + ": missing");
  return it->second.at(key);
}

double ConfigDoc::number(const std::string& section, const std::string& key) const {
  const auto& e = entry(section, key);
  return parse_number(e.raw, where(section, key, e.line));
}

std::int64_t ConfigDoc::integer(const std::string& section, const std::string& key) const {
  const auto& e = entry(section, key);
  return parse_integer(e.raw, where(section, key, e.line));
}

bool ConfigDoc::boolean(const std::string& section, const std::string& key) const {
  const auto& e = entry(section, key);
  if (e.raw == "true") return true;
  if (e.raw == "false") return false;
  throw ConfigError(where(section, key, e.line) + ": expected true or false");
}

std::string ConfigDoc::string(const std::string& section, const std::string& key) const {
  const auto& e = entry(section, key);
  return unquote(e.raw, where(section, key, e.line));
}

std::vector<double> ConfigDoc::numbers(const std::string& section, const std::string& key) const {
  const auto& e = entry(section, key);
  const std::string ctx = where(section, key, e.line);
  std::vector<double> out;
  for (const auto& t : split_array(e.raw, ctx)) out.push_back(parse_number(t, ctx));
  return out;
}

std::vector<std::string> ConfigDoc::strings(const std::string& section, const std::string& key) const {
  const auto& e = entry(section, key);
  const std::string ctx = where(section, key, e.line);
  std::vector<std::string> out;
  for (const auto& t : split_array(e.raw, ctx)) out.push_back(unquote(t, ctx));
  return out;
}

Protocol protocol_from_string(const std::string& s, int query) {
  if (s == "various") {
    Protocol p = Protocol::various();
    p.query = query;
    return p;
  }
  int way = 0, shot = 0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "%dw%ds%c", &way, &shot, &tail) != 2 || way < 1 || shot < 1)
    throw ConfigError("unknown protocol '" + s + "' (use various or <way>w<shot>s)");
  return Protocol::fixed(way, shot, query);
}

std::string protocol_name(const Protocol& p) {
  if (p.kind == Protocol::Kind::kVarious) return "various";
  return std::to_string(p.way) + "w" + std::to_string(p.shot) + "s";
}

PipelineConfig::PipelineConfig() {
  meta.seed = 1;
  collect.seed = 3;
  collect.sim.lr = 0.3;
  drift.seed = 5;
  drift.max_steps = 2000;
  drift.eval_every = 250;
  drift.patience = 4;
}

void PipelineConfig::validate() const {
  if (n_base < 1 || n_ood < 1) throw ConfigError("[domains] needs at least one base and one ood domain");
  if (dim < 2) throw ConfigError("[domains] dim must be at least 2");
  if (meta.dims.size() < 2 || meta.dims.front() != dim)
    throw ConfigError("[backbone] dims must start with the domain dimension");
  if (bias_layers.empty()) throw ConfigError("[backbone] bias_layers is empty");
  collect.sim.validate();
  if (collect.episodes_per_domain < 1 || collect.inits_per_episode < 1)
    throw ConfigError("[trajectories] counts must be positive");
  if (solver_steps < 1) throw ConfigError("[solver] steps must be positive");
  if (eta_multipliers.empty()) throw ConfigError("[solver] eta_multipliers is empty");
  if (finetune_steps < 0) throw ConfigError("[finetune] steps must be non-negative");
  if (lr_grid.empty()) throw ConfigError("[finetune] lr_grid is empty");
  if (test_per_domain < 1 || val_per_domain < 1 || query < 1) throw ConfigError("[eval] counts must be positive");
  if (protocols.empty()) throw ConfigError("[eval] protocols is empty");
  for (const auto& p : protocols) protocol_from_string(p, query);
  if (profile_repeats < 3) throw ConfigError("[profile] repeats must be at least 3");
  if (profile_episodes < 1 || profile_steps < 1) throw ConfigError("[profile] counts must be positive");
  for (const auto* levels : {&ablation_domains, &ablation_inits, &frontier_steps})
    for (std::size_t i = 1; i < levels->size(); ++i)
      if ((*levels)[i] <= (*levels)[i - 1]) throw ConfigError("ablation and frontier levels must ascend");
  for (int d : ablation_domains)
    if (d < 1 || d > n_base) throw ConfigError("[ablation] domain level " + std::to_string(d) + " is out of range");
  for (int k : ablation_inits)
    if (k < 1 || k > collect.inits_per_episode)
      throw ConfigError("[ablation] init level " + std::to_string(k) + " exceeds inits_per_episode");
  for (int s : frontier_steps)
    if (s < 1) throw ConfigError("[frontier] steps must be positive");
}

PipelineConfig pipeline_config(const ConfigDoc& doc) {
  PipelineConfig cfg;
  for (const auto& [section, keys] : doc.sections()) {
    for (const auto& [key, e] : keys) {
      bool known = false;
      for (const auto& f : fields())
        if (section == f.section && key == f.key) {
          f.read(doc, cfg);
          known = true;
          break;
        }
      if (!known) throw ConfigError(where(section, key, e.line) + ": unknown key");
    }
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) { return pipeline_config(ConfigDoc::load(path)); }

std::string canonical_text(const PipelineConfig& cfg, const std::string& section) {
  std::string out;
  for (const auto& sec : section_order()) {
    if (!section.empty() && sec != section) continue;
    out += "[" + sec + "]\n";
    for (const auto& f : fields())
      if (sec == f.section) out += std::string(f.key) + " = " + f.write(cfg) + "\n";
    out += "\n";
  }
  if (out.empty()) throw ConfigError("unknown config section '" + section + "'");
  return out;
}

std::uint64_t fnv1a(const std::string& bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t x) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string experiment_text(const PipelineConfig& cfg) {
  std::string text;
  for (const auto& sec : section_order())
    if (sec != "pipeline") text += canonical_text(cfg, sec);
  return text;
}

std::string fingerprint(const PipelineConfig& cfg) { return hex64(fnv1a(experiment_text(cfg))); }

std::vector<DomainSpec> make_domains(const PipelineConfig& cfg) {
  return gflow::make_domains(cfg.domain_seed, cfg.n_base, cfg.n_ood, cfg.dim, cfg.domain);
}

}  // namespace gflow::harness
