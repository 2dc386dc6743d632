#include "gflow/episodes.hpp"

#include <json.hpp>

#include <cmath>
#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "gflow/error.hpp"
#include "gflow/rng.hpp"

namespace gflow {

namespace {

constexpr std::int64_t kIdsPerSplit = std::int64_t{1} << 40;

Eigen::MatrixXd random_orthogonal(Rng& rng, int d) {
  const Eigen::MatrixXd a = rng.normal_matrix(d, d);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

}  // namespace

std::string to_string(Severity s) { return s == Severity::kBase ? "base" : "ood"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split tag '" + s + "'");
}

double DomainSpec::orthogonality_defect() const {
  return (mixing.transpose() * mixing - Eigen::MatrixXd::Identity(dim, dim)).norm();
}

Eigen::MatrixXd DomainSpec::transform(const Eigen::MatrixXd& latent) const {
  // rows: x^T = z^T diag(s) Q^T + o^T
  Eigen::MatrixXd x = (latent * scale.asDiagonal()) * mixing.transpose();
  x.rowwise() += offset.transpose();
  if (nonlinear) x = ((tanh_gain * x).array().tanh() / tanh_gain).matrix();
  return x;
}

std::vector<DomainSpec> make_domains(std::uint64_t seed, int n_base, int n_ood, int dim, const DomainParams& params) {
  if (dim < 2) throw std::invalid_argument("make_domains: input dimension must be at least 2");
  if (n_base < 1) throw std::invalid_argument("make_domains: need at least one base domain");
  if (n_ood < 0) throw std::invalid_argument("make_domains: negative ood count");
  if (!(params.sigma_class > 0)) throw std::invalid_argument("make_domains: sigma_class must be positive");
  if (!(params.channel_noise_fraction >= 0 && params.channel_noise_fraction <= 1))
    throw std::invalid_argument("make_domains: channel_noise_fraction must lie in [0, 1]");
  if (!(params.base_channel_noise >= 0 && params.ood_channel_noise >= 0))
    throw std::invalid_argument("make_domains: channel noise must be non-negative");
  std::vector<int> channels(static_cast<std::size_t>(dim));
  std::iota(channels.begin(), channels.end(), 0);
  {
    Rng crng(derive_seed(seed, {0xc4a7u}));
    std::shuffle(channels.begin(), channels.end(), crng.engine());
    channels.resize(static_cast<std::size_t>(std::lround(params.channel_noise_fraction * dim)));
  }
  std::vector<DomainSpec> out;
  for (int i = 0; i < n_base + n_ood; ++i) {
    const bool ood = i >= n_base;
    Rng rng(derive_seed(seed, {0xd0d0u, static_cast<std::uint64_t>(i)}));
    DomainSpec dom;
    dom.id = i;
    dom.dim = dim;
    dom.mixing = random_orthogonal(rng, dim);
    const double log_std = ood ? params.ood_scale_log_std : params.base_scale_log_std;
    dom.scale = rng.normal_vector(dim, log_std).array().exp().matrix();
    dom.offset = rng.normal_vector(dim, (ood ? params.ood_offset_std : params.base_offset_std) / std::sqrt(dim));
    dom.mean_radius = params.mean_radius;
    dom.sigma_class = params.sigma_class;
    dom.severity = ood ? Severity::kOod : Severity::kBase;
    dom.nonlinear = ood && params.ood_tanh_gain > 0;
    dom.tanh_gain = params.ood_tanh_gain;
    dom.seed = rng.next_u64();
    dom.channel_noise = Eigen::VectorXd::Zero(dim);
    const double cn = ood ? params.ood_channel_noise : rng.uniform(0.0, params.base_channel_noise);
    for (int c : channels) dom.channel_noise(c) = cn;
    out.push_back(std::move(dom));
  }
  return out;
}

std::int64_t class_id_base(Split split) { return static_cast<std::int64_t>(split) * kIdsPerSplit; }

Split split_of_class(std::int64_t class_id) { return static_cast<Split>(class_id / kIdsPerSplit); }

Eigen::VectorXd class_mean(const DomainSpec& domain, std::int64_t class_id) {
  Rng rng(derive_seed(domain.seed, {0xc1a55u, static_cast<std::uint64_t>(class_id)}));
  return rng.normal_vector(domain.dim, domain.mean_radius / std::sqrt(static_cast<double>(domain.dim)));
}

std::uint64_t episode_seed(std::uint64_t global_seed, int domain, Split split, std::uint64_t index) {
  return derive_seed(global_seed, {static_cast<std::uint64_t>(domain), static_cast<std::uint64_t>(split), index});
}

Episode sample_episode(const DomainSpec& domain, const Protocol& protocol, Split split, std::uint64_t seed) {
  Rng rng(seed);
  Episode ep;
  ep.domain = domain.id;
  ep.split = split;
  ep.seed = seed;
  int query = protocol.query;
  if (protocol.kind == Protocol::Kind::kVarious) {
    ep.way = rng.uniform_int(protocol.min_way, protocol.max_way);
    for (int c = 0; c < ep.way; ++c) ep.shots.push_back(rng.uniform_int(protocol.min_shot, protocol.max_shot));
  } else {
    ep.way = protocol.way;
    ep.shots.assign(static_cast<std::size_t>(protocol.way), protocol.shot);
  }
  if (ep.way < 1) throw std::invalid_argument("sample_episode: way must be positive");
  std::set<std::int64_t> used;
  while (static_cast<int>(ep.class_ids.size()) < ep.way) {
    const std::int64_t id = class_id_base(split) + static_cast<std::int64_t>(rng.next_u64() % kIdsPerSplit);
    if (used.insert(id).second) ep.class_ids.push_back(id);
  }

  const int d = domain.dim;
  const double noise = domain.sigma_class / std::sqrt(static_cast<double>(d));
  int n_support = 0;
  for (int s : ep.shots) n_support += s;
  Eigen::MatrixXd zs(n_support, d), zq(ep.way * query, d);
  int rs = 0, rq = 0;
  for (int c = 0; c < ep.way; ++c) {
    const Eigen::VectorXd mu = class_mean(domain, ep.class_ids[static_cast<std::size_t>(c)]);
    for (int k = 0; k < ep.shots[static_cast<std::size_t>(c)]; ++k, ++rs) {
      zs.row(rs) = (mu + rng.normal_vector(d, noise)).transpose();
      ep.support.y.push_back(c);
    }
    for (int k = 0; k < query; ++k, ++rq) {
      zq.row(rq) = (mu + rng.normal_vector(d, noise)).transpose();
      ep.query.y.push_back(c);
    }
  }
  ep.support.x = domain.transform(zs);
  ep.query.x = domain.transform(zq);
  if (domain.channel_noise.size() == d && domain.channel_noise.any()) {
    for (Eigen::MatrixXd* x : {&ep.support.x, &ep.query.x})
      for (Eigen::Index r = 0; r < x->rows(); ++r)
        x->row(r) += rng.normal_vector(d, 1.0).cwiseProduct(domain.channel_noise).transpose();
  }
  return ep;
}

std::vector<Episode> sample_episodes(const std::vector<DomainSpec>& domains, const Protocol& protocol, Split split,
                                     int count, std::uint64_t global_seed) {
  std::vector<Episode> out;
  out.reserve(domains.size() * static_cast<std::size_t>(count));
  for (const auto& dom : domains)
    for (int i = 0; i < count; ++i)
      out.push_back(sample_episode(dom, protocol, split, episode_seed(global_seed, dom.id, split, static_cast<std::uint64_t>(i))));
  return out;
}

void Episode::validate() const {
  if (way < 1 || static_cast<int>(shots.size()) != way) throw FormatError("episode: shots do not match way");
  if (support.x.rows() != static_cast<Eigen::Index>(support.y.size()) ||
      query.x.rows() != static_cast<Eigen::Index>(query.y.size()))
    throw FormatError("episode: example/label count mismatch");
  if (query.x.size() > 0 && query.x.cols() != support.x.cols()) throw FormatError("episode: dimension mismatch");
  std::vector<int> counts(static_cast<std::size_t>(way), 0);
  for (int y : support.y) {
    if (y < 0 || y >= way) throw FormatError("episode: support label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < way; ++c)
    if (counts[static_cast<std::size_t>(c)] != shots[static_cast<std::size_t>(c)])
      throw FormatError("episode: support size does not match shots");
  for (int y : query.y)
    if (y < 0 || y >= way || counts[static_cast<std::size_t>(y)] == 0)
      throw FormatError("episode: query class absent from support");
}

// --- JSON Lines ------------------------------------------------------------

namespace {

using nlohmann::json;

json examples_to_json(const Examples& ex) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < ex.x.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < ex.x.cols(); ++j) row.push_back(ex.x(i, j));
    rows.push_back(std::move(row));
  }
  return json{{"x", std::move(rows)}, {"y", ex.y}};
}

Examples examples_from_json(const json& j, int d, std::size_t line_offset) {
  Examples ex;
  const auto& rows = j.at("x");
  ex.y = j.at("y").get<std::vector<int>>();
  if (rows.size() != ex.y.size()) throw FormatError("episodes: x/y length mismatch", line_offset);
  ex.x.resize(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].is_array() || static_cast<int>(rows[i].size()) != d)
      throw FormatError("episodes: dimension mismatch: example has " + std::to_string(rows[i].size()) +
                            " values, header declares d=" + std::to_string(d),
                        line_offset);
    for (int k = 0; k < d; ++k) ex.x(static_cast<Eigen::Index>(i), k) = rows[i][static_cast<std::size_t>(k)].get<double>();
  }
  return ex;
}

}  // namespace

std::string episodes_to_jsonl(const std::vector<Episode>& episodes) {
  const int d = episodes.empty() ? 0 : episodes.front().dim();
  std::ostringstream out;
  out << json{{"version", kEpisodeFormatVersion}, {"d", d}}.dump() << '\n';
  for (const auto& ep : episodes) {
    if (ep.dim() != d) throw ShapeError("save_episodes: episodes disagree on input dimension");
    json line{{"domain", ep.domain},
              {"split", to_string(ep.split)},
              {"way", ep.way},
              {"shots", ep.shots},
              {"class_ids", ep.class_ids},
              {"seed", ep.seed},
              {"support", examples_to_json(ep.support)},
              {"query", examples_to_json(ep.query)}};
    out << line.dump() << '\n';
  }
  return out.str();
}

std::vector<Episode> episodes_from_jsonl(const std::string& text) {
  std::vector<Episode> out;
  std::size_t pos = 0;
  int d = -1;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    const std::size_t line_offset = pos;
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(std::string("episodes: malformed record: ") + e.what(),
                        line_offset + (e.byte > 0 ? e.byte - 1 : 0));
    }
    try {
      if (d < 0) {
        const int version = j.at("version").get<int>();
        if (version != kEpisodeFormatVersion)
          throw FormatError("episodes: version mismatch: file has " + std::to_string(version) + ", expected " +
                                std::to_string(kEpisodeFormatVersion),
                            line_offset);
        d = j.at("d").get<int>();
        continue;
      }
      Episode ep;
      ep.domain = j.at("domain").get<int>();
      ep.split = split_from_string(j.at("split").get<std::string>());
      ep.way = j.at("way").get<int>();
      ep.shots = j.at("shots").get<std::vector<int>>();
      ep.class_ids = j.value("class_ids", std::vector<std::int64_t>{});
      ep.seed = j.value("seed", std::uint64_t{0});
      ep.support = examples_from_json(j.at("support"), d, line_offset);
      ep.query = examples_from_json(j.at("query"), d, line_offset);
      ep.validate();
      out.push_back(std::move(ep));
    } catch (const json::exception& e) {
      throw FormatError(std::string("episodes: malformed record: ") + e.what(), line_offset);
    } catch (const FormatError& e) {
      if (e.offset() != 0 || line_offset == 0) throw;
      throw FormatError(e.what(), line_offset);
    }
  }
  if (d < 0) throw FormatError("episodes: missing header line", 0);
  return out;
}

void save_episodes(const std::vector<Episode>& episodes, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << episodes_to_jsonl(episodes);
  if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  std::stringstream ss;
  ss << in.rdbuf();
  return episodes_from_jsonl(ss.str());
}

}  // namespace gflow
