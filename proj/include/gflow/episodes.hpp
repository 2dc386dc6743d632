#pragma once

// Synthetic cross-domain few-shot episodes.
//
// A domain maps latent Gaussian class clusters into input space through
//   x = Q diag(s) z + o,              z ~ N(mean_c, (sigma_class^2 / d) I)
// followed, for out-of-distribution domains, by x <- tanh(g x) / g. Class
// means are drawn per class identity with coordinates ~ N(0, radius^2 / d),
// so radius and sigma_class are expected norms. Each split owns a disjoint
// range of class identities.

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace gflow {

enum class Severity { kBase, kOod };
enum class Split { kTrain, kVal, kTest };

std::string to_string(Severity s);
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct DomainParams {
  double mean_radius = 1.2;
  double sigma_class = 1.0;
  double base_scale_log_std = 0.15;
  double ood_scale_log_std = 0.5;
  double base_offset_std = 0.5;
  double ood_offset_std = 1.5;
  double ood_tanh_gain = 1.0;
  /// Fraction of input channels carrying additive sensor noise. The channel
  /// set is shared by all domains; base domains draw the noise std uniformly
  /// from [0, base_channel_noise], ood domains use ood_channel_noise.
  double channel_noise_fraction = 0.25;
  double base_channel_noise = 1.0;
  double ood_channel_noise = 3.0;
};

struct DomainSpec {
  int id = 0;
  int dim = 0;
  Eigen::MatrixXd mixing;  // orthogonal, d x d
  Eigen::VectorXd scale;
  Eigen::VectorXd offset;
  Eigen::VectorXd channel_noise;  // per input channel, additive std
  double mean_radius = 1.0;
  double sigma_class = 1.0;
  Severity severity = Severity::kBase;
  bool nonlinear = false;
  double tanh_gain = 1.0;
  std::uint64_t seed = 0;

  /// ||Q^T Q - I||_F
  double orthogonality_defect() const;
  /// Maps latent rows (n x d) to input rows.
  Eigen::MatrixXd transform(const Eigen::MatrixXd& latent) const;
};

std::vector<DomainSpec> make_domains(std::uint64_t seed, int n_base, int n_ood, int dim,
                                     const DomainParams& params = {});

/// First class identity owned by a split; each split owns 2^40 identities.
std::int64_t class_id_base(Split split);
Split split_of_class(std::int64_t class_id);

/// Latent class mean; a pure function of (domain seed, class identity).
Eigen::VectorXd class_mean(const DomainSpec& domain, std::int64_t class_id);

struct Protocol {
  enum class Kind { kVarious, kFixed };
  Kind kind = Kind::kVarious;
  int way = 5;
  int shot = 5;
  int query = 10;
  int min_way = 2;
  int max_way = 5;
  int min_shot = 1;
  int max_shot = 10;

  static Protocol various() { return {}; }
  static Protocol fixed(int way, int shot, int query) {
    Protocol p;
    p.kind = Kind::kFixed;
    p.way = way;
    p.shot = shot;
    p.query = query;
    return p;
  }
};

struct Examples {
  Eigen::MatrixXd x;  // n x d
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

struct Episode {
  int domain = 0;
  Split split = Split::kTrain;
  int way = 0;
  std::vector<int> shots;
  std::vector<std::int64_t> class_ids;
  std::uint64_t seed = 0;
  Examples support;
  Examples query;

  int dim() const { return static_cast<int>(support.x.cols()); }
  /// Throws FormatError if labels, counts or query classes are inconsistent.
  void validate() const;
};

Episode sample_episode(const DomainSpec& domain, const Protocol& protocol, Split split, std::uint64_t seed);

/// Stream seed for episode `index` of `domain` in `split`.
std::uint64_t episode_seed(std::uint64_t global_seed, int domain, Split split, std::uint64_t index);

/// Convenience: `count` episodes per listed domain in domain-major order.
std::vector<Episode> sample_episodes(const std::vector<DomainSpec>& domains, const Protocol& protocol, Split split,
                                     int count, std::uint64_t global_seed);

// JSON Lines interchange: a header {"version":1,"d":D} then one episode per line.
inline constexpr int kEpisodeFormatVersion = 1;
void save_episodes(const std::vector<Episode>& episodes, const std::string& path);
std::vector<Episode> load_episodes(const std::string& path);
std::string episodes_to_jsonl(const std::vector<Episode>& episodes);
std::vector<Episode> episodes_from_jsonl(const std::string& text);

}  // namespace gflow
