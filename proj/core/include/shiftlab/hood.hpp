#pragma once

// Content/style variational model with adversarial augmentation at toy scale.
//
// Two Gaussian encoders split an input into content c and style s (equal
// latent width, so each classifier can be applied to either latent). The
// ELBO rewards predicting the class from c and the domain from s, penalizes
// the crossed predictions, and reconstructs x from (c, s). Positive
// augmentation keeps content and perturbs style; negative augmentation keeps
// style and perturbs content. A one-vs-all head over the content mean scores
// how unknown an input looks.

#include "shiftlab/autodiff.hpp"
#include "shiftlab/rng.hpp"
#include "shiftlab/run_record.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shiftlab::hood {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct VibSpec {
  int input_dim = 16;
  int latent = 4;
  int classes = 4;
  int domains = 4;
  int ova_hidden = 16;
  double init_scale = 1.0;
};

class VibModel {
 public:
  using Bound = std::vector<ad::Var>;

  VibModel(const VibSpec& spec, Rng& init_rng);

  const VibSpec& spec() const { return spec_; }
  std::size_t count() const;
  Vector flat() const;
  void set_flat(const Vector& values);

  Bound bind(ad::Tape& tape, bool trainable) const;

  struct Stats {
    ad::Var mu;
    ad::Var logvar;
  };
  Stats encode_content(const Bound& p, ad::Var x) const;
  Stats encode_style(const Bound& p, ad::Var x) const;
  ad::Var content_head(const Bound& p, ad::Var z) const;  // f_c, class logits
  ad::Var style_head(const Bound& p, ad::Var z) const;    // f_s, domain logits
  ad::Var decode(const Bound& p, ad::Var c, ad::Var s) const;
  ad::Var ova_logits(const Bound& p, ad::Var content_mu) const;

  /// Gradient of the last backward pass, flat.
  Vector gather_grad(const Bound& p) const;

  // Deterministic evaluation on encoder means.
  Matrix content_mean(const Matrix& x) const;
  Matrix style_mean(const Matrix& x) const;
  Matrix content_logits(const Matrix& x) const;  // f_c(mu_c(x))
  Matrix style_logits(const Matrix& x) const;    // f_s(mu_s(x))
  /// Sigmoid rejector outputs, one column per class.
  Matrix ova_probs(const Matrix& x) const;

 private:
  VibSpec spec_;
  std::vector<Matrix> tensors_;
};

/// 0.5 * sum_j (mu^2 + exp(lv) - lv - 1), averaged over rows.
double kl_standard_normal(const Matrix& mu, const Matrix& logvar);

/// mu + exp(0.5 lv) * noise.
Matrix reparameterize(const Matrix& mu, const Matrix& logvar, const Matrix& noise);

struct ElboTerms {
  double total = 0.0;
  double kl_content = 0.0;
  double kl_style = 0.0;
  double content_term = 0.0;  // E[log q(y|c) - log q(d|c)]
  double style_term = 0.0;    // E[log q(d|s) - log q(y|s)]
  double reconstruction = 0.0;  // -E||x - x_rec||^2
};

struct ElboWeights {
  double kl = 1.0;
  double reconstruction = 1.0;
  double disentangle = 1.0;
  int samples = 1;
};

/// Noise for the reparameterized draws: `samples` pairs of (content, style)
/// standard normal matrices.
struct ElboNoise {
  std::vector<Matrix> content;
  std::vector<Matrix> style;
  static ElboNoise draw(std::size_t rows, int latent, int samples, Rng& rng);
};

/// Crossed prediction terms -log q(d|c) and -log q(y|s) are capped per
/// example at the chance-level cross-entropy, which keeps the ELBO bounded
/// above.
ElboTerms elbo(const VibModel& model, const Matrix& x, std::span<const int> y,
               std::span<const int> d, const ElboNoise& noise, const ElboWeights& w = {});

/// Same objective on a tape; returns the ELBO node.
ad::Var elbo_graph(const VibModel& model, const VibModel::Bound& p, ad::Var x,
                   std::span<const int> y, std::span<const int> d, const ElboNoise& noise,
                   const ElboWeights& w, ElboTerms* terms = nullptr);

// Augmentation ----------------------------------------------------------------

/// Objective summed over rows; `grad` (if given) receives d/dx, same shape.
using InputObjective = std::function<double(const Matrix& x, Matrix* grad)>;

/// Sign-gradient descent: x <- x - epsilon * sign(grad), then projection onto
/// the box ||x - x0||_inf <= steps * epsilon.
Matrix pgd_minimize(const InputObjective& objective, const Matrix& x0, double epsilon, int steps);

inline constexpr double kDefaultEpsilon = 0.03;
inline constexpr int kDefaultSteps = 15;

struct AugmentOptions {
  double epsilon = kDefaultEpsilon;
  int steps = kDefaultSteps;
};

/// Minimizes ||mu_c(x) - mu_c(x+e)||^2 - CE(f_s(mu_s(x+e)), d).
Matrix positive_augment(const VibModel& model, const Matrix& x, std::span<const int> d,
                        const AugmentOptions& opt = {});
/// Minimizes ||mu_c(x) - mu_c(x+e)||^2 + CE(f_s(mu_s(x+e)), d').
Matrix positive_augment_targeted(const VibModel& model, const Matrix& x,
                                 std::span<const int> d_prime, const AugmentOptions& opt = {});
/// Minimizes ||mu_s(x) - mu_s(x+e)||^2 - CE(f_c(mu_c(x+e)), y).
Matrix negative_augment(const VibModel& model, const Matrix& x, std::span<const int> y,
                        const AugmentOptions& opt = {});

/// The objectives above, exposed for inspection.
InputObjective positive_objective(const VibModel& model, const Matrix& x0,
                                  std::span<const int> d, bool targeted);
InputObjective negative_objective(const VibModel& model, const Matrix& x0, std::span<const int> y);

struct AugmentedPair {
  Vector x_bar;
  Vector x_hat;
  std::size_t source = 0;
  int steps = 0;
  double epsilon = 0.0;
};

struct AugmentedPool {
  Matrix x_bar;  // benign: content kept, style changed
  Matrix x_hat;  // malign: style kept, content changed
  std::vector<int> y;
  std::vector<int> d;
  std::vector<std::size_t> source;
  int steps = 0;
  double epsilon = 0.0;

  std::size_t size() const { return source.size(); }
  AugmentedPair pair(std::size_t i) const;
};

AugmentedPool build_pool(const VibModel& model, const Matrix& x, std::span<const int> y,
                         std::span<const int> d, std::span<const std::size_t> source,
                         const AugmentOptions& opt);

void save_pool(const AugmentedPool& pool, const std::filesystem::path& dir);
AugmentedPool load_pool(const std::filesystem::path& dir);

// Scoring -----------------------------------------------------------------------

inline constexpr double kOodThreshold = 0.5;

/// Rejector output of the predicted (content-head argmax) class.
Vector hood_ood_score(const VibModel& model, const Matrix& x);
inline bool is_ood(double score) { return score >= kOodThreshold; }

inline constexpr double kPseudoLabelFloor = 0.95;

/// Content-head argmax where its softmax confidence reaches `floor`.
std::vector<std::optional<int>> pseudo_labels(const VibModel& model, const Matrix& x,
                                              double floor = kPseudoLabelFloor);

// Toy data ----------------------------------------------------------------------

/// Content block = class prototype + noise; style block = domain pattern +
/// noise. Prototypes and patterns are fixed by `structure_seed`.
struct ToySpec {
  int content_dim = 8;
  int style_dim = 8;
  int classes = 4;
  int domains = 4;
  double content_amplitude = 0.3;
  double style_amplitude = 0.3;
  double noise = 0.1;
  std::uint64_t structure_seed = 7;
};

struct ToyData {
  Matrix x;
  std::vector<int> y;
  std::vector<int> d;
  ToySpec spec;

  std::size_t size() const { return y.size(); }
};

/// Balanced classes and domains. `novel_style` swaps in a fresh set of domain
/// patterns (a style shift) while keeping the class prototypes.
ToyData make_toy(std::size_t n, const ToySpec& spec, std::uint64_t seed, bool novel_style = false);

// Training ----------------------------------------------------------------------

enum class AugMode { both, pos, neg, none };

std::string to_string(AugMode m);
std::optional<AugMode> aug_mode_from_string(const std::string& name);

struct HoodConfig {
  AugMode aug = AugMode::both;
  AugmentOptions augment;
  long iterations = 1500;
  /// Augmentation fires once, at this fraction of the iterations.
  double aug_fraction = 0.5;
  VibSpec model;
  double lr = 0.05;
  double momentum = 0.9;
  ElboWeights elbo;
  double ova_weight = 1.0;
  double aug_weight = 1.0;
  /// Fraction of training rows treated as unlabeled; they join the labeled
  /// pool only through gated pseudo-labels.
  double unlabeled_fraction = 0.0;
  double pseudo_label_floor = kPseudoLabelFloor;
  long log_every = 1;
  std::uint64_t seed = 0;
};

struct HoodResult {
  VibModel model;
  RunRecord record;
  AugmentedPool pool;
};

HoodResult hood_train(const HoodConfig& config, const ToyData& train, const ToyData& test);

}  // namespace shiftlab::hood
