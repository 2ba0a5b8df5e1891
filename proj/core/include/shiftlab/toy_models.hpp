#pragma once

// CPU-scale classifiers with a shared feature extractor and two heads: a class
// head h and a domain head g. Parameters are stored as an ordered list of
// tensors; every flat view walks that list in order, each tensor column-major.

#include "shiftlab/autodiff.hpp"
#include "shiftlab/rng.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shiftlab::models {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class ExtractorKind { linear, mlp };
enum class Activation { tanh, relu };

std::string to_string(ExtractorKind kind);
ExtractorKind extractor_kind_from_string(const std::string& name);

struct ModelSpec {
  ExtractorKind kind = ExtractorKind::mlp;
  int input_dim = 64;
  int hidden = 32;    // feature width produced by the extractor
  int classes = 2;
  int domains = 1;
  Activation activation = Activation::tanh;
  double init_scale = 1.0;  // multiplies the LeCun-normal init stddev
};

/// Parameter groups. The maskable flat view is `extractor`; heads are owned by
/// their own optimizers.
enum class ParamGroup { extractor, class_head, domain_head, classifier, all };

/// A batch of inputs with class labels and an optional group index per row
/// (severity or environment).
struct Batch {
  Matrix x;
  std::vector<int> y;
  std::vector<int> group;
  /// Optional source row of each example.
  std::vector<std::size_t> index;

  std::size_t size() const { return y.size(); }
  Batch subset(std::span<const std::size_t> rows) const;
};

class DualHeadModel {
 public:
  /// Parameter tensors bound onto a tape, in storage order.
  using Bound = std::vector<ad::Var>;

  DualHeadModel(const ModelSpec& spec, Rng& init_rng);

  const ModelSpec& spec() const { return spec_; }

  std::size_t count(ParamGroup group) const;
  Vector flat(ParamGroup group) const;
  void set_flat(ParamGroup group, const Vector& values);

  Matrix features(const Matrix& x) const;
  Matrix forward_class(const Matrix& x) const;
  Matrix forward_domain(const Matrix& x) const;

  /// Binds parameters onto `tape`. Tensors in `trainable` become variables,
  /// the rest constants. When `extractor_mask` is given (aligned with the
  /// extractor flat view), extractor tensors enter the graph as m∘θ and their
  /// gradients are taken with respect to the masked values.
  Bound bind(ad::Tape& tape, ParamGroup trainable,
             const Vector* extractor_mask = nullptr) const;

  ad::Var features(const Bound& p, ad::Var x) const;
  ad::Var class_logits(const Bound& p, ad::Var features) const;
  ad::Var domain_logits(const Bound& p, ad::Var features) const;

  /// Gradient of the last backward pass, flattened for `group`.
  Vector gather_grad(const Bound& p, ParamGroup group) const;

  const std::vector<Matrix>& tensors() const { return tensors_; }

 private:
  struct Range {
    std::size_t first;
    std::size_t last;  // exclusive
  };
  Range range(ParamGroup group) const;
  void check_input(const Matrix& x) const;

  ModelSpec spec_;
  std::vector<Matrix> tensors_;
  std::size_t extractor_end_ = 0;  // tensors [0, extractor_end_) are the extractor
};

/// Logits of the class path for `x`, rejecting mismatched input width.
Matrix forward_class(const DualHeadModel& model, const Matrix& x);
Matrix forward_domain(const DualHeadModel& model, const Matrix& x);
/// Extractor flat view (the maskable parameters).
Vector flat_params(const DualHeadModel& model);
void set_flat_params(DualHeadModel& model, const Vector& values);

enum class GradientSource { task, domain };

struct GradientSnapshot {
  Vector grad;
  GradientSource source = GradientSource::task;
  long iteration = 0;
};

/// Per-example weighted cross-entropy of the class path, sum_i w_i * ce_i.
/// When `grad` is non-null it receives the gradient over `group`.
double weighted_class_loss(const DualHeadModel& model, const Batch& batch, const Vector& weights,
                           Vector* grad = nullptr, ParamGroup group = ParamGroup::classifier,
                           const Vector* extractor_mask = nullptr);

/// Mean cross-entropy over the batch.
double mean_class_loss(const DualHeadModel& model, const Batch& batch, Vector* grad = nullptr,
                       ParamGroup group = ParamGroup::classifier);

double accuracy(const Matrix& logits, std::span<const int> labels);

/// Argmax per row; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Matrix& m);

// Checkpoints: <dir>/model.txt (key=value manifest, versioned) and
// <dir>/params.f64 (all tensors, flat). An optional mask goes to mask.u8.

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& dir, const DualHeadModel& model,
                     const std::optional<std::vector<unsigned char>>& mask = std::nullopt);

struct Checkpoint {
  DualHeadModel model;
  std::optional<std::vector<unsigned char>> mask;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace shiftlab::models
