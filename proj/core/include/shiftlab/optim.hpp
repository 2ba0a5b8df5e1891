#pragma once

#include <Eigen/Dense>

namespace shiftlab::optim {

/// SGD with optional heavy-ball momentum and L2 weight decay over one flat
/// parameter vector.
class Sgd {
 public:
  explicit Sgd(double lr, double momentum = 0.0, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  /// Like step() but leaves coordinates with mask == 0 untouched, including
  /// their momentum buffers.
  void step_masked(Eigen::VectorXd& params, const Eigen::VectorXd& grad,
                   const Eigen::VectorXd& mask);
  void reset() { velocity_.resize(0); }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  Eigen::VectorXd velocity_;
};

}  // namespace shiftlab::optim
