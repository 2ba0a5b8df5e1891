#include "shiftlab/optim.hpp"

#include "shiftlab/errors.hpp"

namespace shiftlab::optim {

void Sgd::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (grad.size() != params.size()) throw DomainError("Sgd::step: gradient length mismatch");
  Eigen::VectorXd g = grad;
  if (weight_decay_ != 0.0) g += weight_decay_ * params;
  if (momentum_ != 0.0) {
    if (velocity_.size() != params.size()) velocity_ = Eigen::VectorXd::Zero(params.size());
    velocity_ = momentum_ * velocity_ + g;
    g = velocity_;
  }
  params -= lr_ * g;
}

void Sgd::step_masked(Eigen::VectorXd& params, const Eigen::VectorXd& grad,
                      const Eigen::VectorXd& mask) {
  if (grad.size() != params.size() || mask.size() != params.size()) {
    throw DomainError("Sgd::step_masked: length mismatch");
  }
  Eigen::VectorXd g = grad.cwiseProduct(mask);
  if (weight_decay_ != 0.0) g += weight_decay_ * params.cwiseProduct(mask);
  if (momentum_ != 0.0) {
    if (velocity_.size() != params.size()) velocity_ = Eigen::VectorXd::Zero(params.size());
    velocity_ = (momentum_ * velocity_ + g).cwiseProduct(mask) +
                velocity_.cwiseProduct(Eigen::VectorXd::Ones(mask.size()) - mask);
    g = velocity_.cwiseProduct(mask);
  }
  params -= lr_ * g;
}

}  // namespace shiftlab::optim
