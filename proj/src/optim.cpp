#include "hpnet/optim.hpp"

#include <stdexcept>

namespace hpnet {

SgdOptimizer::SgdOptimizer(double learning_rate, double momentum)
    : learning_rate_(learning_rate), momentum_(momentum) {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("SgdOptimizer: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("SgdOptimizer: momentum must lie in [0,1)");
  }
}

void SgdOptimizer::add_parameter(std::string name, Tensor param) {
  param.set_requires_grad(true);
  std::vector<double> velocity(param.numel(), 0.0);
  entries_.push_back(Entry{std::move(name), std::move(param), std::move(velocity), false});
}

SgdOptimizer::Entry& SgdOptimizer::find(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e;
  throw std::out_of_range("SgdOptimizer: unknown parameter " + name);
}

const SgdOptimizer::Entry& SgdOptimizer::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw std::out_of_range("SgdOptimizer: unknown parameter " + name);
}

void SgdOptimizer::set_frozen(const std::string& name, bool frozen) { find(name).frozen = frozen; }

void SgdOptimizer::set_frozen_prefix(const std::string& prefix, bool frozen) {
  for (auto& e : entries_)
    if (e.name.starts_with(prefix)) e.frozen = frozen;
}

bool SgdOptimizer::is_frozen(const std::string& name) const { return find(name).frozen; }

void SgdOptimizer::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("SgdOptimizer: learning rate must be positive");
  learning_rate_ = lr;
}

const std::vector<double>& SgdOptimizer::velocity(const std::string& name) const {
  return find(name).velocity;
}

void SgdOptimizer::zero_grad() {
  for (auto& e : entries_) e.param.zero_grad();
}

void SgdOptimizer::step() {
  for (auto& e : entries_) {
    if (e.frozen || !e.param.has_grad()) continue;
    auto data = e.param.data();
    auto grad = e.param.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      e.velocity[i] = momentum_ * e.velocity[i] + grad[i];
      data[i] -= learning_rate_ * e.velocity[i];
    }
  }
}

}  // namespace hpnet
