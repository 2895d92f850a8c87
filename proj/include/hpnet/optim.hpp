#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hpnet/tensor.hpp"

namespace hpnet {

/// Momentum SGD over a registry of named parameters.
///
/// velocity <- momentum * velocity + grad;  param <- param - lr * velocity.
/// Frozen parameters are skipped entirely: their values and velocity
/// buffers are never touched.
class SgdOptimizer {
 public:
  SgdOptimizer(double learning_rate, double momentum = 0.9);

  void add_parameter(std::string name, Tensor param);
  void set_frozen(const std::string& name, bool frozen);
  /// Freezes every parameter whose name starts with prefix.
  void set_frozen_prefix(const std::string& prefix, bool frozen);
  bool is_frozen(const std::string& name) const;

  void zero_grad();
  void step();

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double lr);
  double momentum() const { return momentum_; }
  const std::vector<double>& velocity(const std::string& name) const;

 private:
  struct Entry {
    std::string name;
    Tensor param;
    std::vector<double> velocity;
    bool frozen = false;
  };
  Entry& find(const std::string& name);
  const Entry& find(const std::string& name) const;

  double learning_rate_;
  double momentum_;
  std::vector<Entry> entries_;
};

}  // namespace hpnet
