#pragma once

#include <string>
#include <vector>

#include "scriptgen/model.hpp"

namespace scriptgen::testing {

struct TensorError {
  std::string name;
  double relative_error = 0.0;  // |g - g_fd| / max(|g| + |g_fd|, 1e-6), Frobenius norms
  double analytic_norm = 0.0;
};

double loss_value(const Model& model, const ModelInput& input, double lambda, double tau,
                  const GateOverrides& gates = {});

/// Central differences for every scalar of every tensor.
std::vector<TensorError> check_gradients(Model& model, const ModelInput& input, double lambda, double tau,
                                         double eps = 1e-4);

}  // namespace scriptgen::testing
