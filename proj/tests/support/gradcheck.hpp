#pragma once

#include <random>
#include <string>
#include <vector>

#include "ddec/training.hpp"

namespace ddec::testing {

struct TensorCheck {
  std::string name;
  Index sampled = 0;
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
  double analytic_norm = 0.0;
};

/// Compares batch_loss_and_grad against central differences of batch_loss on
/// `per_tensor` entries drawn from every tensor (all entries when the tensor
/// is smaller).
std::vector<TensorCheck> gradient_check(Model<double>& model, const Batch& batch, double eps, Index per_tensor,
                                        std::mt19937_64& rng, double floor = 1e-9);

}  // namespace ddec::testing
