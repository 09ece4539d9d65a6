#pragma once

#include <string>
#include <string_view>

#include "diffpath/error.hpp"
#include "diffpath/tensor.hpp"

namespace diffpath {

/// A noise predictor eps_theta(x_t, t). Implementations must return a finite
/// tensor with the dims of x_t and must be safe for concurrent predict calls.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;

  /// `sample_id` identifies the sample whose trajectory is being evaluated.
  /// Only replaying predictors use it.
  virtual Tensor predict(const Tensor& xt, int t, std::string_view sample_id) const = 0;

  virtual std::string name() const = 0;
  virtual std::string training_distribution() const { return "unknown"; }
};

/// Calls the predictor and enforces the output contract.
inline Tensor checked_predict(const NoisePredictor& predictor, const Tensor& xt, int t,
                              std::string_view sample_id) {
  Tensor out = predictor.predict(xt, t, sample_id);
  if (!out.same_dims(xt)) {
    throw ContractError("predictor '" + predictor.name() + "' returned dims " + dims_to_string(out.dims()) +
                        " for input dims " + dims_to_string(xt.dims()));
  }
  if (!out.all_finite()) {
    throw ContractError("predictor '" + predictor.name() + "' returned non-finite values at t=" +
                        std::to_string(t));
  }
  return out;
}

/// Predicts zero noise everywhere. Useful as a baseline.
class ZeroPredictor final : public NoisePredictor {
 public:
  Tensor predict(const Tensor& xt, int, std::string_view) const override { return Tensor(xt.dims()); }
  std::string name() const override { return "zero"; }
};

}  // namespace diffpath
