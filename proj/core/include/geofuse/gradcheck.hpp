#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "geofuse/params.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

struct GradCheckReport {
    std::string name;
    double max_rel_err = 0.0;
    std::string worst_param;
    bool pass = false;
};

/// Builds the scalar loss inside the supplied binder's graph. Called many
/// times with perturbed parameters; must be deterministic.
using LossBuilder = std::function<Value(ParamBinder&)>;

/// Compares reverse-mode gradients against central finite differences over
/// every scalar of every listed parameter. Relative error metric:
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckReport finite_diff_check(const std::string& name, const ParamRefs& params, const LossBuilder& build,
                                  double fd_step, double tol,
                                  std::optional<std::pair<OpKind, double>> corrupt_vjp = {});

/// The standard verification set: every differentiable operation and both
/// fusion pipelines, each on a micro instance, ending with the full
/// evidence-query model under a cross-entropy loss.
std::vector<GradCheckReport> gradcheck_suite(double tol = 1e-4, const NumericsConfig& cfg = {});

}  // namespace geofuse
