#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace widecorrect {

inline constexpr double kGradcheckStep = 1e-3;
inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckToleranceEndToEnd = 1e-3;

struct GradcheckResult {
    std::string module;
    int checked = 0;           // coordinates compared
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::string worst;         // label of the worst coordinate

    bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

/// Module names accepted by run_gradcheck, in suite order.
const std::vector<std::string>& gradcheck_modules();

/// Central finite differences (float64) against the analytic gradients of a
/// random linear functional of the module output. The error of one coordinate
/// is |analytic - numeric| / max(|analytic|, |numeric|, floor), where floor is
/// 1e-3 of the largest gradient magnitude among the coordinates of that check.
GradcheckResult run_gradcheck(const std::string& module, std::uint64_t seed = 0);

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace widecorrect
