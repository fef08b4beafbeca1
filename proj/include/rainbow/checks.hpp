#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace rainbow {

/// One acceptance/property check. `fast` checks run in seconds and form the
/// default `rainbow-lab check` suite; the full set adds the trend checks
/// that train network ensembles.
struct CheckResult {
    std::string name;
    bool pass = false;
    bool fast = false;
    std::string details;
    double seconds = 0.0;
};

/// Runs the verification suite. Experiment-backed checks write their reports
/// under scratch_dir (trained networks are cached there across reruns).
/// Progress lines go to `log`.
std::vector<CheckResult> run_acceptance_checks(const std::string& scratch_dir, bool fast_only,
                                               std::ostream& log);

} // namespace rainbow
