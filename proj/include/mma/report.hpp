#pragma once

// Rendering of transfer reports and iteration logs.

#include <string>
#include <vector>

#include "mma/eval_harness.hpp"
#include "mma/mutual_trainer.hpp"

namespace mma {

// Fixed-width table; the overall row is recomputed from the target rows.
std::string render_report_table(const TransferReport& report);

std::string iterations_csv(const std::vector<IterationRecord>& records);

// Accuracy (percent) against iteration: surrogate clean/adversarial and,
// when recorded, the held-out target's clean/adversarial curves.
std::string accuracy_plot_svg(const std::vector<IterationRecord>& records,
                              const std::string& title);

}  // namespace mma
