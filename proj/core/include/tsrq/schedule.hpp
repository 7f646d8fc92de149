#pragma once

// Hardening schedules: the cumulative percentage of rounding variables
// frozen after each outer iteration. Values are percentages in [0,100],
// non-decreasing, with the final entry forced to 100 by the optimizer.

#include <string>
#include <vector>

namespace tsrq {

// P_k = 100 * (1 - exp(-t*k/K)) for k = 1..K
std::vector<double> make_exponential_schedule(int iters, double temperature);

// explicit percentage list; validated non-decreasing and within [0,100]
std::vector<double> make_handcrafted_schedule(const std::vector<double>& pcts);

// "exp:t=4,K=20" or "list:10,30,50,70,85,95,100"
std::vector<double> parse_schedule(const std::string& text);

}  // namespace tsrq
