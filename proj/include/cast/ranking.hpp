#pragma once

#include <span>
#include <vector>

namespace cast {

// 0-based ascending positional ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

}  // namespace cast
