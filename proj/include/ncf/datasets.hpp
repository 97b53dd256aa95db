#pragma once

#include <cstdint>

#include "ncf/models.hpp"

namespace ncf {

/// Teacher H*(x) = 5 max(0, x1)^2 + 4 max(0, -x1)^2.
double teacher_label(const Vec& x);

/// n unit inputs at angles 2 pi k / n, teacher labels.
Dataset uniform_circle_dataset(int n = 50);

/// n unit inputs at seeded uniform random angles, teacher labels.
Dataset random_circle_dataset(int n, std::uint64_t seed);

}  // namespace ncf
