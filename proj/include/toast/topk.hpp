#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "toast/error.hpp"

namespace toast {

// max(1, round(ratio * dim)), capped at dim.
inline std::size_t kept_count(double ratio, std::size_t dim) {
    const auto k = static_cast<std::size_t>(std::max(0L, std::lround(ratio * static_cast<double>(dim))));
    return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(dim, 1));
}

// Indices of the k largest scores, returned in ascending index order.
// Equal scores prefer the lower index.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> scores, std::size_t k) {
    if (k > scores.size()) throw InputError("top_k: k exceeds the number of scores");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace toast
