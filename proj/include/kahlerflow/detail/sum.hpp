#pragma once

#include <cstddef>
#include <span>

namespace kahlerflow::detail {

// Pairwise (cascade) summation. Fixed recursion structure, so the result is
// independent of chunking decisions made elsewhere and reproducible run to run.
inline double pairwise_sum(std::span<const double> v) {
    const std::size_t n = v.size();
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += v[i];
        return s;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

template <class F>
inline double pairwise_sum_indexed(std::size_t begin, std::size_t end, F&& f) {
    const std::size_t n = end - begin;
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = begin; i < end; ++i) s += f(i);
        return s;
    }
    const std::size_t mid = begin + n / 2;
    return pairwise_sum_indexed(begin, mid, f) + pairwise_sum_indexed(mid, end, f);
}

} // namespace kahlerflow::detail
