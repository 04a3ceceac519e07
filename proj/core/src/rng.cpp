#include "bmlm/rng.hpp"

#include <cmath>
#include <numbers>

namespace bmlm {

std::uint64_t Rng::uniform_below(std::uint64_t bound) {
    // Reject the tail so every residue is equally likely.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % bound;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // 1 - u keeps the log argument in (0, 1].
    const double u = 1.0 - uniform();
    const double theta = 2.0 * std::numbers::pi * uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

}  // namespace bmlm
