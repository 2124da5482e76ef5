#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace ixvol {

// Philox4x32-10 counter-based generator. A draw is a pure function of
// (key, counter), so Gaussian streams indexed by (path, step, channel) are
// reproducible for any execution order or worker count.
namespace philox {

inline constexpr std::uint32_t kMul0 = 0xD2511F53u;
inline constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
inline constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
inline constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void round_once(std::array<std::uint32_t, 4>& c, std::uint32_t k0, std::uint32_t k1) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
    const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
    const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
    c = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
}

inline std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> counter,
                                          std::uint32_t key0, std::uint32_t key1) {
    for (int r = 0; r < 10; ++r) {
        round_once(counter, key0, key1);
        key0 += kWeyl0;
        key1 += kWeyl1;
    }
    return counter;
}

// Map 64 random bits to (0,1), never returning an endpoint.
inline double to_open01(std::uint64_t u) {
    return (static_cast<double>(u >> 11) + 0.5) * 0x1.0p-53;
}

} // namespace philox

// Deterministic map (path, step, channel) -> standard normal draw.
// Channel 0 is the systemic/index Brownian motion; channels 1..M are the
// per-stock idiosyncratic motions (or the extra factor of a scheme).
// path_offset shifts the path index so a long run can be produced in batches
// that reproduce the unbatched stream.
struct NoisePlan {
    std::uint64_t seed = 0;
    std::uint64_t path_offset = 0;

    double normal(std::uint64_t path, std::uint32_t step, std::uint32_t channel) const {
        const std::uint64_t p = path + path_offset;
        const std::array<std::uint32_t, 4> ctr = {
            static_cast<std::uint32_t>(p),
            static_cast<std::uint32_t>(p >> 32),
            step,
            channel,
        };
        const auto b = philox::block(ctr, static_cast<std::uint32_t>(seed),
                                     static_cast<std::uint32_t>(seed >> 32));
        const std::uint64_t u = (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
        const std::uint64_t v = (static_cast<std::uint64_t>(b[2]) << 32) | b[3];
        const double u1 = philox::to_open01(u);
        const double u2 = philox::to_open01(v);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }
};

} // namespace ixvol
