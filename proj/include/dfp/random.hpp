#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

namespace dfp {

/// Seeded normal source whose output depends only on the mt19937_64 bit
/// stream, so draws agree across standard library implementations.
class NormalSource {
public:
    explicit NormalSource(std::initializer_list<std::uint64_t> seeds) {
        // seed_seq keeps 32-bit words; split each seed so no bits are dropped.
        std::vector<std::uint32_t> words;
        for (auto s : seeds) {
            words.push_back(static_cast<std::uint32_t>(s));
            words.push_back(static_cast<std::uint32_t>(s >> 32));
        }
        std::seed_seq seq(words.begin(), words.end());
        engine_.seed(seq);
    }

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double operator()() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace dfp
