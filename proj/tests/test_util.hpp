#pragma once

#include <filesystem>
#include <string>

#include "starvc/numerics.hpp"

namespace starvc::testing {

using num::BasicTensor;
using num::Tape;
using num::Var;

/// sum(y * w) with fixed pseudo-random weights, to give every output
/// coordinate a distinct upstream gradient.
template <class T>
Var<T> weighted_sum(Var<T> y, std::uint64_t seed) {
    Rng rng(seed);
    auto w = BasicTensor<T>::randn(y.shape(), rng);
    return num::sum(num::mul(y, y.tape->constant(std::move(w))));
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("starvc_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace starvc::testing
