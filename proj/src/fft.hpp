#pragma once

#include <complex>
#include <span>
#include <vector>

namespace nhgcat::detail {

// Real-to-half-complex transform of length n (n/2 + 1 bins), unnormalised.
std::vector<std::complex<double>> rfft(std::span<const double> x);

// Inverse of rfft, scaled so irfft(rfft(x), n) == x.
std::vector<double> irfft(std::span<const std::complex<double>> bins, std::size_t n);

}  // namespace nhgcat::detail
