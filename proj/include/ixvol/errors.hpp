#pragma once

#include <stdexcept>
#include <string>

namespace ixvol {

// Invalid or inconsistent run configuration (bad field, missing file).
// The CLI maps this to exit code 2.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure: arbitrage violation in a price surface, implied-vol
// inversion outside the no-arbitrage band, degenerate correlation, kernel
// degeneracy. Exit code 3.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Interaction-work guardrail tripped. Exit code 4.
class budget_error : public std::runtime_error {
public:
    explicit budget_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace ixvol
