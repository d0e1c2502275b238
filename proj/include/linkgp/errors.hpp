#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace linkgp {

/// Bad shapes, out-of-range parameters, malformed inputs.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Base for failures that come from the numbers rather than the caller.
class NumericalFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Cholesky failed even at the largest jitter on the ladder.
class FactorizationFailure : public NumericalFailure {
public:
    FactorizationFailure(const std::string& what, std::vector<double> attempted)
        : NumericalFailure(what), attempted_jitters(std::move(attempted)) {}
    std::vector<double> attempted_jitters;
};

class InsufficientData : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

class FitFailure : public NumericalFailure {
public:
    FitFailure(const std::string& what, std::vector<std::string> diagnostics)
        : NumericalFailure(what), restart_diagnostics(std::move(diagnostics)) {}
    std::vector<std::string> restart_diagnostics;
};

/// Propagated variance blew past the guard threshold.
class DivergenceError : public NumericalFailure {
public:
    DivergenceError(const std::string& what, long step)
        : NumericalFailure(what), step_index(step) {}
    long step_index;
};

/// Adaptive step size collapsed below the representable minimum.
class StiffnessError : public NumericalFailure {
public:
    StiffnessError(const std::string& what, double t)
        : NumericalFailure(what), time(t) {}
    double time;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace linkgp
