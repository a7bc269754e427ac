#pragma once

#include <stdexcept>
#include <string>

namespace qrnn {

// Operand dimensions do not conform.
struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Input has no usable value range (constant matrix, all-zero statistic).
struct degenerate_input_error : std::domain_error {
    using std::domain_error::domain_error;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct config_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Training aborted (NaN loss/gradient, divergence).
struct training_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace qrnn
