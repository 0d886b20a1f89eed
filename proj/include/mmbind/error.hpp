#pragma once

#include <stdexcept>
#include <string>

namespace mmbind {

/// Invalid user input. `field()` names the offending field or config path.
class ValidationError : public std::invalid_argument {
public:
    ValidationError(std::string field, const std::string& what)
        : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Array or tensor dimensions disagree with what was declared.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unreadable on-disk artifact.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training diverged (NaN/Inf loss) or could not proceed.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, double learning_rate, int epoch)
        : std::runtime_error(what + " (lr=" + std::to_string(learning_rate) +
                             ", epoch=" + std::to_string(epoch) + ")"),
          learning_rate_(learning_rate), epoch_(epoch) {}

    double learning_rate() const noexcept { return learning_rate_; }
    int epoch() const noexcept { return epoch_; }

private:
    double learning_rate_;
    int epoch_;
};

}  // namespace mmbind
