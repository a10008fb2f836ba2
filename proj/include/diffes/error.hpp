#pragma once

#include <stdexcept>
#include <string>

namespace diffes {

enum class ErrorKind {
    InvalidShape,
    SingularHessian,
    InvalidConfig,
    InvalidTimestep,
    TrainingDiverged,
    InvalidInput,
    IncompleteTrajectory,
    InvalidSchedule,
    MissingReference,
    DegenerateActivations,
    CorruptFile,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidShape: return "InvalidShape";
        case ErrorKind::SingularHessian: return "SingularHessian";
        case ErrorKind::InvalidConfig: return "InvalidConfig";
        case ErrorKind::InvalidTimestep: return "InvalidTimestep";
        case ErrorKind::TrainingDiverged: return "TrainingDiverged";
        case ErrorKind::InvalidInput: return "InvalidInput";
        case ErrorKind::IncompleteTrajectory: return "IncompleteTrajectory";
        case ErrorKind::InvalidSchedule: return "InvalidSchedule";
        case ErrorKind::MissingReference: return "MissingReference";
        case ErrorKind::DegenerateActivations: return "DegenerateActivations";
        case ErrorKind::CorruptFile: return "CorruptFile";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), detail_(what) {}

    ErrorKind kind() const noexcept { return kind_; }
    /// Message without the kind prefix, for re-throwing with added context.
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    std::string detail_;
};

}  // namespace diffes
