#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mpseg {

enum class ErrorKind {
    UnsupportedDatatype,
    MalformedHeader,
    TruncatedFile,
    IoFailure,
    ShapeMismatch,
    MissingModality,
    AngleInfeasible,
    DegenerateAxis,
    ExtentOverflow,
    GeometryMismatch,
    InvalidConfig,
    ShapeError,
    MissingActivations,
    TooFewSubjects,
    LabelOutOfRange,
    EmptyList,
    UnknownLabel,
    TumorDoesNotFit,
    BadCheckpoint,
};

std::string_view to_string(ErrorKind kind);

/// Every failure the library reports carries one of the ErrorKind codes so
/// callers (and tests) can branch on the category instead of the message.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::MissingModality: return "MissingModality";
    case ErrorKind::AngleInfeasible: return "AngleInfeasible";
    case ErrorKind::DegenerateAxis: return "DegenerateAxis";
    case ErrorKind::ExtentOverflow: return "ExtentOverflow";
    case ErrorKind::GeometryMismatch: return "GeometryMismatch";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::MissingActivations: return "MissingActivations";
    case ErrorKind::TooFewSubjects: return "TooFewSubjects";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::EmptyList: return "EmptyList";
    case ErrorKind::UnknownLabel: return "UnknownLabel";
    case ErrorKind::TumorDoesNotFit: return "TumorDoesNotFit";
    case ErrorKind::BadCheckpoint: return "BadCheckpoint";
    }
    return "Unknown";
}

} // namespace mpseg
