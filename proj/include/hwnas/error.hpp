#ifndef HWNAS_ERROR_HPP
#define HWNAS_ERROR_HPP

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hwnas {

/// Failure categories shared by every module. Each thrown hwnas::Error carries one.
enum class Errc {
    InvalidArgument,
    ShapeMismatch,
    CycleDetected,
    UnknownNode,
    ParseError,
    EmptyGraph,
    DivisionByZero,
    DimensionMismatch,
    EmptyInput,
    DegenerateDensity,
    NonFiniteActivation,
    DivergenceDetected,
    NotAMorphism,
    NoFeasibleMutation,
    CalibrationEmpty,
    MissingFormat,
    NotQuantized,
    EmptyTestSet,
    DegenerateInput,
    ConfigError,
    IncompleteRun,
    IoError,
    ChecksumMismatch,
};

inline constexpr std::string_view errc_name(Errc c) noexcept
{
    switch (c) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::CycleDetected: return "CycleDetected";
    case Errc::UnknownNode: return "UnknownNode";
    case Errc::ParseError: return "ParseError";
    case Errc::EmptyGraph: return "EmptyGraph";
    case Errc::DivisionByZero: return "DivisionByZero";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::DegenerateDensity: return "DegenerateDensity";
    case Errc::NonFiniteActivation: return "NonFiniteActivation";
    case Errc::DivergenceDetected: return "DivergenceDetected";
    case Errc::NotAMorphism: return "NotAMorphism";
    case Errc::NoFeasibleMutation: return "NoFeasibleMutation";
    case Errc::CalibrationEmpty: return "CalibrationEmpty";
    case Errc::MissingFormat: return "MissingFormat";
    case Errc::NotQuantized: return "NotQuantized";
    case Errc::EmptyTestSet: return "EmptyTestSet";
    case Errc::DegenerateInput: return "DegenerateInput";
    case Errc::ConfigError: return "ConfigError";
    case Errc::IncompleteRun: return "IncompleteRun";
    case Errc::IoError: return "IoError";
    case Errc::ChecksumMismatch: return "ChecksumMismatch";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code)
    {
    }
    Error(Errc code, const std::string& what, std::size_t position)
        : std::runtime_error(std::string(errc_name(code)) + " at byte " + std::to_string(position) + ": " + what),
          code_(code), position_(position)
    {
    }

    Errc code() const noexcept { return code_; }
    /// Byte offset for parse failures, when known.
    std::optional<std::size_t> position() const noexcept { return position_; }

private:
    Errc code_;
    std::optional<std::size_t> position_;
};

} // namespace hwnas

#endif // HWNAS_ERROR_HPP
