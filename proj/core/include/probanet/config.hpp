#pragma once

// Flat `key = value` experiment files. Every SimConfig and TrainConfig field
// has exactly one key; '#' starts a comment; blank lines are ignored. Keys
// that are absent keep the struct defaults.

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "probanet/sim.hpp"
#include "probanet/training.hpp"

namespace probanet {

struct ExperimentConfig {
    SimConfig sim;
    TrainConfig train;

    /// Field-level checks plus the cross-field ones (channels divisible by r).
    /// Throws ConfigError.
    void validate() const;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

struct ConfigKey {
    std::string name;
    std::string description;
};

/// All recognised keys in file order.
const std::vector<ConfigKey>& config_keys();

/// Throws ConfigError carrying the 1-based line number for malformed lines,
/// unknown or repeated keys and unparsable values. The result is validated.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config(std::string_view text);
/// Throws IoError if the file cannot be opened.
ExperimentConfig load_config(const std::string& path);

/// Every key, one per line, with shortest round-trip number formatting;
/// parse_config(format_config(c)) == c.
std::string format_config(const ExperimentConfig& config);

std::string to_string(VarianceTarget target);
std::string to_string(VarianceScope scope);

}  // namespace probanet
