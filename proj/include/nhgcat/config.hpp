#pragma once

#include <string>
#include <string_view>

#include "nhgcat/evaluation.hpp"

namespace nhgcat {

// Preset defaults for the cohort geometry; "desk" or "full".
Experiment preset_experiment(std::string_view preset, std::size_t regions, std::size_t timepoints);

// JSON text of the fully resolved experiment.
std::string experiment_json(const Experiment& experiment);

// Starts from `base` and overwrites every key present in the JSON document;
// unknown keys are rejected. `source` names the document in error messages.
Experiment merge_experiment(const Experiment& base, std::string_view json_text, std::string_view source);

}  // namespace nhgcat
