#pragma once

// The `iimt` command line: synth, train {tokenizer|teacher|iimt}, translate,
// evaluate. Exit codes: 0 success, 1 usage or configuration error, 2 partial
// failure, 3 runtime abort.

#include <ostream>
#include <string>
#include <vector>

#include "iimt/config.hpp"

namespace iimt {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitPartial = 2, kExitRuntime = 3 };

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Every recognized configuration key with its default value.
Config default_config();

// defaults < file < --set overrides < --seed. ConfigError on unknown keys.
Config resolve_config(const std::string& config_path, const std::vector<std::string>& sets, const std::string& seed);

}  // namespace iimt
