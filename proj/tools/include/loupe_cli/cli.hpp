#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace loupe::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kDataError = 2 };

/// Parses `argv` and runs one subcommand. Progress goes to `out`, failures to
/// `err`. On failure, files the command created under its output directory
/// are removed again.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct OptionSummary {
  std::string name;         // long form, e.g. "--alpha"
  bool takes_value = false; // false for switches
  bool required = false;
  std::string default_text; // as rendered in --help
};

/// Option table per subcommand, read from the same parser `run` uses.
std::map<std::string, std::vector<OptionSummary>> describe_options();

} // namespace loupe::cli
