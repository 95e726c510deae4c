#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace poisonlab {

// Parse and execute one command-line invocation (program name excluded).
// Exit statuses: 0 success, 2 configuration/usage error, 3 numeric failure,
// 1 anything else. Errors print one machine-parsable line to stderr.
int dispatch(const std::vector<std::string>& args);

// One CSV row per report, sorted by (dataset, model), with the summary-table
// column order. Throws IoError naming the offending file on schema mismatch.
std::string aggregate_reports(const std::vector<std::filesystem::path>& paths);

}  // namespace poisonlab
