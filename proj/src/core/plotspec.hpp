#pragma once

#include <string>
#include <vector>

namespace ima::plotspec {

/// Chart kinds with a known CSV schema.
std::vector<std::string> plot_kinds();

/// Declarative plain-text chart description for a suite CSV. Validates the
/// file's header against the kind's schema and names the first missing
/// column; never renders pixels.
std::string export_plot_spec(const std::string& csv_path, const std::string& kind);

/// Same, written to a file (atomically).
void write_plot_spec(const std::string& csv_path, const std::string& kind,
                     const std::string& out_path);

}  // namespace ima::plotspec
