#include "plotspec.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "errors.hpp"

namespace ima::plotspec {
namespace {

struct KindSpec {
  const char* name;
  // Columns the chart reads. Checked against the CSV header in this order so
  // the error always names the first hole.
  std::vector<const char*> columns;
  const char* body;
};

const std::vector<KindSpec>& kinds() {
  static const std::vector<KindSpec> table = {
      {"fig1",
       {"L", "seed", "cima_true", "cima_darmois", "kld_darmois"},
       "x: L\n"
       "group: seed\n"
       "panel: contrast\n"
       "  series: cima_true stat: median style: line\n"
       "  series: cima_darmois stat: median style: line\n"
       "panel: fit\n"
       "  series: kld_darmois stat: median style: line\n"},
      {"figA_uniform",
       {"L", "seed", "cima_true", "cima_darmois", "kld_darmois"},
       "x: L\n"
       "group: seed\n"
       "panel: contrast\n"
       "  series: cima_true stat: median style: line\n"
       "  series: cima_darmois stat: median style: line\n"},
      {"recovery",
       {"mixing_seed", "L", "reg_kind", "strength", "run_seed", "mcc", "cima"},
       "x: L\n"
       "hue: reg_kind+strength\n"
       "group: run_seed\n"
       "panel: recovery\n"
       "  series: mcc stat: box style: box\n"
       "panel: contrast\n"
       "  series: cima stat: box style: box\n"},
      {"reg_comparison",
       {"reg_kind", "strength", "run_seed", "mcc", "cima"},
       "x: reg_kind+strength\n"
       "group: run_seed\n"
       "panel: recovery\n"
       "  series: mcc stat: box style: box\n"
       "panel: contrast\n"
       "  series: cima stat: box style: box\n"},
      {"dynamics",
       {"reg_kind", "strength", "seed", "loglik_first", "loglik_last",
        "cima_first", "cima_last"},
       "x: reg_kind+strength\n"
       "group: seed\n"
       "panel: contrast-change\n"
       "  series: cima_last-cima_first stat: paired style: slope\n"
       "panel: likelihood-change\n"
       "  series: loglik_last-loglik_first stat: paired style: slope\n"},
      {"trajectory",
       {"iteration", "loss", "loglik", "cima", "cima_stderr"},
       "x: iteration\n"
       "panel: objective\n"
       "  series: loglik stat: raw style: line\n"
       "panel: contrast\n"
       "  series: cima stat: raw band: cima_stderr style: line+band\n"},
  };
  return table;
}

std::vector<std::string> split_csv_header(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

std::vector<std::string> plot_kinds() {
  std::vector<std::string> names;
  for (const auto& k : kinds()) names.push_back(k.name);
  return names;
}

std::string export_plot_spec(const std::string& csv_path, const std::string& kind) {
  const KindSpec* spec = nullptr;
  for (const auto& k : kinds())
    if (kind == k.name) spec = &k;
  if (!spec) {
    std::string known;
    for (const auto& k : kinds()) {
      if (!known.empty()) known += ", ";
      known += k.name;
    }
    throw ConfigError("plot spec: unknown kind '" + kind + "' (known: " + known + ")");
  }

  std::ifstream in(csv_path);
  if (!in) throw ConfigError("plot spec " + kind + ": cannot open " + csv_path);
  std::string header;
  std::getline(in, header);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const auto present = split_csv_header(header);
  for (const char* col : spec->columns) {
    bool found = false;
    for (const auto& p : present)
      if (p == col) found = true;
    if (!found)
      throw ConfigError("plot spec " + kind + ": csv is missing column " +
                        std::string(col));
  }

  std::string out;
  out += "plot: " + kind + "\n";
  out += "source: " + std::filesystem::path(csv_path).filename().string() + "\n";
  out += spec->body;
  return out;
}

void write_plot_spec(const std::string& csv_path, const std::string& kind,
                     const std::string& out_path) {
  const std::string body = export_plot_spec(csv_path, kind);
  const std::string tmp = out_path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("plot spec: cannot write " + tmp);
    out << body;
  }
  std::filesystem::rename(tmp, out_path);
}

}  // namespace ima::plotspec
