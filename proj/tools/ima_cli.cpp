// Command-line front end. Talks to the library exclusively through the C API
// in ima/ima.h; everything here is argument handling and file plumbing.
//
// Exit status: 0 success, 1 failed run or failed self-check, 2 bad
// configuration or usage.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ima/ima.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Global {
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;
  int threads = 0;  // 0 means one worker per hardware thread
};

struct MixingDel {
  void operator()(ima_mixing* m) const { ima_mixing_free(m); }
};
struct FlowDel {
  void operator()(ima_flow* f) const { ima_flow_free(f); }
};
struct StrDel {
  void operator()(char* s) const { ima_string_free(s); }
};
using MixingPtr = std::unique_ptr<ima_mixing, MixingDel>;
using FlowPtr = std::unique_ptr<ima_flow, FlowDel>;
using StrPtr = std::unique_ptr<char, StrDel>;

// 0 on IMA_OK, otherwise prints the library error and maps config errors to
// exit 2, everything else to exit 1.
int rc_of(ima_status st) {
  if (st == IMA_OK) return 0;
  std::fprintf(stderr, "error: %s\n", ima_last_error());
  return st == IMA_ERR_CONFIG ? 2 : 1;
}

int usage_error(const std::string& msg) {
  std::fprintf(stderr, "error: %s\n", msg.c_str());
  return 2;
}

void show_progress(const char* msg, void*) {
  std::fprintf(stderr, "%s\n", msg);
  std::fflush(stderr);
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

MixingPtr load_mixing_arg(const std::string& path, int& rc) {
  ima_mixing* raw = nullptr;
  rc = rc_of(ima_mixing_load(path.c_str(), &raw));
  return MixingPtr(raw);
}

FlowPtr load_flow_arg(const std::string& path, int& rc) {
  ima_flow* raw = nullptr;
  rc = rc_of(ima_flow_load(path.c_str(), &raw));
  return FlowPtr(raw);
}

bool parse_point(const std::string& text, std::vector<double>& out) {
  out.clear();
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(field, &used));
      while (used < field.size() && std::isspace(static_cast<unsigned char>(field[used]))) ++used;
      if (used != field.size()) return false;
    } catch (const std::exception&) {
      return false;
    }
  }
  return !out.empty();
}

std::string join17(const std::vector<double>& v) {
  std::string s;
  char buf[40];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    if (i) s += ',';
    s += buf;
  }
  return s;
}

int read_file(const std::string& path, std::string& out) {
  std::ifstream f(path);
  if (!f) return usage_error("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  out = ss.str();
  return 0;
}

// Splits an optional config file into flow/train/reg sections. Top-level keys
// other than those three are rejected; section contents are validated by the
// library.
int split_train_config(const std::string& path, json& flow, json& train, json& reg) {
  flow = json::object();
  train = json::object();
  reg = json::object();
  if (path.empty()) return 0;
  std::string text;
  if (int rc = read_file(path, text); rc != 0) return rc;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    return usage_error("config '" + path + "': " + e.what());
  }
  if (!doc.is_object()) return usage_error("config '" + path + "': expected a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key == "flow") {
      flow = value;
    } else if (key == "train") {
      train = value;
    } else if (key == "reg") {
      reg = value;
    } else {
      return usage_error("config '" + path + "': unknown key: " + key);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blind source separation workbench: mixing generation, contrast "
               "evaluation, flow training, recovery metrics, experiment suites."};
  app.require_subcommand(1);
  app.fallthrough();

  Global g;
  app.add_option("--config", g.config, "JSON config file (train, darmois train, suite)");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--seed", g.seed, "master seed")->capture_default_str();
  app.add_option("--threads", g.threads, "worker count for suites and checks (0 = all cores)")
      ->capture_default_str();

  int exit_code = 0;

  // ---- mixing gen / eval ------------------------------------------------

  auto* mixing_cmd = app.add_subcommand("mixing", "ground-truth mixing functions");
  mixing_cmd->require_subcommand(1);
  mixing_cmd->fallthrough();

  int gen_n = 2, gen_depth = 2, gen_samples = 0;
  std::string gen_init = "orthogonal", gen_prior = "standard_normal";
  auto* gen = mixing_cmd->add_subcommand("gen", "sample a random invertible mixing");
  gen->fallthrough();
  gen->add_option("--n", gen_n, "dimension")->capture_default_str();
  gen->add_option("--depth", gen_depth, "layer count")->capture_default_str();
  gen->add_option("--init", gen_init, "orthogonal | uniform")->capture_default_str();
  gen->add_option("--prior", gen_prior, "standard_normal | uniform01")->capture_default_str();
  gen->add_option("--samples", gen_samples, "also write a dataset with this many rows")
      ->capture_default_str();
  gen->callback([&] {
    ima_mixing* raw = nullptr;
    exit_code = rc_of(ima_mixing_generate(gen_n, gen_depth, gen_init.c_str(), g.seed, &raw));
    MixingPtr m(raw);
    if (exit_code) return;
    fs::create_directories(g.out);
    const fs::path dir(g.out);
    const std::string mix_path = (dir / "mixing.json").string();
    exit_code = rc_of(ima_mixing_save(m.get(), mix_path.c_str()));
    if (exit_code) return;
    std::printf("wrote %s\n", mix_path.c_str());
    if (gen_samples > 0) {
      const std::string data_path = (dir / "dataset.csv").string();
      exit_code = rc_of(ima_mixing_dataset_csv(m.get(), gen_prior.c_str(), gen_samples, g.seed,
                                               data_path.c_str()));
      if (exit_code) return;
      std::printf("wrote %s\n", data_path.c_str());
    }
  });

  std::string eval_mixing, eval_point;
  bool eval_inverse = false;
  auto* meval = mixing_cmd->add_subcommand("eval", "map a point through a saved mixing");
  meval->fallthrough();
  meval->add_option("--mixing", eval_mixing, "mixing JSON file")->required();
  meval->add_option("--point", eval_point, "comma-separated coordinates")->required();
  meval->add_flag("--inverse", eval_inverse, "map observation back to sources");
  meval->callback([&] {
    auto m = load_mixing_arg(eval_mixing, exit_code);
    if (exit_code) return;
    std::vector<double> x;
    if (!parse_point(eval_point, x)) {
      exit_code = usage_error("--point must be comma-separated numbers");
      return;
    }
    const int n = ima_mixing_dim(m.get());
    if (static_cast<int>(x.size()) != n) {
      exit_code = usage_error("point has " + std::to_string(x.size()) + " coordinates, mixing has " +
                              std::to_string(n));
      return;
    }
    std::vector<double> y(x.size());
    exit_code = rc_of(eval_inverse ? ima_mixing_inverse(m.get(), x.data(), y.data())
                                   : ima_mixing_forward(m.get(), x.data(), y.data()));
    if (exit_code) return;
    std::printf("%s\n", join17(y).c_str());
  });

  // ---- cima eval --------------------------------------------------------

  auto* cima_cmd = app.add_subcommand("cima", "contrast evaluation");
  cima_cmd->require_subcommand(1);
  cima_cmd->fallthrough();

  std::string cima_mixing, cima_flow, cima_data, cima_prior = "standard_normal";
  int cima_samples = 10000;
  auto* ceval = cima_cmd->add_subcommand(
      "eval", "mean contrast of a mixing (prior samples) or of a flow (dataset rows)");
  ceval->fallthrough();
  ceval->add_option("--mixing", cima_mixing, "mixing JSON file");
  ceval->add_option("--flow", cima_flow, "flow checkpoint JSON file");
  ceval->add_option("--data", cima_data, "dataset CSV (with --flow)");
  ceval->add_option("--prior", cima_prior, "prior for mixing mode")->capture_default_str();
  ceval->add_option("--samples", cima_samples, "sample count for mixing mode")
      ->capture_default_str();
  ceval->callback([&] {
    double value = 0.0, se = 0.0;
    if (!cima_mixing.empty() == !cima_flow.empty()) {
      exit_code = usage_error("pass exactly one of --mixing or --flow");
      return;
    }
    if (!cima_mixing.empty()) {
      auto m = load_mixing_arg(cima_mixing, exit_code);
      if (exit_code) return;
      exit_code = rc_of(ima_mixing_contrast(m.get(), cima_prior.c_str(), cima_samples, g.seed,
                                            &value, &se));
      if (exit_code) return;
      std::printf("cima %.12g stderr %.12g (%d samples)\n", value, se, cima_samples);
    } else {
      if (cima_data.empty()) {
        exit_code = usage_error("--flow needs --data <dataset.csv>");
        return;
      }
      auto f = load_flow_arg(cima_flow, exit_code);
      if (exit_code) return;
      exit_code = rc_of(ima_flow_contrast_csv(f.get(), cima_data.c_str(), &value, &se));
      if (exit_code) return;
      std::printf("cima %.12g stderr %.12g\n", value, se);
    }
  });

  // ---- darmois train / exact2d -----------------------------------------

  auto* darmois_cmd = app.add_subcommand("darmois", "spurious-solution constructions");
  darmois_cmd->require_subcommand(1);
  darmois_cmd->fallthrough();

  std::string dt_mixing, dt_prior = "standard_normal";
  int dt_blocks = 0, dt_width = 0, dt_iterations = 0, dt_batch = 0;
  auto* dtrain = darmois_cmd->add_subcommand(
      "train", "fit a triangular flow by maximum likelihood (a learned conditional-CDF analogue)");
  dtrain->fallthrough();
  dtrain->add_option("--mixing", dt_mixing, "mixing JSON file")->required();
  dtrain->add_option("--prior", dt_prior, "source prior")->capture_default_str();
  dtrain->add_option("--blocks", dt_blocks, "residual blocks");
  dtrain->add_option("--width", dt_width, "hidden width");
  dtrain->add_option("--iterations", dt_iterations, "training iterations");
  dtrain->add_option("--batch", dt_batch, "batch size");

  std::string ex_mixing, ex_prior = "standard_normal";
  int ex_samples = 10000;
  auto* dexact = darmois_cmd->add_subcommand(
      "exact2d", "exact conditional-CDF transform of sampled observations (2-dimensional only)");
  dexact->fallthrough();
  dexact->add_option("--mixing", ex_mixing, "mixing JSON file")->required();
  dexact->add_option("--prior", ex_prior, "source prior")->capture_default_str();
  dexact->add_option("--samples", ex_samples, "observation count")->capture_default_str();
  dexact->callback([&] {
    auto m = load_mixing_arg(ex_mixing, exit_code);
    if (exit_code) return;
    fs::create_directories(g.out);
    const std::string path = (fs::path(g.out) / "darmois.csv").string();
    exit_code =
        rc_of(ima_darmois2d_csv(m.get(), ex_prior.c_str(), ex_samples, g.seed, path.c_str()));
    if (exit_code) return;
    std::printf("wrote %s\n", path.c_str());
  });

  // ---- train ------------------------------------------------------------

  std::string tr_mixing, tr_prior = "standard_normal", tr_kind, tr_base, tr_reg;
  double tr_strength = 0.0;
  int tr_blocks = 0, tr_width = 0, tr_iterations = 0, tr_batch = 0;
  auto* train_cmd = app.add_subcommand("train", "fit a flow to observations of a mixing");
  train_cmd->fallthrough();
  train_cmd->add_option("--mixing", tr_mixing, "mixing JSON file")->required();
  train_cmd->add_option("--prior", tr_prior, "source prior")->capture_default_str();
  train_cmd->add_option("--kind", tr_kind, "flow kind: full | triangular");
  train_cmd->add_option("--base", tr_base, "base density: gaussian | logistic");
  train_cmd->add_option("--blocks", tr_blocks, "residual blocks");
  train_cmd->add_option("--width", tr_width, "hidden width");
  train_cmd->add_option("--iterations", tr_iterations, "training iterations");
  train_cmd->add_option("--batch", tr_batch, "batch size");
  train_cmd->add_option("--reg", tr_reg, "regularizer: none | cima | l1 | l2");
  train_cmd->add_option("--strength", tr_strength, "regularizer strength");

  // Shared by `train` and `darmois train`: assemble section configs from the
  // optional --config file plus flag overrides, then run.
  const auto run_training = [&](const std::string& mixing_path, const std::string& prior,
                                const json& flow_over, const json& reg_over, int iterations,
                                int batch) {
    json flow, train, reg;
    exit_code = split_train_config(g.config, flow, train, reg);
    if (exit_code) return;
    for (const auto& [key, value] : flow_over.items()) flow[key] = value;
    if (!reg_over.empty()) reg = reg_over;
    if (iterations > 0) train["iterations"] = iterations;
    if (batch > 0) train["batch_size"] = batch;
    if (!flow.contains("seed")) flow["seed"] = g.seed;
    if (!train.contains("seed")) train["seed"] = g.seed;

    auto m = load_mixing_arg(mixing_path, exit_code);
    if (exit_code) return;
    const ima_status st =
        ima_train_run(m.get(), prior.c_str(), flow.dump().c_str(), train.dump().c_str(),
                      reg.dump().c_str(), g.out.c_str());
    exit_code = rc_of(st);
    if (st == IMA_OK || st == IMA_ERR_NO_CONVERGENCE) {
      std::printf("wrote %s\n", (fs::path(g.out) / "model.flow.json").string().c_str());
      std::printf("wrote %s\n", (fs::path(g.out) / "trajectory.csv").string().c_str());
    }
  };

  train_cmd->callback([&] {
    json flow_over = json::object();
    if (tr_blocks > 0) flow_over["blocks"] = tr_blocks;
    if (tr_width > 0) flow_over["hidden_width"] = tr_width;
    if (!tr_kind.empty()) flow_over["kind"] = tr_kind;
    if (!tr_base.empty()) flow_over["base"] = tr_base;
    json reg_over = json::object();
    if (!tr_reg.empty()) reg_over = {{"kind", tr_reg}, {"strength", tr_strength}};
    run_training(tr_mixing, tr_prior, flow_over, reg_over, tr_iterations, tr_batch);
  });

  dtrain->callback([&] {
    json flow_over = {{"kind", "triangular"}, {"base", "gaussian"}};
    if (dt_blocks > 0) flow_over["blocks"] = dt_blocks;
    if (dt_width > 0) flow_over["hidden_width"] = dt_width;
    run_training(dt_mixing, dt_prior, flow_over, json{{"kind", "none"}}, dt_iterations, dt_batch);
  });

  // ---- metrics ----------------------------------------------------------

  std::string me_mixing, me_flow, me_prior = "standard_normal";
  int me_samples = 10000;
  auto* metrics_cmd = app.add_subcommand("metrics", "score a flow against the ground truth");
  metrics_cmd->fallthrough();
  metrics_cmd->add_option("--mixing", me_mixing, "mixing JSON file")->required();
  metrics_cmd->add_option("--flow", me_flow, "flow checkpoint JSON file")->required();
  metrics_cmd->add_option("--prior", me_prior, "source prior")->capture_default_str();
  metrics_cmd->add_option("--samples", me_samples, "evaluation sample count")
      ->capture_default_str();
  metrics_cmd->callback([&] {
    auto m = load_mixing_arg(me_mixing, exit_code);
    if (exit_code) return;
    auto f = load_flow_arg(me_flow, exit_code);
    if (exit_code) return;
    char* row = nullptr;
    exit_code = rc_of(ima_metrics_eval(m.get(), me_prior.c_str(), f.get(), me_samples, g.seed,
                                       &row));
    StrPtr owned(row);
    if (exit_code) return;
    std::printf("%s\n%s\n", ima_metrics_header(), owned.get());
  });

  // ---- suite ------------------------------------------------------------

  std::string suite_name;
  bool suite_check = false;
  auto* suite_cmd = app.add_subcommand("suite", "run an experiment suite");
  suite_cmd->fallthrough();
  suite_cmd->add_option("name", suite_name, "preset name (omit when using --config)");
  suite_cmd->add_flag("--check", suite_check, "evaluate the suite's assertions afterwards");
  suite_cmd->callback([&] {
    std::string config_text;
    if (!g.config.empty()) {
      if (!suite_name.empty()) {
        exit_code = usage_error("pass either a suite name or --config, not both");
        return;
      }
      exit_code = read_file(g.config, config_text);
      if (exit_code) return;
    } else if (suite_name.empty()) {
      StrPtr names;
      {
        char* raw = nullptr;
        ima_suite_default_config("?", &raw);  // fails; error text lists valid names
        names = StrPtr(raw);
      }
      exit_code = usage_error(std::string("give a suite name or --config; ") + ima_last_error());
      return;
    }
    int failed = 0;
    char* report = nullptr;
    const bool out_given = app.count("--out") > 0;
    exit_code = rc_of(ima_suite_run(suite_name.empty() ? nullptr : suite_name.c_str(),
                                    config_text.empty() ? nullptr : config_text.c_str(),
                                    out_given ? g.out.c_str() : nullptr,
                                    resolve_threads(g.threads), suite_check ? 1 : 0,
                                    show_progress, nullptr, &failed, &report));
    StrPtr owned(report);
    if (exit_code) return;
    std::fputs(owned.get(), stdout);
    if (failed > 0) exit_code = 1;
  });

  // ---- check ------------------------------------------------------------

  bool check_fast = false, check_deep = false;
  auto* check_cmd = app.add_subcommand("check", "run the acceptance criteria");
  check_cmd->fallthrough();
  check_cmd->add_flag("--fast", check_fast, "only the deterministic property criteria");
  check_cmd->add_flag("--deep", check_deep, "only the desk-scale suite criteria");
  check_cmd->callback([&] {
    if (!check_fast && !check_deep) check_fast = check_deep = true;
    const bool out_given = app.count("--out") > 0;
    const std::string dir = out_given ? g.out : "acceptance_runs";
    int failed = 0;
    char* report = nullptr;
    exit_code = rc_of(ima_check_run(check_fast ? 1 : 0, check_deep ? 1 : 0, dir.c_str(),
                                    resolve_threads(g.threads), show_progress, nullptr, &failed,
                                    &report));
    StrPtr owned(report);
    if (exit_code) return;
    std::fputs(owned.get(), stdout);
    if (failed > 0) exit_code = 1;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  return exit_code;
}
