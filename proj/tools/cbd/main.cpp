// cbd: data preparation, training, experiment runs and reporting.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cbd/corpus.hpp"
#include "cbd/error.hpp"
#include "cbd/evalkit.hpp"
#include "cbd/runs.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

// Thrown for problems detected before any side effect.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw cbd::IoError("cannot write " + path.string());
  out << text;
}

// Config errors carry their key paths; anything else raised while loading a
// config is also a configuration problem.
template <typename Fn>
auto load_config(Fn&& fn) {
  try {
    return fn();
  } catch (const cbd::ConfigError& e) {
    throw UsageError(e.what());
  } catch (const cbd::Error& e) {
    throw UsageError(e.what());
  }
}

struct PrepareArgs {
  std::string input;
  std::string schema;
  std::string out;
  std::string split_spec;
  std::uint64_t seed = 0;
};

int cmd_prepare(const PrepareArgs& a) {
  cbd::SchemaMapping schema;
  if (auto id = cbd::dataset_from_name(a.schema)) {
    schema = cbd::builtin_schema(*id);
  } else if (fs::is_regular_file(a.schema)) {
    schema = load_config([&] { return cbd::load_schema_file(a.schema); });
  } else {
    throw UsageError("--schema: expected D1..D6 or a schema file, got '" + a.schema + "'");
  }
  if (!fs::is_regular_file(a.input)) throw UsageError("--input: file not found: " + a.input);
  const cbd::SplitSpec split = load_config([&] {
    cbd::SplitSpec s = a.split_spec.empty() ? cbd::SplitSpec::default_for(schema.dataset, a.seed)
                                            : cbd::SplitSpec::parse(a.split_spec, a.seed);
    s.validate();
    return s;
  });

  const auto r = cbd::prepare_data(a.input, schema, split, a.out);
  std::cout << "rows read: " << r.rows_read << "\n"
            << "rejected:  " << r.rejected << "\n"
            << "train:     " << r.sizes.train << "\n"
            << "validation:" << ' ' << r.sizes.validation << "\n"
            << "test:      " << r.sizes.test << "\n"
            << "written to " << r.out_dir.string() << "\n";
  return kOk;
}

int cmd_train(const std::string& config, const std::string& out) {
  auto cfg = load_config([&] { return cbd::load_train_config(config); });
  if (!out.empty()) cfg.output_dir = fs::absolute(out);
  for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << "\n";
  if (cfg.learning_rate_defaulted) {
    std::cerr << "note: learning_rate not set, using " << cfg.tune.learning_rate << "\n";
  }
  const auto r = cbd::execute_train(cfg);
  std::cout << "steps:      " << r.steps << "\n"
            << "checkpoint: " << r.checkpoint.string() << "\n"
            << "metrics:    " << r.metrics.string() << "\n"
            << "manifest:   " << r.manifest.string() << "\n";
  return kOk;
}

int cmd_run(const std::string& config, const std::string& out) {
  auto cfg = load_config([&] { return cbd::load_run_config(config); });
  if (!out.empty()) cfg.output_dir = fs::absolute(out);
  const auto r = cbd::execute_run(cfg);
  const auto& rep = r.report;
  std::cout << "run id:    " << r.run_id << "\n"
            << "directory: " << r.dir.string() << "\n"
            << "records:   " << r.predictions.size() << "\n"
            << "macro-F1:  " << rep.macro_f1 << "\n"
            << "accuracy:  " << rep.accuracy << "\n";
  if (rep.n_parse_failures + rep.n_backend_errors > 0) {
    std::cout << "unscored:  " << rep.n_parse_failures << " parse failure(s), "
              << rep.n_backend_errors << " backend error(s) ["
              << cbd::failure_policy_name(rep.policy) << "]\n";
  }
  return kOk;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<fs::path> roots(runs.begin(), runs.end());
  const auto dirs = cbd::find_runs(roots);
  std::vector<std::pair<cbd::GridKey, cbd::EvalReport>> reports;
  for (const auto& d : dirs) {
    auto run = cbd::load_run(d);
    reports.emplace_back(run.key, run.report);
  }
  const cbd::Grid grid = cbd::render_grid(reports);

  fs::path text_path = out;
  fs::path csv_path = out;
  if (text_path.extension() == ".csv") {
    text_path.replace_extension(".txt");
  } else {
    csv_path.replace_extension(".csv");
  }
  write_text(text_path, grid.text);
  write_text(csv_path, grid.csv);
  std::cout << grid.text;
  std::cout << "written to " << text_path.string() << " and " << csv_path.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Aggression-conditioned cyberbullying detection toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cbd 0.1.0");

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare-data", "Normalize and split a raw dataset");
  prepare->add_option("--input", prep.input, "Raw delimited dataset")->required();
  prepare->add_option("--schema", prep.schema, "D1..D6 or a schema JSON file")->required();
  prepare->add_option("--out", prep.out, "Output directory")->required();
  prepare->add_option("--split-spec", prep.split_spec,
                      "e.g. train=0.8,validation=0.1,test=0.1 or train=0.75,validation=2000");
  prepare->add_option("--seed", prep.seed, "Split seed");

  std::string train_config, train_out;
  auto* train = app.add_subcommand("train", "Train LoRA or multi-task adapters on the toy network");
  train->add_option("--config", train_config, "Training config (JSON)")->required();
  train->add_option("--out", train_out, "Output directory (overrides output_dir)");

  std::string run_config, run_out;
  auto* run = app.add_subcommand("run", "Run an experiment and write a run directory");
  run->add_option("--config", run_config, "Run config or a previous manifest.json")->required();
  run->add_option("--out", run_out, "Runs directory (overrides output_dir)");

  std::vector<std::string> report_runs;
  std::string report_out;
  auto* report = app.add_subcommand("report", "Render the macro-F1 comparison grid");
  report->add_option("--runs", report_runs, "Run directories or directories of runs")
      ->required()
      ->expected(1, -1);
  report->add_option("--out", report_out, "Text grid path; a .csv sibling is written too")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*prepare) return cmd_prepare(prep);
    if (*train) return cmd_train(train_config, train_out);
    if (*run) return cmd_run(run_config, run_out);
    if (*report) return cmd_report(report_runs, report_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
