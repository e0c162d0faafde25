// Command-line front end: one subcommand per pipeline stage plus "all",
// "ablate" and "config".

#include "retrikt/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace retrikt;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> m, n;
  std::optional<double> top_p;
  std::vector<std::string> components;
  std::vector<std::uint64_t> seeds;
};

RunConfig resolve_config(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig() : load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.m) c.store.m = *o.m;
  if (o.n) c.store.n = *o.n;
  if (o.top_p) c.store.top_p = *o.top_p;
  c.validate();
  return c;
}

std::filesystem::path out_dir(const Options& o, const RunConfig& c) {
  return o.out.empty() ? std::filesystem::path("runs") / ("seed" + std::to_string(c.seed)) : std::filesystem::path(o.out);
}

void add_common(CLI::App* cmd, Options& o, bool config_required) {
  cmd->add_option("--config", o.config_path, "configuration file (key = value lines)")->required(config_required);
  cmd->add_option("--seed", o.seed, "run seed (overrides run.seed)");
  cmd->add_option("--out", o.out, "run directory (default runs/seed<S>)");
  cmd->add_option("--m", o.m, "generation repetitions (overrides store.m)");
  cmd->add_option("--n", o.n, "samples per repetition (overrides store.n)");
  cmd->add_option("--top-p", o.top_p, "nucleus threshold (overrides store.top_p)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-store distillation pipeline"};
  app.require_subcommand(1);
  Options o;
  std::string failing = "retrikt";

  for (Stage s : all_stages()) {
    auto* cmd = app.add_subcommand(stage_name(s), "run stage " + stage_name(s));
    add_common(cmd, o, true);
    cmd->callback([&, s] {
      failing = stage_name(s);
      RunConfig c = resolve_config(o);
      run_stage(c, s, s == Stage::report && o.out.empty() ? std::filesystem::path("runs") : out_dir(o, c));
    });
  }

  auto* all = app.add_subcommand("all", "run every stage from prepare-data to evaluate");
  add_common(all, o, true);
  all->callback([&] {
    RunConfig c = resolve_config(o);
    for (Stage s : all_stages()) {
      if (s == Stage::report) break;
      failing = stage_name(s);
      std::cerr << "[" << failing << "]\n";
      run_stage(c, s, out_dir(o, c));
    }
  });

  auto* ablate = app.add_subcommand("ablate", "ablation table over seeds");
  add_common(ablate, o, true);
  ablate->add_option("--components", o.components, "subset of RL R_accuracy R_diversity BP")->delimiter(',');
  ablate->add_option("--seeds", o.seeds, "run seeds")->delimiter(',')->required();
  ablate->callback([&] {
    failing = "ablate";
    RunConfig c = resolve_config(o);
    std::vector<Component> comps;
    for (const auto& s : o.components) comps.push_back(parse_component(s));
    ExperimentReport rep = ablation_matrix(c, comps, o.seeds);
    std::filesystem::path dir = o.out.empty() ? std::filesystem::path("runs") : std::filesystem::path(o.out);
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "ablation.txt") << format_report_table(rep);
    std::ofstream(dir / "ablation.csv") << format_report_csv(rep);
    std::cout << format_report_table(rep);
  });

  auto* show = app.add_subcommand("config", "print the resolved configuration and its hash");
  add_common(show, o, false);
  show->callback([&] {
    failing = "config";
    RunConfig c = resolve_config(o);
    std::cout << serialize_config(c) << "# config_hash " << config_hash(c) << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << failing << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
