// qeebm: run, ablate, gradcheck, plotdata, config.
// Exit status: 0 ok, 1 run failure, 2 configuration or usage error.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qeebm/config.hpp"
#include "qeebm/gradcheck.hpp"
#include "qeebm/runner.hpp"

namespace {

qeebm::RunConfig load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  qeebm::RunConfig cfg = path.empty() ? qeebm::RunConfig{} : qeebm::load_config(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw qeebm::ConfigError(kv, "override must look like key=value");
    qeebm::apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  qeebm::validate(cfg);
  return cfg;
}

int gradcheck(const qeebm::GradcheckOptions& opts) {
  const auto rep = qeebm::run_gradcheck(opts);
  std::printf("%-20s %6s %8s %12s\n", "check", "cases", "failed", "worst_rel");
  for (const auto& e : rep.entries)
    std::printf("%-20s %6d %8d %12.3e\n", e.name.c_str(), e.cases, e.failures, e.worst_rel);
  for (const auto& e : rep.entries)
    if (e.failures > 0)
      std::printf("FAIL %s: seed %llu case %llu: %s\n", e.name.c_str(), static_cast<unsigned long long>(opts.seed),
                  static_cast<unsigned long long>(e.first_failing_case), e.detail.c_str());
  std::printf("gradcheck %s: %zu checks, rtol %.0e, h %.0e, %.1f s\n", rep.ok() ? "passed" : "FAILED",
              rep.entries.size(), opts.rtol, opts.h, rep.seconds);
  return rep.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-based training of a toy translation model with a quality-estimation scorer"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  int jobs = 0;

  auto* run = app.add_subcommand("run", "pretrain the scorer if needed, train, and write metrics");
  run->add_option("config", config_path, "key=value config file")->check(CLI::ExistingFile);
  run->add_option("--set", sets, "override a config key (key=value), repeatable");

  auto* ablate = app.add_subcommand("ablate", "run the 16-row ablation grid over several seeds");
  ablate->add_option("config", config_path, "key=value config file")->check(CLI::ExistingFile);
  ablate->add_option("--set", sets, "override a config key (key=value), repeatable");
  ablate->add_option("--jobs", jobs, "parallel workers (overrides the jobs key)")->check(CLI::PositiveNumber);

  qeebm::GradcheckOptions gc;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and loss");
  grad->add_option("--inject-fault", gc.inject_fault, "corrupt the backward rule of this op or loss");
  grad->add_option("--cases", gc.cases, "random instances per check")->check(CLI::PositiveNumber);
  grad->add_option("--seed", gc.seed, "instance seed");
  grad->add_option("--only", gc.only, "restrict to these checks");
  bool list = false;
  grad->add_flag("--list", list, "print the check names and exit");

  std::vector<std::string> inputs;
  std::string plot_out = "plotdata";
  auto* plot = app.add_subcommand("plotdata", "turn metrics JSONL files into per-run CSV series");
  plot->add_option("inputs", inputs, "metrics.jsonl files")->required();
  plot->add_option("--out", plot_out, "output directory");

  auto* config = app.add_subcommand("config", "print every config key with its default and meaning");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) return qeebm::cmd_run(load_with_overrides(config_path, sets), std::cout, std::cerr);
    if (*ablate) {
      auto cfg = load_with_overrides(config_path, sets);
      if (jobs > 0) cfg.jobs = jobs;
      return qeebm::cmd_ablate(cfg, std::cout, std::cerr);
    }
    if (*grad) {
      if (list) {
        for (const auto& n : qeebm::gradcheck_names()) std::cout << n << "\n";
        return 0;
      }
      return gradcheck(gc);
    }
    if (*plot) {
      std::vector<std::filesystem::path> paths(inputs.begin(), inputs.end());
      return qeebm::cmd_plotdata(paths, plot_out, std::cout, std::cerr);
    }
    if (*config) {
      std::cout << qeebm::render_config(qeebm::RunConfig{});
      return 0;
    }
  } catch (const qeebm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
