// Command-line front end: thinlayer <command> --config <path> [--out <dir>]
// [--mesh-out <path>] [--dump-system <path>] [--threads N].
//
// Exit codes: 0 success, 2 schema or input error, 3 numerical failure or a
// failed invariant, 1 anything else (for example an unwritable output path).

#include <CLI11.hpp>

#include <iostream>

#include "thinlayer/harness.hpp"

namespace th = thinlayer::harness;

int main(int argc, char** argv) {
  CLI::App app{"thinlayer: homogenized interface models for thin perforated elastic layers"};
  app.require_subcommand(1);

  std::string config, out, mesh_out, dump_system;
  int threads = 0;
  const std::vector<std::pair<th::Command, std::string>> commands = {
      {th::Command::cell, "Build the cell mesh and report its statistics"},
      {th::Command::tensors, "Compute the effective tensors A*, a*, b*, c* and rho_bar"},
      {th::Command::kernels, "Solve the dynamic cell problems and tabulate the memory kernels"},
      {th::Command::macro, "Run the homogenized macro scenario (with its coefficient stage)"},
      {th::Command::micro, "Run the epsilon-resolved ladder"},
      {th::Command::converge, "Run macro and micro ladder and tabulate the errors"},
      {th::Command::report, "Run every stage described by the config"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [cmd, help] : commands) {
    CLI::App* s = app.add_subcommand(th::to_string(cmd), help);
    s->add_option("--config", config, "JSON configuration file")->required();
    s->add_option("--out", out, "Output directory (default: outputs.directory or ./out)");
    s->add_option("--mesh-out", mesh_out, "Write the cell mesh in plain-text form");
    s->add_option("--dump-system", dump_system, "Write the cell stiffness matrix in coordinate form");
    s->add_option("--threads", threads, "Worker threads (default: THINLAYER_THREADS or 1)")->check(CLI::NonNegativeNumber);
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  th::Command cmd = th::Command::report;
  for (size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) cmd = commands[i].first;
  if (threads > 0) thinlayer::set_num_threads(threads);

  try {
    const th::RunConfig cfg = th::load_config(config);
    const std::string dir = !out.empty() ? out : cfg.output_directory.value_or("out");
    const th::RunReport rep = th::run_config(cfg, cmd, {mesh_out, dump_system});
    th::emit_report(rep, dir);
    int failed = 0;
    for (const auto& i : rep.ledger)
      if (!i.pass) {
        ++failed;
        std::cerr << "FAIL " << i.name << ": " << i.detail << '\n';
      }
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << th::to_string(cmd) << ": " << rep.artifacts.size() << " artifacts in " << dir << ", "
              << rep.ledger.size() - failed << "/" << rep.ledger.size() << " checks passed, report hash " << rep.hash()
              << '\n';
    return failed == 0 ? 0 : 3;
  } catch (const thinlayer::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << '\n';
    return 2;
  } catch (const thinlayer::InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  } catch (const thinlayer::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
