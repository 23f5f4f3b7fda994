// Copyright 2026 The Veilbreak Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// veilbreak: batch evaluation of unlearned models under prompt attacks.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "veilbreak/orchestrator.hpp"

int main(int argc, char** argv) {
  CLI::App app{"veilbreak - robustness evaluation harness for unlearned models"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir;
  bool resume = false;
  bool lenient = false;

  const std::pair<const char*, const char*> commands[] = {
      {"transform", "apply prompt attacks to the configured datasets"},
      {"evaluate", "query the eval endpoint for every dataset/attack pair"},
      {"score", "compute accuracy tables from stored responses"},
      {"probe", "train per-layer linear probes on activation dumps"},
      {"report", "render tables, charts and the markdown report"},
      {"all", "transform, evaluate, score, probe and report"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config,-c", config_path, "run config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out,-o", out_dir, "output directory (overrides output_dir)");
    sub->add_flag("--lenient", lenient, "skip malformed dataset lines instead of failing");
    if (std::string(name) == "evaluate" || std::string(name) == "all") {
      sub->add_flag("--resume", resume, "keep successful responses from a previous run");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : veilbreak::kExitConfig;
  }

  veilbreak::Services services;
  veilbreak::RunConfig cfg;
  try {
    cfg = veilbreak::load_config(config_path);
  } catch (const veilbreak::Error& e) {
    std::cerr << "error [" << e.kind() << "]: " << e.what() << "\n";
    return veilbreak::exit_code_for(e);
  }
  if (!out_dir.empty()) cfg.output_dir = std::filesystem::absolute(out_dir).lexically_normal();
  if (lenient) cfg.lenient = true;

  const std::string command = app.get_subcommands().front()->get_name();
  return veilbreak::run_command(command, cfg, services, {resume});
}
