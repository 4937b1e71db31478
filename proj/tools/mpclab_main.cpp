// Copyright 2026 The mpclab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mpclab/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out_dir;
  std::string init;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool out_set = false;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config, "Stage config file")->required();
  cmd->add_option("--seed", args->seed, "Override the config seed")
      ->each([args](const std::string&) { args->seed_set = true; });
  cmd->add_option("--out", args->out_dir, "Override the output directory")
      ->each([args](const std::string&) { args->out_set = true; });
  cmd->add_option("--init", args->init, "Initial/input checkpoint");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mpclab: masked and autoregressive predictive-coding "
               "pre-training lab for transformer speech encoders"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, mpclab::pipeline::Stage>> stages = {
      {"synth", mpclab::pipeline::Stage::kSynth},
      {"pretrain", mpclab::pipeline::Stage::kPretrain},
      {"adapt", mpclab::pipeline::Stage::kAdapt},
      {"finetune", mpclab::pipeline::Stage::kFinetune},
      {"probe", mpclab::pipeline::Stage::kProbe},
      {"average", mpclab::pipeline::Stage::kAverage},
      {"eval", mpclab::pipeline::Stage::kEval},
  };

  std::vector<CommonArgs> args(stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    CLI::App* cmd = app.add_subcommand(stages[i].first);
    add_common(cmd, &args[i]);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (!app.get_subcommand(stages[i].first)->parsed()) continue;
      mpclab::pipeline::StageConfig cfg =
          mpclab::pipeline::load_stage_config(args[i].config, stages[i].second);
      if (args[i].seed_set) cfg.seed = args[i].seed;
      if (args[i].out_set) cfg.out_dir = args[i].out_dir;
      if (!args[i].init.empty()) cfg.init_checkpoint = args[i].init;
      cfg.validate();
      mpclab::pipeline::run_stage(cfg);
      return 0;
    }
    std::cerr << "no subcommand given\n";
    return 1;
  } catch (const mpclab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mpclab::IoError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const mpclab::ParseError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const mpclab::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
