// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "maskrdt/metrics.hpp"
#include "maskrdt/model.hpp"
#include "maskrdt/run_config.hpp"
#include "maskrdt/simulator.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace maskrdt {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitDiverged = 2;

// Greedy model policy conditioned on `target_return`. `params` must outlive it.
Policy make_model_policy(const ParamSet& params, const ModelConfig& cfg, double target_return);

// One fully exposed window per (trajectory, t).
std::vector<RankingExample> offline_examples(const Dataset& data, const ParamSet& params, const ModelConfig& cfg);

int cmd_gen_data(const RunConfig& rc, std::ostream& out, std::ostream& err);
int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& err);
int cmd_eval(const RunConfig& rc, std::ostream& out, std::ostream& err);
int cmd_bench(const RunConfig& rc, std::ostream& out, std::ostream& err);

// Parses `gen-data|train|eval|bench [--config FILE] [--key value ...]`.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace maskrdt
