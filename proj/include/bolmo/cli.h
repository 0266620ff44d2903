#pragma once

#include "bolmo/inference.h"
#include "bolmo/kv.h"
#include "bolmo/model.h"
#include "bolmo/training.h"

#include <iosfwd>
#include <string>
#include <vector>

namespace bolmo::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,           // unknown flag or malformed command line
    kMissingCheckpoint = 3,
    kInvalidConfig = 4,
};

// Everything a config file can set. Sections: model.*, train.*, data.*,
// sample.*, merge.*; any other key is rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    int64_t vocab_size = 512;
    double heldout_fraction = 0.1;
    SamplerConfig sampler;
    int64_t patch_cap = 64;
    std::string merge_strategy = "subword";
    double target_compression = 0.0;
};

KvMap run_config_to_kv(const RunConfig & rc);
RunConfig run_config_from_kv(const KvMap & kv, RunConfig base = {});

// Training defaults for the teacher subcommand.
TrainConfig teacher_train_defaults();

// Runs one command line (args[0] is the program name).
int run(const std::vector<std::string> & args, std::ostream & out, std::ostream & err);

} // namespace bolmo::cli
