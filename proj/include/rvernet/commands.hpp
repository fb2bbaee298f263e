// The rvernet-lab subcommands. Each one loads and validates its
// configuration, does all computation, and only then writes artifacts into a
// per-command directory under the configured output root, so a failed run
// never leaves partial output. Lower precisions train faster; dtype "f64"
// plus RVERNET_THREADS=1 makes every artifact byte-reproducible.
#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace rvernet {

// CLI flags layered over the config file.
struct CommandOptions {
    std::string config_path;
    std::string checkpoint;                 // --checkpoint
    std::string out_override;               // --out
    bool force = false;                     // --force
    std::optional<uint64_t> seed_override;  // --seed
};

void cmd_gen_data(const CommandOptions& opt);
void cmd_train(const CommandOptions& opt);
void cmd_eval(const CommandOptions& opt);
void cmd_perturb(const CommandOptions& opt);
void cmd_ablate(const CommandOptions& opt);
void cmd_gradcam(const CommandOptions& opt);
void cmd_report(const CommandOptions& opt);

// Parses argv, dispatches, and maps outcomes to exit codes: 0 success,
// 2 usage or validation error, 3 runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace rvernet
