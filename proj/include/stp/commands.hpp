#pragma once

#include <string>

#include "stp/config.hpp"

namespace stp {

// Subcommand bodies; each writes its artifacts under cfg out.dir and returns
// a process exit code. run_cli parses argv (config file, --key value flags,
// STP_* environment overrides) and dispatches.
int cmd_pretrain(const RunConfig& cfg);
int cmd_probe(const RunConfig& cfg);
int cmd_bc(const RunConfig& cfg);
int cmd_attention(const RunConfig& cfg);
int cmd_synth_data(const RunConfig& cfg);

int run_cli(int argc, const char* const* argv);

}  // namespace stp
