#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace actnet::cli {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Subcommands: synth-data, pretrain, train-act, eval, complexity.
// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace actnet::cli
