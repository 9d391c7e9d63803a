#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stiefkv/config.hpp"

namespace stiefkv::cli {

enum ExitCode : int { kOk = 0, kRuntime = 1, kUsage = 2 };

struct Globals {
  std::string config_path; ///< empty means built-in defaults
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string out_dir = ".";
};

/// Loads the config and applies --seed.
config::RunConfig resolve(const Globals &g);

/// Artifact names inside the output directory.
std::string path_in(const Globals &g, const std::string &name);
std::string bases_name(const std::string &method);
std::string surface_name(const std::string &method);
std::string allocation_name(const std::string &method);
std::string eval_name(const std::string &method);

/// Checks a method tag; throws UsageError.
void check_method(const std::string &method);

void cmd_init_config(const Globals &g, std::ostream &log);
void cmd_calibrate(const Globals &g, const std::string &activations, std::ostream &log);
void cmd_train(const Globals &g, const std::string &method, std::ostream &log);
/// Empty `policy` or a missing `epsilon` takes the config value; an explicit
/// epsilon <= 0 is a usage error.
void cmd_allocate(const Globals &g, const std::string &method, const std::string &policy,
                  std::optional<double> epsilon, const std::string &surface_path,
                  const std::string &output_path, std::ostream &log);
void cmd_eval(const Globals &g, const std::string &method, const std::string &bases_path,
              const std::string &allocation_path, std::ostream &log);
void cmd_diagnose(const Globals &g, const std::vector<std::string> &methods, std::size_t r_k,
                  std::size_t r_v, const std::string &data, std::ostream &log);

/// Parses argv and dispatches. Never throws; returns the exit code.
int run(int argc, const char *const *argv, std::ostream &out, std::ostream &err);

} // namespace stiefkv::cli
