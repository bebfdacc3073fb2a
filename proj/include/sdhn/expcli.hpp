#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sdhn/envs.hpp"
#include "sdhn/marl.hpp"

namespace sdhn::expcli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvSettings {
  std::string name = "formation";
  int n_agents = 3;
  /// Unset dimensions resolve to the per-task defaults (formation 7×7 / 100, warehouse 8×8 / 256).
  std::optional<int> width;
  std::optional<int> height;
  std::optional<int> step_limit;
  /// Formation offsets as "x,y;x,y;..."; empty means a vertical line.
  std::string formation;
  int shelves = 4;
  int requests = 2;
};

struct RunConfig {
  EnvSettings env;
  marl::TrainConfig train;
  /// Updates between periodic checkpoints; 0 disables them.
  int checkpoint_every = 50;

  /// Fills per-task defaults and validates every field.
  void resolve();
};

/// Parses flat `key = value` text with `#` comments. Unknown keys and malformed values are rejected
/// with a message naming the key and line.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
/// Every key with its resolved value; parse_config(to_text(c)) reproduces c exactly.
std::string to_text(const RunConfig& config);
/// Documented keys in file order.
const std::vector<std::string>& config_keys();

envs::EnvFactory make_env_factory(const RunConfig& config);
std::unique_ptr<envs::Env> make_env(const RunConfig& config);

/// FNV-1a over the settings that fix the parameter layout and observation encoding.
std::uint64_t config_digest(const RunConfig& config);
std::string digest_hex(std::uint64_t digest);

/// One JSON object per line, fields in a fixed order. Wall-clock time is kept out of this line.
std::string metrics_line(const marl::MetricsRecord& record);

struct TrainOutcome {
  std::vector<marl::MetricsRecord> records;
  bool diverged = false;
  std::string error;
};

/// Trains into `out_dir`: config.resolved, metrics.jsonl, timing.jsonl, initial.ckpt,
/// checkpoints/update_NNNNNN.ckpt, final.ckpt (or last_good.ckpt after divergence).
TrainOutcome run_training(const RunConfig& config, const std::filesystem::path& out_dir);

int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
              std::optional<std::uint64_t> seed_override, std::ostream& out, std::ostream& err);

struct EvalOutcome {
  envs::EvalReport report;
  std::string json;
};
/// Greedy evaluation of a checkpoint; throws on load or digest errors.
EvalOutcome evaluate_checkpoint(const std::filesystem::path& checkpoint, const RunConfig& config, int episodes,
                                std::uint64_t seed);
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& config_path, int episodes,
             std::uint64_t seed, std::ostream& out, std::ostream& err);

inline const std::vector<std::string> kAblationVariants = {"no-skew", "det-edges", "plain-mappo"};
/// Base config with one ablation applied.
RunConfig apply_variant(RunConfig config, std::string_view variant);
int cmd_ablate(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
               const std::vector<std::string>& variants, std::ostream& out, std::ostream& err);

}  // namespace sdhn::expcli
