#include "sdhn/expcli.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace sdhn::expcli {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

int parse_int(std::string_view v) {
  int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected an integer, got '" + std::string(v) + "'");
  return out;
}

std::int64_t parse_i64(std::string_view v) {
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected an integer, got '" + std::string(v) + "'");
  return out;
}

std::uint64_t parse_u64(std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_double(std::string_view v) {
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected a number, got '" + std::string(v) + "'");
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + std::string(v) + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

std::vector<envs::Cell> parse_offsets(std::string_view text) {
  std::vector<envs::Cell> out;
  while (!text.empty()) {
    const auto semi = text.find(';');
    const std::string_view item = trim(text.substr(0, semi));
    text = semi == std::string_view::npos ? std::string_view{} : text.substr(semi + 1);
    if (item.empty()) continue;
    const auto comma = item.find(',');
    if (comma == std::string_view::npos) throw ConfigError("formation offset '" + std::string(item) + "' is not x,y");
    out.push_back({parse_int(trim(item.substr(0, comma))), parse_int(trim(item.substr(comma + 1)))});
  }
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys = {
      {"env.name", [](RunConfig& c, std::string_view v) { c.env.name = std::string(v); },
       [](const RunConfig& c) { return c.env.name; }},
      {"env.n_agents", [](RunConfig& c, std::string_view v) { c.env.n_agents = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.env.n_agents); }},
      {"env.width", [](RunConfig& c, std::string_view v) { c.env.width = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.env.width.value_or(0)); }},
      {"env.height", [](RunConfig& c, std::string_view v) { c.env.height = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.env.height.value_or(0)); }},
      {"env.step_limit", [](RunConfig& c, std::string_view v) { c.env.step_limit = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.env.step_limit.value_or(0)); }},
      {"env.formation", [](RunConfig& c, std::string_view v) { c.env.formation = std::string(v); },
       [](const RunConfig& c) { return c.env.formation; }},
      {"env.shelves", [](RunConfig& c, std::string_view v) { c.env.shelves = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.env.shelves); }},
      {"env.requests", [](RunConfig& c, std::string_view v) { c.env.requests = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.env.requests); }},
      {"train.total_steps", [](RunConfig& c, std::string_view v) { c.train.total_steps = parse_i64(v); },
       [](const RunConfig& c) { return std::to_string(c.train.total_steps); }},
      {"train.rollout_len", [](RunConfig& c, std::string_view v) { c.train.rollout_len = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.rollout_len); }},
      {"train.epochs", [](RunConfig& c, std::string_view v) { c.train.epochs = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.epochs); }},
      {"train.minibatches", [](RunConfig& c, std::string_view v) { c.train.minibatches = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.minibatches); }},
      {"train.seed", [](RunConfig& c, std::string_view v) { c.train.seed = parse_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      {"train.target_sync", [](RunConfig& c, std::string_view v) { c.train.target_sync = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.target_sync); }},
      {"train.checkpoint_every", [](RunConfig& c, std::string_view v) { c.checkpoint_every = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.checkpoint_every); }},
      {"ppo.gamma", [](RunConfig& c, std::string_view v) { c.train.discount_gamma = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.discount_gamma); }},
      {"ppo.lambda", [](RunConfig& c, std::string_view v) { c.train.gae_lambda = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.gae_lambda); }},
      {"ppo.clip", [](RunConfig& c, std::string_view v) { c.train.clip_epsilon = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.clip_epsilon); }},
      {"ppo.entropy_coef", [](RunConfig& c, std::string_view v) { c.train.entropy_coef = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.entropy_coef); }},
      {"ppo.max_grad_norm", [](RunConfig& c, std::string_view v) { c.train.max_grad_norm = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.max_grad_norm); }},
      {"ppo.normalize_advantages",
       [](RunConfig& c, std::string_view v) { c.train.normalize_advantages = parse_bool(v); },
       [](const RunConfig& c) { return fmt_bool(c.train.normalize_advantages); }},
      {"lr.actor", [](RunConfig& c, std::string_view v) { c.train.lr_actor = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.lr_actor); }},
      {"lr.critic", [](RunConfig& c, std::string_view v) { c.train.lr_critic = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.lr_critic); }},
      {"sdhn.m_hyperedges", [](RunConfig& c, std::string_view v) { c.train.m_hyperedges = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.m_hyperedges); }},
      {"sdhn.tau", [](RunConfig& c, std::string_view v) { c.train.tau = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.tau); }},
      {"sdhn.lambda_sk", [](RunConfig& c, std::string_view v) { c.train.lambda_sk = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.lambda_sk); }},
      {"sdhn.lambda_cb", [](RunConfig& c, std::string_view v) { c.train.lambda_cb = parse_double(v); },
       [](const RunConfig& c) { return fmt_double(c.train.lambda_cb); }},
      {"sdhn.skewness_loss_on", [](RunConfig& c, std::string_view v) { c.train.skewness_loss_on = parse_bool(v); },
       [](const RunConfig& c) { return fmt_bool(c.train.skewness_loss_on); }},
      {"sdhn.stochastic_edges_on",
       [](RunConfig& c, std::string_view v) { c.train.stochastic_edges_on = parse_bool(v); },
       [](const RunConfig& c) { return fmt_bool(c.train.stochastic_edges_on); }},
      {"sdhn.noise",
       [](RunConfig& c, std::string_view v) {
         try {
           c.train.noise = hypergraph::parse_noise_kind(v);
         } catch (const std::exception& e) {
           throw ConfigError(e.what());
         }
       },
       [](const RunConfig& c) { return std::string(hypergraph::to_string(c.train.noise)); }},
      {"sdhn.hidden_dim", [](RunConfig& c, std::string_view v) { c.train.hidden_dim = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.hidden_dim); }},
      {"sdhn.plain_mappo", [](RunConfig& c, std::string_view v) { c.train.plain_mappo = parse_bool(v); },
       [](const RunConfig& c) { return fmt_bool(c.train.plain_mappo); }},
  };
  return keys;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& k : key_table()) out.push_back(k.name);
    return out;
  }();
  return names;
}

void RunConfig::resolve() {
  const bool formation = env.name == "formation";
  if (!formation && env.name != "warehouse") {
    throw ConfigError("env.name: unknown task '" + env.name + "' (expected formation or warehouse)");
  }
  if (!env.width) env.width = formation ? 7 : 8;
  if (!env.height) env.height = formation ? 7 : 8;
  if (!env.step_limit) env.step_limit = formation ? 100 : 256;
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be non-negative");
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  try {
    make_env(*this);
  } catch (const envs::ConfigError& e) {
    throw ConfigError(std::string("env: ") + e.what());
  }
}

RunConfig parse_config(std::string_view text) {
  RunConfig config;
  int line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto& table = key_table();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    try {
      it->set(config, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key + "': " + e.what());
    }
  }
  config.resolve();
  return config;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_text(const RunConfig& config) {
  RunConfig resolved = config;
  resolved.resolve();
  std::string out = "# resolved configuration\n";
  for (const auto& k : key_table()) out += k.name + " = " + k.get(resolved) + "\n";
  return out;
}

std::unique_ptr<envs::Env> make_env(const RunConfig& config) {
  const EnvSettings& e = config.env;
  if (e.name == "formation") {
    envs::FormationConfig fc;
    fc.n_agents = e.n_agents;
    fc.width = e.width.value_or(7);
    fc.height = e.height.value_or(7);
    fc.step_limit = e.step_limit.value_or(100);
    fc.offsets = parse_offsets(e.formation);
    return std::make_unique<envs::FormationEnv>(fc);
  }
  if (e.name == "warehouse") {
    envs::WarehouseConfig wc;
    wc.n_agents = e.n_agents;
    wc.width = e.width.value_or(8);
    wc.height = e.height.value_or(8);
    wc.step_limit = e.step_limit.value_or(256);
    wc.n_shelves = e.shelves;
    wc.n_requests = e.requests;
    return std::make_unique<envs::WarehouseEnv>(wc);
  }
  throw ConfigError("env.name: unknown task '" + e.name + "'");
}

envs::EnvFactory make_env_factory(const RunConfig& config) {
  return [config] { return make_env(config); };
}

std::uint64_t config_digest(const RunConfig& config) {
  RunConfig c = config;
  c.resolve();
  const auto env = make_env(c);
  std::ostringstream canon;
  canon << "env=" << c.env.name << ";agents=" << c.env.n_agents << ";w=" << *c.env.width << ";h=" << *c.env.height
        << ";formation=" << c.env.formation << ";shelves=" << c.env.shelves << ";obs=" << env->obs_dim()
        << ";state=" << env->state_dim() << ";m=" << c.train.hyperedges_for(c.env.n_agents)
        << ";hidden=" << c.train.hidden_dim << ";plain=" << c.train.plain_mappo;
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char ch : canon.str()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string digest_hex(std::uint64_t digest) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

std::string metrics_line(const marl::MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["update"] = r.update;
  j["env_steps"] = r.env_steps;
  j["mean_return"] = r.mean_return;
  j["mean_makespan"] = r.mean_makespan;
  j["completion_rate"] = r.completion_rate;
  j["loss_actor"] = r.loss_actor;
  j["loss_td"] = r.loss_td;
  j["loss_sk"] = r.loss_sk;
  j["sk_hard"] = r.sk_hard;
  j["sk_relaxed"] = r.sk_relaxed;
  j["mean_p"] = r.mean_p;
  j["frac_p_below_half"] = r.frac_p_below_half;
  j["entropy"] = r.entropy;
  return j.dump();
}

TrainOutcome run_training(const RunConfig& input, const fs::path& out_dir) {
  RunConfig config = input;
  config.resolve();
  fs::create_directories(out_dir);
  {
    std::ofstream snap(out_dir / "config.resolved");
    snap << to_text(config);
  }
  const std::uint64_t digest = config_digest(config);
  marl::Trainer trainer(config.train, make_env_factory(config));
  nets::save_checkpoint((out_dir / "initial.ckpt").string(), trainer.params(), digest);

  std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::trunc);
  std::ofstream timing(out_dir / "timing.jsonl", std::ios::trunc);
  TrainOutcome outcome;
  const auto start = std::chrono::steady_clock::now();
  while (!trainer.finished()) {
    marl::MetricsRecord rec;
    try {
      rec = trainer.update();
    } catch (const nets::DivergenceError& e) {
      outcome.diverged = true;
      outcome.error = e.what();
      nets::save_checkpoint((out_dir / "last_good.ckpt").string(), trainer.params(), digest);
      return outcome;
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics << metrics_line(rec) << '\n';
    metrics.flush();
    timing << nlohmann::ordered_json{{"update", rec.update}, {"wall_seconds", rec.wall_seconds}}.dump() << '\n';
    if (config.checkpoint_every > 0 && rec.update % config.checkpoint_every == 0) {
      fs::create_directories(out_dir / "checkpoints");
      char name[40];
      std::snprintf(name, sizeof(name), "update_%06lld.ckpt", static_cast<long long>(rec.update));
      nets::save_checkpoint((out_dir / "checkpoints" / name).string(), trainer.params(), digest);
    }
    outcome.records.push_back(rec);
  }
  if (trainer.updates() > 0) nets::save_checkpoint((out_dir / "final.ckpt").string(), trainer.params(), digest);
  return outcome;
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir, std::optional<std::uint64_t> seed_override,
              std::ostream& out, std::ostream& err) {
  try {
    if (!fs::exists(config_path)) {
      err << "error: config file not found: " << config_path.string() << "\n";
      return 2;
    }
    RunConfig config = load_config(config_path);
    if (seed_override) config.train.seed = *seed_override;
    const TrainOutcome outcome = run_training(config, out_dir);
    if (outcome.diverged) {
      err << "error: training diverged: " << outcome.error << " (last good parameters in "
          << (out_dir / "last_good.ckpt").string() << ")\n";
      return 3;
    }
    out << "trained " << outcome.records.size() << " updates into " << out_dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

EvalOutcome evaluate_checkpoint(const fs::path& checkpoint, const RunConfig& config, int episodes,
                                std::uint64_t seed) {
  RunConfig c = config;
  c.resolve();
  auto env = make_env(c);
  const nets::ParamSet params =
      nets::load_checkpoint(checkpoint.string(), marl::net_config(c.train, *env), config_digest(c));
  EvalOutcome out;
  out.report = envs::evaluate(marl::greedy_policy(params), *env, episodes, env->step_limit(), seed);
  nlohmann::ordered_json j;
  j["mean_return"] = out.report.mean_return;
  j["mean_makespan"] = out.report.mean_makespan;
  j["completion_rate"] = out.report.completion_rate;
  j["episodes"] = out.report.episodes;
  j["seed"] = seed;
  out.json = j.dump();
  return out;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& config_path, int episodes, std::uint64_t seed,
             std::ostream& out, std::ostream& err) {
  try {
    if (episodes < 1) throw ConfigError("--episodes must be at least 1");
    const RunConfig config = load_config(config_path);
    const EvalOutcome result = evaluate_checkpoint(checkpoint, config, episodes, seed);
    out << result.json << "\n";
    fs::path report = checkpoint;
    report.replace_extension(".eval.json");
    std::ofstream(report) << result.json << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

RunConfig apply_variant(RunConfig config, std::string_view variant) {
  if (variant == "no-skew") {
    config.train.skewness_loss_on = false;
  } else if (variant == "det-edges") {
    config.train.stochastic_edges_on = false;
  } else if (variant == "plain-mappo") {
    config.train.plain_mappo = true;
  } else {
    std::string valid;
    for (const auto& v : kAblationVariants) valid += (valid.empty() ? "" : ", ") + v;
    throw ConfigError("unknown ablation variant '" + std::string(variant) + "' (valid: " + valid + ")");
  }
  return config;
}

int cmd_ablate(const fs::path& config_path, const fs::path& out_dir, const std::vector<std::string>& variants,
               std::ostream& out, std::ostream& err) {
  try {
    const RunConfig base = load_config(config_path);
    std::vector<std::pair<std::string, RunConfig>> runs = {{"base", base}};
    for (const auto& v : variants) runs.emplace_back(v, apply_variant(base, v));
    int status = 0;
    for (const auto& [name, config] : runs) {
      const TrainOutcome outcome = run_training(config, out_dir / name);
      const double final_return = outcome.records.empty() ? 0.0 : outcome.records.back().mean_return;
      out << name << ": " << outcome.records.size() << " updates, final mean_return " << final_return
          << (outcome.diverged ? " (diverged: " + outcome.error + ")" : "") << "\n";
      if (outcome.diverged) status = 3;
    }
    return status;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sdhn::expcli
