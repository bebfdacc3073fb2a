#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "sdhn/envs.hpp"
#include "sdhn/hypergraph.hpp"
#include "sdhn/nets.hpp"

namespace sdhn::marl {

using diffnum::Matrix;
using diffnum::Var;
using diffnum::Vector;

struct TrainConfig {
  double discount_gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  double entropy_coef = 0.01;
  bool normalize_advantages = true;

  double lambda_sk = -0.6;
  double lambda_cb = 1.0;
  double tau = 1.0;
  /// 0 means one hyperedge per agent.
  int m_hyperedges = 0;
  int hidden_dim = 64;
  hypergraph::NoiseKind noise = hypergraph::NoiseKind::gumbel;
  bool skewness_loss_on = true;
  bool stochastic_edges_on = true;
  bool plain_mappo = false;

  double lr_actor = 3e-4;
  double lr_critic = 1e-3;
  double max_grad_norm = 10.0;

  int rollout_len = 128;
  int epochs = 4;
  int minibatches = 2;
  std::int64_t total_steps = 200000;
  int target_sync = 1;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  int hyperedges_for(int n_agents) const { return m_hyperedges > 0 ? m_hyperedges : n_agents; }
};

nets::NetConfig net_config(const TrainConfig& config, const envs::Env& env);

/// Rollout of T steps for N agents. Per-step agent rows are stacked: step t, agent i is row t·N + i.
struct RolloutBatch {
  int n_agents = 0;
  int steps = 0;

  Matrix obs;                 // T·N × obs_dim
  Matrix global_states;       // T × state_dim
  std::vector<int> actions;   // T·N
  Vector log_probs;           // T·N, at collection parameters
  Vector rewards;             // T, shared
  std::vector<std::uint8_t> dones;  // T, episode ended by step t
  nets::GeneratorState gen_states;  // generator state before step t, each layer T·N × hidden
  Matrix noise;               // T·N × M

  // State after the final step, for bootstrapping.
  Matrix bootstrap_obs;       // N × obs_dim
  Matrix bootstrap_global;    // 1 × state_dim
  nets::GeneratorState bootstrap_gen;
  Matrix bootstrap_noise;     // N × M

  Matrix values;              // T × N, target critic
  Vector bootstrap_values;    // N, target critic
  Matrix advantages;          // T × N
  Matrix value_targets;       // T × N

  // Collection-time statistics.
  std::vector<double> sk_hard;
  std::vector<double> sk_relaxed;
  std::vector<double> p_entries;
};

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> value_targets;
};

/// delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t; A_t = sum_l (gamma lambda)^l delta_{t+l}, cut at
/// episode ends; targets = A + V. `bootstrap` is V after the last step.
GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const std::uint8_t> dones,
              double bootstrap, double discount_gamma, double gae_lambda);

/// Mean over rows of min(ratio A, clip(ratio, 1 - eps, 1 + eps) A), ratio = exp(logp - old_logp).
Var actor_objective(const nets::BoundParams& params, const Matrix& obs, std::span<const int> actions,
                    const Vector& old_log_probs, const Vector& advantages, double clip_epsilon);
/// Mean policy entropy over rows of `obs`.
Var actor_entropy(const nets::BoundParams& params, const Matrix& obs);
/// Untaped objective value (to maximize).
double actor_loss(const nets::ParamSet& params, const Matrix& obs, std::span<const int> actions,
                  const Vector& old_log_probs, const Vector& advantages, double clip_epsilon);

/// Mean squared error between live values and fixed targets.
Var critic_loss(Var values, const Matrix& targets);
double critic_loss(const Vector& values, const Vector& targets);
/// l_td + lambda_cb · l_sk, or l_td alone when the skewness term is off.
Var total_critic_loss(Var l_td, Var l_sk, double lambda_cb, bool skewness_loss_on);
double total_critic_loss(double l_td, double l_sk, double lambda_cb, bool skewness_loss_on);

/// Hard copy of critic-side parameters into `target` when `update` is a multiple of `interval`.
/// Returns whether a copy happened.
bool sync_target(const nets::ParamSet& params, nets::ParamSet& target, int interval, std::int64_t update);

/// Adaptive-moment descent over the parameters selected by `select`, with global-norm clipping.
class Adam {
 public:
  Adam(const nets::ParamSet& layout, bool (*select)(nets::Group), double lr, double max_grad_norm);
  /// Applies one step from the gradient slots; returns the pre-clip gradient norm.
  double step(nets::ParamSet& params);

 private:
  bool (*select_)(nets::Group);
  double lr_;
  double max_grad_norm_;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

struct LossParts {
  double td = 0.0;
  double sk = 0.0;
  double total = 0.0;
};

/// Selects the rows of `batch` belonging to `steps`.
RolloutBatch slice(const RolloutBatch& batch, std::span<const int> steps);

/// Backpropagates the joint critic loss of `batch` (advantages/targets filled) into the gradient
/// slots of `params`.
LossParts critic_gradients(nets::ParamSet& params, const RolloutBatch& batch, const TrainConfig& config);

struct ActorParts {
  double objective = 0.0;
  double entropy = 0.0;
};
/// Backpropagates -(objective + entropy_coef · entropy) into the gradient slots of `params`.
ActorParts actor_gradients(nets::ParamSet& params, const RolloutBatch& batch, const TrainConfig& config);

/// Values of `batch` under `params` (T × N) and of its bootstrap state (N).
std::pair<Matrix, Vector> evaluate_values(const nets::ParamSet& params, const RolloutBatch& batch,
                                          const TrainConfig& config);
/// Fills advantages (normalized when configured) and value targets from batch.values.
void compute_advantages(RolloutBatch& batch, const TrainConfig& config);

struct MetricsRecord {
  std::int64_t update = 0;
  std::int64_t env_steps = 0;
  double mean_return = 0.0;
  double mean_makespan = 0.0;
  double completion_rate = 0.0;
  double loss_actor = 0.0;
  double loss_td = 0.0;
  double loss_sk = 0.0;
  double sk_hard = 0.0;
  double sk_relaxed = 0.0;
  double mean_p = 0.0;
  double frac_p_below_half = 0.0;
  double entropy = 0.0;
  double wall_seconds = 0.0;
};

/// Owns parameters, optimizers, environment and random streams for one training run.
class Trainer {
 public:
  static constexpr int kEpisodeWindow = 20;

  Trainer(TrainConfig config, const envs::EnvFactory& env_factory);

  /// Steps the environment for rollout_len steps under the current policy.
  RolloutBatch collect_rollout();
  /// Collect, estimate advantages with the target critic, optimize, maybe sync the target.
  /// On divergence the parameters are restored to their pre-update values before rethrowing.
  MetricsRecord update();
  bool finished() const { return env_steps_ >= config_.total_steps; }

  const TrainConfig& config() const { return config_; }
  const nets::NetConfig& net_config() const { return net_config_; }
  const nets::ParamSet& params() const { return params_; }
  nets::ParamSet& params() { return params_; }
  const nets::ParamSet& target_params() const { return target_; }
  std::int64_t env_steps() const { return env_steps_; }
  std::int64_t updates() const { return updates_; }
  envs::Env& env() { return *env_; }

 private:
  struct Episode {
    double ret;
    int makespan;
    bool completed;
  };

  Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols);
  void reset_env();

  TrainConfig config_;
  std::unique_ptr<envs::Env> env_;
  nets::NetConfig net_config_;
  nets::ParamSet params_;
  nets::ParamSet target_;
  Adam actor_opt_;
  Adam critic_opt_;

  std::mt19937_64 env_rng_;
  std::mt19937_64 action_rng_;
  std::mt19937_64 noise_rng_;
  std::mt19937_64 shuffle_rng_;

  envs::EnvFrame frame_;
  nets::GeneratorState gen_state_;
  double episode_return_ = 0.0;
  std::deque<Episode> recent_;
  std::int64_t env_steps_ = 0;
  std::int64_t updates_ = 0;
};

using MetricsSink = std::function<void(const MetricsRecord&, const Trainer&)>;

/// Runs updates until total_steps environment steps have been collected; `sink` sees every record.
std::vector<MetricsRecord> train(const TrainConfig& config, const envs::EnvFactory& env_factory,
                                 const MetricsSink& sink = {});

/// Greedy (argmax) decentralized policy from actor parameters.
envs::Policy greedy_policy(const nets::ParamSet& params);

}  // namespace sdhn::marl
