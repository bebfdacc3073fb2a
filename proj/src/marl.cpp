#include "sdhn/marl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace sdhn::marl {

using diffnum::Tape;
using nets::BoundParams;
using nets::DivergenceError;
using nets::Group;
using nets::ParamSet;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (!(discount_gamma >= 0.0 && discount_gamma < 1.0)) fail("ppo.gamma must lie in [0, 1)");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail("ppo.lambda must lie in [0, 1]");
  if (!(clip_epsilon > 0.0)) fail("ppo.clip must be positive");
  if (!(entropy_coef >= 0.0)) fail("ppo.entropy_coef must be non-negative");
  if (!(tau > 0.0)) fail("sdhn.tau must be positive");
  if (m_hyperedges < 0) fail("sdhn.m_hyperedges must be >= 1 (or 0 for one per agent)");
  if (hidden_dim < 1) fail("sdhn.hidden_dim must be positive");
  if (!(lambda_cb >= 0.0)) fail("sdhn.lambda_cb must be non-negative");
  if (!(lambda_sk > -1.0 && lambda_sk < 1.0)) fail("sdhn.lambda_sk must lie in (-1, 1)");
  if (!(lr_actor >= 0.0) || !(lr_critic >= 0.0)) fail("learning rates must be non-negative");
  if (!(max_grad_norm > 0.0)) fail("ppo.max_grad_norm must be positive");
  if (rollout_len < 1) fail("train.rollout_len must be positive");
  if (epochs < 1) fail("train.epochs must be positive");
  if (minibatches < 1 || minibatches > rollout_len) fail("train.minibatches must lie in [1, rollout_len]");
  if (total_steps < 0) fail("train.total_steps must be non-negative");
  if (target_sync < 1) fail("train.target_sync must be >= 1");
}

nets::NetConfig net_config(const TrainConfig& config, const envs::Env& env) {
  nets::NetConfig c;
  c.obs_dim = env.obs_dim();
  c.state_dim = env.state_dim();
  c.n_actions = env.n_actions();
  c.hidden = config.hidden_dim;
  c.n_hyperedges = config.hyperedges_for(env.n_agents());
  c.plain_mappo = config.plain_mappo;
  return c;
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const std::uint8_t> dones,
              double bootstrap, double discount_gamma, double gae_lambda) {
  const std::size_t t_len = rewards.size();
  if (values.size() != t_len || dones.size() != t_len) {
    throw diffnum::ShapeError("gae: rewards, values and dones must have equal length");
  }
  GaeResult out;
  out.advantages.assign(t_len, 0.0);
  out.value_targets.assign(t_len, 0.0);
  double running = 0.0;
  for (std::size_t t = t_len; t-- > 0;) {
    const double live = dones[t] ? 0.0 : 1.0;
    const double next_value = t + 1 < t_len ? values[t + 1] : bootstrap;
    const double delta = rewards[t] + discount_gamma * next_value * live - values[t];
    running = delta + discount_gamma * gae_lambda * live * running;
    out.advantages[t] = running;
    out.value_targets[t] = running + values[t];
  }
  return out;
}

namespace {

Var log_probs_of(const BoundParams& params, Var obs, std::span<const int> actions) {
  Var logsm = diffnum::log_softmax_rows(nets::actor_logits(params, obs));
  return diffnum::clamp(diffnum::pick(logsm, actions), std::log(nets::kActionProbEps),
                        std::numeric_limits<double>::infinity());
}

Matrix column(const Vector& v) { return Matrix(v); }

}  // namespace

Var actor_objective(const BoundParams& params, const Matrix& obs, std::span<const int> actions,
                    const Vector& old_log_probs, const Vector& advantages, double clip_epsilon) {
  Tape& tape = params.tape();
  Var logp = log_probs_of(params, tape.constant(obs), actions);
  Var ratio = diffnum::exp(diffnum::sub(logp, tape.constant(column(old_log_probs))));
  if (!ratio.value().allFinite()) throw DivergenceError("policy ratio became non-finite");
  Var adv = tape.constant(column(advantages));
  Var unclipped = diffnum::hadamard(ratio, adv);
  Var clipped = diffnum::hadamard(diffnum::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon), adv);
  return diffnum::mean(diffnum::minimum(unclipped, clipped));
}

Var actor_entropy(const BoundParams& params, const Matrix& obs) {
  Var logsm = diffnum::log_softmax_rows(nets::actor_logits(params, params.tape().constant(obs)));
  Var plogp = diffnum::hadamard(diffnum::exp(logsm), logsm);
  return diffnum::scale(diffnum::sum(plogp), -1.0 / static_cast<double>(obs.rows()));
}

double actor_loss(const ParamSet& params, const Matrix& obs, std::span<const int> actions,
                  const Vector& old_log_probs, const Vector& advantages, double clip_epsilon) {
  Tape tape;
  BoundParams bound(tape, params, false);
  return actor_objective(bound, obs, actions, old_log_probs, advantages, clip_epsilon).value()(0, 0);
}

Var critic_loss(Var values, const Matrix& targets) {
  return diffnum::mean(diffnum::square(diffnum::sub(values, values.tape().constant(targets))));
}

double critic_loss(const Vector& values, const Vector& targets) {
  if (values.size() != targets.size()) throw diffnum::ShapeError("critic_loss: length mismatch");
  return (values - targets).squaredNorm() / static_cast<double>(values.size());
}

Var total_critic_loss(Var l_td, Var l_sk, double lambda_cb, bool skewness_loss_on) {
  if (!skewness_loss_on || !l_sk.valid()) return l_td;
  return diffnum::add(l_td, diffnum::scale(l_sk, lambda_cb));
}

double total_critic_loss(double l_td, double l_sk, double lambda_cb, bool skewness_loss_on) {
  return skewness_loss_on ? l_td + lambda_cb * l_sk : l_td;
}

bool sync_target(const ParamSet& params, ParamSet& target, int interval, std::int64_t update) {
  if (interval < 1) throw std::invalid_argument("target sync interval must be >= 1");
  if (update % interval != 0) return false;
  target.copy_values_from(params, &nets::critic_side);
  return true;
}

Adam::Adam(const ParamSet& layout, bool (*select)(Group), double lr, double max_grad_norm)
    : select_(select), lr_(lr), max_grad_norm_(max_grad_norm) {
  for (const auto& p : layout) {
    m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

double Adam::step(ParamSet& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (select_(p.group)) sq += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DivergenceError("gradient norm became non-finite");
  const double clip = norm > max_grad_norm_ ? max_grad_norm_ / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!select_(p.group)) continue;
    const Matrix g = p.grad * clip;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
  return norm;
}

RolloutBatch slice(const RolloutBatch& batch, std::span<const int> steps) {
  const int n = batch.n_agents;
  RolloutBatch out;
  out.n_agents = n;
  out.steps = static_cast<int>(steps.size());
  const Eigen::Index rows = static_cast<Eigen::Index>(steps.size()) * n;
  out.obs.resize(rows, batch.obs.cols());
  out.global_states.resize(out.steps, batch.global_states.cols());
  out.log_probs.resize(rows);
  out.rewards.resize(out.steps);
  out.noise.resize(rows, batch.noise.cols());
  out.advantages.resize(out.steps, batch.advantages.cols());
  out.value_targets.resize(out.steps, batch.value_targets.cols());
  const bool has_values = batch.values.rows() == batch.steps;
  if (has_values) out.values.resize(out.steps, batch.values.cols());
  const bool has_gen = batch.gen_states.layers[0].rows() == static_cast<Eigen::Index>(batch.steps) * n;
  for (int l = 0; l < nets::kGeneratorLayers; ++l) {
    out.gen_states.layers[l].resize(has_gen ? rows : 0, batch.gen_states.layers[l].cols());
  }
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const int t = steps[k];
    const Eigen::Index dst = static_cast<Eigen::Index>(k) * n;
    const Eigen::Index src = static_cast<Eigen::Index>(t) * n;
    out.obs.middleRows(dst, n) = batch.obs.middleRows(src, n);
    out.global_states.row(k) = batch.global_states.row(t);
    out.log_probs.segment(dst, n) = batch.log_probs.segment(src, n);
    out.rewards(k) = batch.rewards(t);
    out.dones.push_back(batch.dones[t]);
    for (int i = 0; i < n; ++i) out.actions.push_back(batch.actions[src + i]);
    if (batch.noise.rows() > 0) out.noise.middleRows(dst, n) = batch.noise.middleRows(src, n);
    if (has_gen) {
      for (int l = 0; l < nets::kGeneratorLayers; ++l) {
        out.gen_states.layers[l].middleRows(dst, n) = batch.gen_states.layers[l].middleRows(src, n);
      }
    }
    if (batch.advantages.rows() > 0) out.advantages.row(k) = batch.advantages.row(t);
    if (batch.value_targets.rows() > 0) out.value_targets.row(k) = batch.value_targets.row(t);
    if (has_values) out.values.row(k) = batch.values.row(t);
  }
  return out;
}

namespace {

nets::CriticOptions critic_options(const TrainConfig& config, int n_agents) {
  nets::CriticOptions o;
  o.n_agents = n_agents;
  o.tau = config.tau;
  o.stochastic_edges = config.stochastic_edges_on;
  return o;
}

nets::CriticInputs critic_inputs(const RolloutBatch& batch) {
  return nets::CriticInputs{batch.obs, batch.global_states, batch.gen_states, batch.noise};
}

/// T×N row-major matrix flattened into the stacked T·N × 1 layout.
Matrix stacked(const Matrix& per_step) {
  Matrix out(per_step.size(), 1);
  for (Eigen::Index t = 0; t < per_step.rows(); ++t) {
    for (Eigen::Index i = 0; i < per_step.cols(); ++i) out(t * per_step.cols() + i, 0) = per_step(t, i);
  }
  return out;
}

Vector stacked_vector(const Matrix& per_step) { return stacked(per_step).col(0); }

}  // namespace

LossParts critic_gradients(ParamSet& params, const RolloutBatch& batch, const TrainConfig& config) {
  Tape tape;
  BoundParams bound(tape, params, true);
  nets::CriticPass pass = nets::critic_pipeline(bound, critic_inputs(batch), critic_options(config, batch.n_agents));
  Var l_td = critic_loss(pass.values, stacked(batch.value_targets));
  Var l_sk;
  if (pass.sk_relaxed.valid()) l_sk = hypergraph::skewness_loss(pass.sk_relaxed, config.lambda_sk);
  Var total = total_critic_loss(l_td, l_sk, config.lambda_cb, config.skewness_loss_on);

  LossParts parts;
  parts.td = l_td.value()(0, 0);
  parts.sk = l_sk.valid() ? l_sk.value()(0, 0) : 0.0;
  parts.total = total.value()(0, 0);
  if (!std::isfinite(parts.total)) throw DivergenceError("critic loss became non-finite");
  tape.backward(total);
  bound.accumulate_grads(params);
  return parts;
}

ActorParts actor_gradients(ParamSet& params, const RolloutBatch& batch, const TrainConfig& config) {
  Tape tape;
  BoundParams bound(tape, params, true);
  Var objective = actor_objective(bound, batch.obs, batch.actions, batch.log_probs,
                                  stacked_vector(batch.advantages), config.clip_epsilon);
  Var entropy = actor_entropy(bound, batch.obs);
  Var loss = diffnum::scale(diffnum::add(objective, diffnum::scale(entropy, config.entropy_coef)), -1.0);
  ActorParts parts{objective.value()(0, 0), entropy.value()(0, 0)};
  if (!std::isfinite(loss.value()(0, 0))) throw DivergenceError("actor loss became non-finite");
  tape.backward(loss);
  bound.accumulate_grads(params);
  return parts;
}

std::pair<Matrix, Vector> evaluate_values(const ParamSet& params, const RolloutBatch& batch,
                                          const TrainConfig& config) {
  const int n = batch.n_agents;
  const nets::CriticOptions options = critic_options(config, n);
  Matrix values(batch.steps, n);
  {
    Tape tape;
    BoundParams bound(tape, params, false);
    const Matrix v = nets::critic_pipeline(bound, critic_inputs(batch), options).values.value();
    for (int t = 0; t < batch.steps; ++t) values.row(t) = v.middleRows(static_cast<Eigen::Index>(t) * n, n).col(0).transpose();
  }
  Tape tape;
  BoundParams bound(tape, params, false);
  nets::CriticInputs boot{batch.bootstrap_obs, batch.bootstrap_global, batch.bootstrap_gen, batch.bootstrap_noise};
  Vector bootstrap = nets::critic_pipeline(bound, boot, options).values.value().col(0);
  return {std::move(values), std::move(bootstrap)};
}

void compute_advantages(RolloutBatch& batch, const TrainConfig& config) {
  const int n = batch.n_agents;
  batch.advantages.resize(batch.steps, n);
  batch.value_targets.resize(batch.steps, n);
  std::vector<double> rewards(batch.rewards.data(), batch.rewards.data() + batch.steps);
  std::vector<double> values(static_cast<std::size_t>(batch.steps));
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t < batch.steps; ++t) values[t] = batch.values(t, i);
    const GaeResult r = gae(rewards, values, batch.dones, batch.bootstrap_values(i), config.discount_gamma,
                            config.gae_lambda);
    for (int t = 0; t < batch.steps; ++t) {
      batch.advantages(t, i) = r.advantages[t];
      batch.value_targets(t, i) = r.value_targets[t];
    }
  }
  if (config.normalize_advantages) {
    const double mean = batch.advantages.mean();
    const double var = (batch.advantages.array() - mean).square().mean();
    batch.advantages = ((batch.advantages.array() - mean) / (std::sqrt(var) + 1e-8)).matrix();
  }
}

// ---------------------------------------------------------------------------------------------
// Trainer

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), id};
  return std::mt19937_64(seq);
}

bool is_actor(Group g) { return g == Group::actor; }

}  // namespace

Trainer::Trainer(TrainConfig config, const envs::EnvFactory& env_factory)
    : config_((config.validate(), std::move(config))),
      env_(env_factory()),
      net_config_(marl::net_config(config_, *env_)),
      params_(nets::init_params(net_config_, config_.seed)),
      target_(params_),
      actor_opt_(params_, &is_actor, config_.lr_actor, config_.max_grad_norm),
      critic_opt_(params_, &nets::critic_side, config_.lr_critic, config_.max_grad_norm),
      env_rng_(stream(config_.seed, 1)),
      action_rng_(stream(config_.seed, 2)),
      noise_rng_(stream(config_.seed, 3)),
      shuffle_rng_(stream(config_.seed, 4)) {
  reset_env();
}

void Trainer::reset_env() {
  frame_ = env_->reset(env_rng_());
  gen_state_ = nets::GeneratorState::zeros(env_->n_agents(), config_.hidden_dim);
  episode_return_ = 0.0;
}

Matrix Trainer::uniform_matrix(Eigen::Index rows, Eigen::Index cols) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Matrix u(rows, cols);
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = dist(noise_rng_);
  return u;
}

RolloutBatch Trainer::collect_rollout() {
  const int n = env_->n_agents();
  const int t_len = config_.rollout_len;
  const int m = net_config_.n_hyperedges;
  const int h = config_.hidden_dim;
  const bool graph = !config_.plain_mappo;

  RolloutBatch b;
  b.n_agents = n;
  b.steps = t_len;
  b.obs.resize(static_cast<Eigen::Index>(t_len) * n, env_->obs_dim());
  b.global_states.resize(t_len, env_->state_dim());
  b.actions.resize(static_cast<std::size_t>(t_len) * n);
  b.log_probs.resize(static_cast<Eigen::Index>(t_len) * n);
  b.rewards.resize(t_len);
  b.dones.resize(t_len);
  b.noise.resize(static_cast<Eigen::Index>(t_len) * n, m);
  for (auto& layer : b.gen_states.layers) layer.resize(graph ? static_cast<Eigen::Index>(t_len) * n : 0, h);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int t = 0; t < t_len; ++t) {
    const Eigen::Index row = static_cast<Eigen::Index>(t) * n;
    b.obs.middleRows(row, n) = frame_.obs;
    b.global_states.row(t) = frame_.state.transpose();

    const std::vector<nets::Categorical> dists = nets::actor_forward_batch(frame_.obs, params_);
    std::vector<int> actions(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double u = unit(action_rng_);
      double cum = 0.0;
      int a = static_cast<int>(dists[i].probs.size()) - 1;
      for (int k = 0; k < dists[i].probs.size(); ++k) {
        cum += dists[i].probs(k);
        if (u < cum) {
          a = k;
          break;
        }
      }
      actions[i] = a;
      b.actions[row + i] = a;
      b.log_probs(row + i) = dists[i].log_prob(a);
    }

    const Matrix noise = hypergraph::make_noise(config_.noise, uniform_matrix(n, m));
    b.noise.middleRows(row, n) = noise;
    nets::GeneratorState next;
    if (graph) {
      for (int l = 0; l < nets::kGeneratorLayers; ++l) b.gen_states.layers[l].middleRows(row, n) = gen_state_.layers[l];
      auto [p, state] = nets::generator_forward(frame_.obs, gen_state_, params_);
      next = std::move(state);
      const Matrix y = config_.stochastic_edges_on ? hypergraph::relaxed_sample(p, noise, config_.tau).y : p.p();
      const hypergraph::Incidence inc = hypergraph::harden(hypergraph::RelaxedIncidence{y, config_.tau, noise});
      b.sk_hard.push_back(hypergraph::skewness(inc.b));
      b.sk_relaxed.push_back(hypergraph::skewness(Vector(y.colwise().sum().transpose())));
      b.p_entries.insert(b.p_entries.end(), p.p().data(), p.p().data() + p.p().size());
    }

    frame_ = env_->step(actions);
    b.rewards(t) = frame_.reward;
    b.dones[t] = frame_.done ? 1 : 0;
    episode_return_ += frame_.reward;
    if (frame_.done) {
      const bool completed = frame_.info.completed;
      recent_.push_back({episode_return_, completed ? frame_.info.steps : env_->step_limit(), completed});
      if (recent_.size() > kEpisodeWindow) recent_.pop_front();
      reset_env();
    } else if (graph) {
      if (!next.finite()) throw DivergenceError("generator state became non-finite");
      gen_state_ = std::move(next);
    }
  }

  b.bootstrap_obs = frame_.obs;
  b.bootstrap_global = frame_.state.transpose();
  b.bootstrap_gen = gen_state_;
  b.bootstrap_noise = hypergraph::make_noise(config_.noise, uniform_matrix(n, m));
  env_steps_ += t_len;
  return b;
}

MetricsRecord Trainer::update() {
  const ParamSet snapshot = params_;
  try {
    RolloutBatch batch = collect_rollout();
    auto [values, bootstrap] = evaluate_values(target_, batch, config_);
    batch.values = std::move(values);
    batch.bootstrap_values = std::move(bootstrap);
    compute_advantages(batch, config_);

    std::vector<int> order(static_cast<std::size_t>(batch.steps));
    std::iota(order.begin(), order.end(), 0);
    double objective = 0, entropy = 0, td = 0, sk = 0;
    int passes = 0;
    for (int e = 0; e < config_.epochs; ++e) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng_() % i]);
      for (int mb = 0; mb < config_.minibatches; ++mb) {
        const std::size_t lo = order.size() * mb / config_.minibatches;
        const std::size_t hi = order.size() * (mb + 1) / config_.minibatches;
        const RolloutBatch part = slice(batch, std::span<const int>(order.data() + lo, hi - lo));

        params_.zero_grad();
        const ActorParts a = actor_gradients(params_, part, config_);
        actor_opt_.step(params_);
        params_.zero_grad();
        const LossParts c = critic_gradients(params_, part, config_);
        critic_opt_.step(params_);

        objective += a.objective;
        entropy += a.entropy;
        td += c.td;
        sk += c.sk;
        ++passes;
      }
    }
    ++updates_;
    sync_target(params_, target_, config_.target_sync, updates_);

    MetricsRecord rec;
    rec.update = updates_;
    rec.env_steps = env_steps_;
    if (!recent_.empty()) {
      for (const Episode& ep : recent_) {
        rec.mean_return += ep.ret;
        rec.mean_makespan += ep.makespan;
        rec.completion_rate += ep.completed ? 1.0 : 0.0;
      }
      const double k = static_cast<double>(recent_.size());
      rec.mean_return /= k;
      rec.mean_makespan /= k;
      rec.completion_rate /= k;
    }
    rec.loss_actor = objective / passes;
    rec.entropy = entropy / passes;
    rec.loss_td = td / passes;
    rec.loss_sk = sk / passes;
    auto mean_of = [](const std::vector<double>& v) {
      return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    rec.sk_hard = mean_of(batch.sk_hard);
    rec.sk_relaxed = mean_of(batch.sk_relaxed);
    rec.mean_p = mean_of(batch.p_entries);
    if (!batch.p_entries.empty()) {
      const auto below = std::count_if(batch.p_entries.begin(), batch.p_entries.end(), [](double p) { return p < 0.5; });
      rec.frac_p_below_half = static_cast<double>(below) / static_cast<double>(batch.p_entries.size());
    }
    return rec;
  } catch (const DivergenceError&) {
    params_ = snapshot;
    throw;
  } catch (const diffnum::DomainError& e) {
    // Non-finite values inside the networks mean the update blew up.
    params_ = snapshot;
    throw DivergenceError(std::string("non-finite value during update ") + std::to_string(updates_ + 1) + ": " +
                          e.what());
  }
}

std::vector<MetricsRecord> train(const TrainConfig& config, const envs::EnvFactory& env_factory,
                                 const MetricsSink& sink) {
  Trainer trainer(config, env_factory);
  std::vector<MetricsRecord> records;
  const auto start = std::chrono::steady_clock::now();
  while (!trainer.finished()) {
    MetricsRecord rec = trainer.update();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (sink) sink(rec, trainer);
    records.push_back(rec);
  }
  return records;
}

envs::Policy greedy_policy(const ParamSet& params) {
  auto shared = std::make_shared<const ParamSet>(params);
  return [shared](const envs::EnvFrame& frame) {
    std::vector<int> actions;
    for (const auto& d : nets::actor_forward_batch(frame.obs, *shared)) actions.push_back(d.argmax());
    return actions;
  };
}

}  // namespace sdhn::marl
