#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sdhn/diffnum.hpp"
#include "sdhn/hypergraph.hpp"

namespace sdhn::nets {

using diffnum::Matrix;
using diffnum::Tape;
using diffnum::Var;
using diffnum::Vector;

inline constexpr int kGeneratorLayers = 3;
inline constexpr int kHgcnLayers = 2;
/// Floor applied to action probabilities before taking logs.
inline constexpr double kActionProbEps = 1e-8;

/// Non-finite values inside a forward or backward pass.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Group { encoder, generator, hgcn, actor, critic };

std::string_view to_string(Group g);
/// Parameters trained by the critic loss (everything except the actor).
bool critic_side(Group g);

struct NetConfig {
  int obs_dim = 0;
  int state_dim = 0;
  int n_actions = 5;
  int hidden = 64;
  int n_hyperedges = 1;
  /// Critic reads [encoded obs_i | state embedding] directly; no generator or HGCN parameters.
  bool plain_mappo = false;
};

struct Param {
  std::string name;
  Group group;
  Matrix value;
  Matrix grad;
};

/// Ordered named parameters with same-shape gradient slots.
class ParamSet {
 public:
  void add(std::string name, Group group, Matrix value);

  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  std::size_t index(std::string_view name) const;
  const Param& get(std::string_view name) const { return params_[index(name)]; }
  bool contains(std::string_view name) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  std::size_t scalar_count() const;
  /// Copies the values of every parameter in `groups` from `src` (same layout required).
  void copy_values_from(const ParamSet& src, bool (*select)(Group));
  bool values_equal(const ParamSet& other, bool (*select)(Group)) const;

 private:
  std::vector<Param> params_;
};

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases, orthogonal
/// recurrent state-to-state matrices. Deterministic in `seed`.
ParamSet init_params(const NetConfig& config, std::uint64_t seed);

/// Per-layer hidden vectors of the generator, one row per agent.
struct GeneratorState {
  std::array<Matrix, kGeneratorLayers> layers;

  static GeneratorState zeros(int n_agents, int hidden);
  bool finite() const;
};

/// Parameters placed on a tape, in ParamSet order.
class BoundParams {
 public:
  /// `differentiable` selects variables (gradients recorded) or constants.
  BoundParams(Tape& tape, const ParamSet& params, bool differentiable);

  Var operator[](std::string_view name) const { return vars_[params_->index(name)]; }
  Tape& tape() const { return *tape_; }
  const ParamSet& params() const { return *params_; }
  /// Adds this tape's gradients into the gradient slots of `target` (same layout as bound set).
  void accumulate_grads(ParamSet& target) const;

 private:
  Tape* tape_;
  const ParamSet* params_;
  std::vector<Var> vars_;
};

// Taped building blocks. Row-stacked batches: agent rows of step k occupy rows [k·N, (k+1)·N).

Var encode_obs(const BoundParams& p, Var obs);

struct GeneratorOutput {
  /// Clamped hyperedge probabilities, one row per agent.
  Var p;
  std::array<Var, kGeneratorLayers> hidden;
};
/// Three stacked recurrent layers h' = tanh(x Wx + h Wh + b) with weights shared across agents,
/// then a sigmoid head giving each agent's M hyperedge memberships.
GeneratorOutput generator_forward(const BoundParams& p, Var obs, const std::array<Var, kGeneratorLayers>& state);

/// Per-agent values from messages (B·N rows) and global states (B rows).
Var critic_values(const BoundParams& p, Var messages, Var global_states, Eigen::Index n_agents);

Var actor_logits(const BoundParams& p, Var obs);

struct CriticInputs {
  Matrix obs;             // B·N × obs_dim
  Matrix global_states;   // B × state_dim
  GeneratorState state;   // each layer B·N × hidden
  Matrix noise;           // B·N × M
};

struct CriticOptions {
  int n_agents = 1;
  double tau = 1.0;
  bool stochastic_edges = true;
};

struct CriticPass {
  Var values;       // B·N × 1
  Var p;            // B·N × M (invalid for plain MAPPO)
  Var y;            // relaxed incidence, or p itself with deterministic edges
  Var h;            // hard incidence
  Var sk_relaxed;   // B × 1 skewness of relaxed degrees
  std::array<Var, kGeneratorLayers> next_state;
};

/// encode -> generate P_H -> relaxed sample -> harden (straight-through) -> 2×HGCN -> critic.
CriticPass critic_pipeline(const BoundParams& p, const CriticInputs& in, const CriticOptions& options);

// Untaped convenience forms.

Matrix encode_obs(const Matrix& obs, const ParamSet& params);
std::pair<hypergraph::HyperedgeProbMatrix, GeneratorState> generator_forward(const Matrix& obs,
                                                                             const GeneratorState& state,
                                                                             const ParamSet& params);
Vector critic_forward(const Vector& global_state, const Matrix& messages, const ParamSet& params);

struct Categorical {
  Vector probs;

  int argmax() const;
  double log_prob(int action) const;
};
Categorical actor_forward(const Vector& obs_i, const ParamSet& params);
/// One distribution per row of `obs`.
std::vector<Categorical> actor_forward_batch(const Matrix& obs, const ParamSet& params);

// Checkpoints: "SDHN1", u64 config digest, u64 scalar count, then every parameter in declared order
// as little-endian IEEE-754 binary32, row-major.

void save_checkpoint(std::ostream& out, const ParamSet& params, std::uint64_t digest);
void save_checkpoint(const std::string& path, const ParamSet& params, std::uint64_t digest);
/// Loads into a freshly laid-out ParamSet for `config`; rejects bad magic, digest or size.
ParamSet load_checkpoint(std::istream& in, const NetConfig& config, std::uint64_t expected_digest);
ParamSet load_checkpoint(const std::string& path, const NetConfig& config, std::uint64_t expected_digest);

}  // namespace sdhn::nets
