#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdhn/diffnum.hpp"

namespace sdhn::envs {

using diffnum::Matrix;
using diffnum::Vector;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Action : int { up = 0, down = 1, left = 2, right = 3, stay = 4 };
inline constexpr int kNumActions = 5;

/// Grid cell; x grows to the right, y grows downward ("up" is y - 1).
struct Cell {
  int x = 0;
  int y = 0;

  friend bool operator==(const Cell&, const Cell&) = default;
  Cell operator+(const Cell& o) const { return {x + o.x, y + o.y}; }
  Cell operator-(const Cell& o) const { return {x - o.x, y - o.y}; }
};

Cell action_delta(int action);

struct StepInfo {
  int collisions = 0;  // cumulative over the episode
  int deliveries = 0;  // cumulative over the episode
  bool formation_satisfied = false;
  bool completed = false;
  int steps = 0;
};

struct EnvFrame {
  Matrix obs;    // N × obs_dim
  Vector state;  // global state
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

/// Static map: bounds plus obstacle mask.
class Grid {
 public:
  Grid(int width, int height, const std::vector<Cell>& obstacles = {});

  int width() const { return width_; }
  int height() const { return height_; }
  bool in_bounds(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width_ && c.y < height_; }
  bool obstacle(Cell c) const { return obstacle_[index(c)] != 0; }
  /// Out of bounds or obstacle.
  bool blocked(Cell c) const { return !in_bounds(c) || obstacle(c); }
  int index(Cell c) const { return c.y * width_ + c.x; }
  int cells() const { return width_ * height_; }

 private:
  int width_;
  int height_;
  std::vector<std::uint8_t> obstacle_;
};

/// Simultaneous-move resolution. Moves into walls or obstacles, moves contested by another agent,
/// swaps, and moves into a cell whose occupant ends up staying are cancelled; each cancelled move
/// counts one collision. Returns the new positions.
std::vector<Cell> resolve_moves(const Grid& grid, const std::vector<Cell>& positions, std::span<const int> actions,
                                int& collisions);

/// Common interface of the gridworld tasks.
class Env {
 public:
  virtual ~Env() = default;

  virtual EnvFrame reset(std::uint64_t seed) = 0;
  virtual EnvFrame step(std::span<const int> actions) = 0;

  virtual std::string name() const = 0;
  virtual int n_agents() const = 0;
  virtual int obs_dim() const = 0;
  virtual int state_dim() const = 0;
  virtual int step_limit() const = 0;
  int n_actions() const { return kNumActions; }

  virtual const std::vector<Cell>& positions() const = 0;
};

using EnvFactory = std::function<std::unique_ptr<Env>()>;

// ---------------------------------------------------------------------------------------------
// Formation

struct FormationLayout {
  std::vector<Cell> agents;
  /// Agent i's goal cell is goal_anchor + offsets[i].
  Cell goal_anchor;
};

struct FormationConfig {
  int n_agents = 3;
  int width = 7;
  int height = 7;
  int step_limit = 100;
  /// Target shape as per-agent offsets; empty means a vertical line (0,0), (0,1), ...
  std::vector<Cell> offsets;
  std::vector<Cell> obstacles;
  /// When set, every reset uses this layout instead of a seeded placement.
  std::optional<FormationLayout> fixed_layout;
};

/// Move a team into a target shape whose centroid sits at a goal on the right side of the map.
///
/// Observation of agent i (length 4 + 2(N-1) + 9 + 1):
///   [x, y] own cell, [tx - x, ty - y] offset to own goal cell,
///   [xj - x, yj - y] for every other agent j in index order,
///   3×3 egocentric window (row-major, dy = -1..1, dx = -1..1; 1 = wall/obstacle/agent, centre 0),
///   formation-matched flag.
/// Global state: per-cell agent, obstacle and goal masks (row-major), then per agent
/// [x/W, y/H, (tx-x)/W, (ty-y)/H], then [formation-matched, steps/step_limit].
class FormationEnv final : public Env {
 public:
  static constexpr double kStepCost = -0.01;
  static constexpr double kFormationBonus = 0.1;
  static constexpr double kProgressWeight = 1.0;
  static constexpr double kCompletionBonus = 5.0;

  explicit FormationEnv(FormationConfig config);

  EnvFrame reset(std::uint64_t seed) override;
  /// Starts an episode from an explicit layout (validated).
  EnvFrame reset_with_layout(const FormationLayout& layout);
  EnvFrame step(std::span<const int> actions) override;

  std::string name() const override { return "formation"; }
  int n_agents() const override { return config_.n_agents; }
  int obs_dim() const override { return 4 + 2 * (config_.n_agents - 1) + 9 + 1; }
  int state_dim() const override { return 3 * grid_.cells() + 4 * config_.n_agents + 2; }
  int step_limit() const override { return config_.step_limit; }
  const std::vector<Cell>& positions() const override { return positions_; }

  const std::vector<Cell>& offsets() const { return offsets_; }
  const std::vector<Cell>& targets() const { return targets_; }
  bool formation_matched() const;
  /// Manhattan distance between the team centroid and the goal centroid.
  double centroid_distance() const;

 private:
  EnvFrame frame(double reward) const;

  FormationConfig config_;
  Grid grid_;
  std::vector<Cell> offsets_;
  std::vector<Cell> positions_;
  std::vector<Cell> targets_;
  StepInfo info_;
  bool done_ = true;
};

// ---------------------------------------------------------------------------------------------
// Warehouse

struct WarehouseConfig {
  int n_agents = 3;
  int width = 8;
  int height = 8;
  int step_limit = 256;
  int n_shelves = 4;
  /// Length of the request queue; the episode completes once every request is delivered.
  int n_requests = 2;
  std::vector<Cell> obstacles;
};

/// Fetch requested shelves and bring them to a single station.
///
/// Shelves sit on row 1 at x = 1, 3, 5, ...; the station is the bottom-centre cell. `stay` doubles
/// as interact: it picks up the currently requested shelf when standing on it, or returns a carried
/// shelf to its origin. A carried requested shelf that reaches the station is delivered.
///
/// Observation of agent i (length 14): 3×3 egocentric occupancy window (as in FormationEnv),
/// [x, y], carry flag, [sx, sy] origin cell of the requested shelf.
/// Global state: per-cell agent, idle-shelf and requested-shelf masks, then per agent
/// [x/W, y/H, carry], then [deliveries/n_requests, steps/step_limit].
class WarehouseEnv final : public Env {
 public:
  static constexpr double kStepCost = -0.005;
  static constexpr double kDeliveryReward = 1.0;

  explicit WarehouseEnv(WarehouseConfig config);

  EnvFrame reset(std::uint64_t seed) override;
  EnvFrame step(std::span<const int> actions) override;

  std::string name() const override { return "warehouse"; }
  int n_agents() const override { return config_.n_agents; }
  int obs_dim() const override { return 14; }
  int state_dim() const override { return 3 * grid_.cells() + 3 * config_.n_agents + 2; }
  int step_limit() const override { return config_.step_limit; }
  const std::vector<Cell>& positions() const override { return positions_; }

  const std::vector<Cell>& shelves() const { return shelves_; }
  Cell station() const { return station_; }
  /// Remaining request queue (front = current request).
  const std::vector<int>& requests() const { return requests_; }
  /// Shelf index carried by each agent, -1 when empty-handed.
  const std::vector<int>& carrying() const { return carrying_; }

 private:
  EnvFrame frame(double reward) const;

  WarehouseConfig config_;
  Grid grid_;
  std::vector<Cell> shelves_;
  Cell station_;
  std::vector<Cell> positions_;
  std::vector<int> carrying_;
  std::vector<int> requests_;
  std::size_t next_request_ = 0;
  StepInfo info_;
  bool done_ = true;
};

// ---------------------------------------------------------------------------------------------
// Evaluation

/// Maps a frame to one action per agent.
using Policy = std::function<std::vector<int>(const EnvFrame&)>;

struct EvalReport {
  double mean_return = 0.0;
  double mean_makespan = 0.0;
  double completion_rate = 0.0;
  int episodes = 0;
};

/// Runs `episodes` episodes seeded seed, seed+1, ...; an episode stops at completion, at the
/// environment's own limit, or after `step_limit` steps. Incomplete episodes count step_limit
/// towards the makespan.
EvalReport evaluate(const Policy& policy, Env& env, int episodes, int step_limit, std::uint64_t seed);

/// Uniformly random joint actions drawn from its own seeded stream.
Policy random_policy(int n_agents, std::uint64_t seed);

/// Writes one line per step: {"step", "positions", "actions", "reward", "info"}.
class TraceWriter {
 public:
  explicit TraceWriter(std::ostream& out) : out_(out) {}
  void write(int step, const Env& env, std::span<const int> actions, const EnvFrame& frame);

 private:
  std::ostream& out_;
};

}  // namespace sdhn::envs
