#include "sdhn/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace sdhn::envs {

Cell action_delta(int action) {
  switch (static_cast<Action>(action)) {
    case Action::up:
      return {0, -1};
    case Action::down:
      return {0, 1};
    case Action::left:
      return {-1, 0};
    case Action::right:
      return {1, 0};
    case Action::stay:
      return {0, 0};
  }
  throw StateError("invalid action " + std::to_string(action));
}

Grid::Grid(int width, int height, const std::vector<Cell>& obstacles)
    : width_(width), height_(height), obstacle_(static_cast<std::size_t>(width * height), 0) {
  if (width < 1 || height < 1) throw ConfigError("grid dimensions must be positive");
  for (const Cell& c : obstacles) {
    if (!in_bounds(c)) throw ConfigError("obstacle outside the grid");
    obstacle_[index(c)] = 1;
  }
}

std::vector<Cell> resolve_moves(const Grid& grid, const std::vector<Cell>& positions, std::span<const int> actions,
                                int& collisions) {
  const std::size_t n = positions.size();
  if (actions.size() != n) {
    throw StateError("expected " + std::to_string(n) + " actions, got " + std::to_string(actions.size()));
  }
  std::vector<Cell> target(n);
  std::vector<bool> moving(n, false);
  auto cancel = [&](std::size_t i) {
    moving[i] = false;
    ++collisions;
  };

  for (std::size_t i = 0; i < n; ++i) {
    if (actions[i] < 0 || actions[i] >= kNumActions) throw StateError("invalid action " + std::to_string(actions[i]));
    target[i] = positions[i] + action_delta(actions[i]);
    if (actions[i] == static_cast<int>(Action::stay)) continue;
    moving[i] = true;
    if (grid.blocked(target[i])) cancel(i);
  }

  // Contested targets cancel every contender.
  std::vector<bool> contested(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (moving[i] && moving[j] && target[i] == target[j]) contested[i] = contested[j] = true;
    }
  }
  // Swaps.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (moving[i] && moving[j] && target[i] == positions[j] && target[j] == positions[i]) {
        contested[i] = contested[j] = true;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (contested[i]) cancel(i);
  }

  // Moving into a cell whose occupant stays is cancelled; cancellations can cascade.
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (!moving[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i && !moving[j] && positions[j] == target[i]) {
          cancel(i);
          changed = true;
          break;
        }
      }
    }
  }

  std::vector<Cell> out = positions;
  for (std::size_t i = 0; i < n; ++i) {
    if (moving[i]) out[i] = target[i];
  }
  return out;
}

namespace {

bool occupied_by_other(const std::vector<Cell>& positions, std::size_t self, Cell c) {
  for (std::size_t j = 0; j < positions.size(); ++j) {
    if (j != self && positions[j] == c) return true;
  }
  return false;
}

/// 3×3 window around agent `self`: 1 for wall, obstacle or another agent; centre is 0.
void write_window(const Grid& grid, const std::vector<Cell>& positions, std::size_t self, double* out) {
  int k = 0;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx, ++k) {
      if (dx == 0 && dy == 0) {
        out[k] = 0.0;
        continue;
      }
      const Cell c = positions[self] + Cell{dx, dy};
      out[k] = (grid.blocked(c) || occupied_by_other(positions, self, c)) ? 1.0 : 0.0;
    }
  }
}

std::vector<Cell> free_cells(const Grid& grid, int x_begin, int x_end, const std::vector<Cell>& exclude = {}) {
  std::vector<Cell> out;
  for (int y = 0; y < grid.height(); ++y) {
    for (int x = x_begin; x < x_end; ++x) {
      const Cell c{x, y};
      if (grid.obstacle(c)) continue;
      if (std::find(exclude.begin(), exclude.end(), c) != exclude.end()) continue;
      out.push_back(c);
    }
  }
  return out;
}

std::vector<Cell> sample_distinct(std::vector<Cell> cells, int count, std::mt19937_64& rng) {
  if (static_cast<int>(cells.size()) < count) {
    throw ConfigError("cannot place " + std::to_string(count) + " agents on " + std::to_string(cells.size()) +
                      " free cells");
  }
  // Partial Fisher-Yates driven by the engine directly so layouts do not depend on distribution internals.
  for (int i = 0; i < count; ++i) {
    const auto remaining = static_cast<std::uint64_t>(cells.size() - i);
    const auto j = static_cast<std::size_t>(i + rng() % remaining);
    std::swap(cells[i], cells[j]);
  }
  cells.resize(count);
  return cells;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// FormationEnv

FormationEnv::FormationEnv(FormationConfig config)
    : config_(std::move(config)), grid_(config_.width, config_.height, config_.obstacles) {
  if (config_.n_agents < 2) throw ConfigError("formation needs at least 2 agents");
  if (config_.width < 5 || config_.height < 5) throw ConfigError("formation grid must be at least 5x5");
  if (config_.step_limit < 1) throw ConfigError("step limit must be positive");

  offsets_ = config_.offsets;
  if (offsets_.empty()) {
    for (int i = 0; i < config_.n_agents; ++i) offsets_.push_back({0, i});
  }
  if (static_cast<int>(offsets_.size()) != config_.n_agents) {
    throw ConfigError("formation has " + std::to_string(offsets_.size()) + " offsets for " +
                      std::to_string(config_.n_agents) + " agents");
  }
  int min_x = offsets_[0].x, min_y = offsets_[0].y;
  for (const Cell& o : offsets_) {
    min_x = std::min(min_x, o.x);
    min_y = std::min(min_y, o.y);
  }
  for (Cell& o : offsets_) o = o - Cell{min_x, min_y};
  for (std::size_t i = 0; i < offsets_.size(); ++i) {
    for (std::size_t j = i + 1; j < offsets_.size(); ++j) {
      if (offsets_[i] == offsets_[j]) throw ConfigError("formation offsets must be distinct");
    }
  }
}

bool FormationEnv::formation_matched() const {
  for (std::size_t i = 1; i < positions_.size(); ++i) {
    if (positions_[i] - positions_[0] != offsets_[i] - offsets_[0]) return false;
  }
  return true;
}

double FormationEnv::centroid_distance() const {
  double dx = 0, dy = 0;
  for (std::size_t i = 0; i < positions_.size(); ++i) {
    dx += positions_[i].x - targets_[i].x;
    dy += positions_[i].y - targets_[i].y;
  }
  const double n = static_cast<double>(positions_.size());
  return std::abs(dx / n) + std::abs(dy / n);
}

EnvFrame FormationEnv::reset(std::uint64_t seed) {
  if (config_.fixed_layout) return reset_with_layout(*config_.fixed_layout);

  std::mt19937_64 rng(seed);
  const int half = config_.width / 2;
  FormationLayout layout;
  layout.agents = sample_distinct(free_cells(grid_, 0, half), config_.n_agents, rng);

  int span_x = 0, span_y = 0;
  for (const Cell& o : offsets_) {
    span_x = std::max(span_x, o.x);
    span_y = std::max(span_y, o.y);
  }
  const int x_lo = config_.width - half;
  const int x_hi = config_.width - 1 - span_x;
  const int y_hi = config_.height - 1 - span_y;
  if (x_hi < x_lo || y_hi < 0) throw ConfigError("formation does not fit in the goal region");
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const Cell anchor{x_lo + static_cast<int>(rng() % static_cast<std::uint64_t>(x_hi - x_lo + 1)),
                      static_cast<int>(rng() % static_cast<std::uint64_t>(y_hi + 1))};
    const bool clear = std::none_of(offsets_.begin(), offsets_.end(),
                                    [&](const Cell& o) { return grid_.obstacle(anchor + o); });
    if (clear) {
      layout.goal_anchor = anchor;
      return reset_with_layout(layout);
    }
  }
  throw ConfigError("no obstacle-free goal placement found after 1000 attempts");
}

EnvFrame FormationEnv::reset_with_layout(const FormationLayout& layout) {
  if (static_cast<int>(layout.agents.size()) != config_.n_agents) throw ConfigError("layout agent count mismatch");
  for (std::size_t i = 0; i < layout.agents.size(); ++i) {
    if (grid_.blocked(layout.agents[i])) throw ConfigError("layout places an agent on a blocked cell");
    if (occupied_by_other(layout.agents, i, layout.agents[i])) throw ConfigError("layout places agents on one cell");
  }
  targets_.clear();
  for (const Cell& o : offsets_) {
    const Cell t = layout.goal_anchor + o;
    if (grid_.blocked(t)) throw ConfigError("layout goal cell is blocked");
    targets_.push_back(t);
  }
  positions_ = layout.agents;
  info_ = StepInfo{};
  info_.formation_satisfied = formation_matched();
  done_ = false;
  return frame(0.0);
}

EnvFrame FormationEnv::step(std::span<const int> actions) {
  if (done_) throw StateError("step called on a finished episode; call reset first");
  const double before = centroid_distance();
  positions_ = resolve_moves(grid_, positions_, actions, info_.collisions);
  ++info_.steps;

  const bool matched = formation_matched();
  info_.formation_satisfied = matched;
  info_.completed = positions_ == targets_;

  double reward = kStepCost + kProgressWeight * (before - centroid_distance());
  if (matched) reward += kFormationBonus;
  if (info_.completed) reward += kCompletionBonus;
  done_ = info_.completed || info_.steps >= config_.step_limit;
  return frame(reward);
}

EnvFrame FormationEnv::frame(double reward) const {
  const int n = config_.n_agents;
  EnvFrame f;
  f.reward = reward;
  f.done = done_;
  f.info = info_;
  f.obs = Matrix::Zero(n, obs_dim());
  for (int i = 0; i < n; ++i) {
    const Cell p = positions_[i];
    double* row = f.obs.row(i).data();
    int k = 0;
    row[k++] = p.x;
    row[k++] = p.y;
    row[k++] = targets_[i].x - p.x;
    row[k++] = targets_[i].y - p.y;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      row[k++] = positions_[j].x - p.x;
      row[k++] = positions_[j].y - p.y;
    }
    write_window(grid_, positions_, static_cast<std::size_t>(i), row + k);
    k += 9;
    row[k++] = info_.formation_satisfied ? 1.0 : 0.0;
  }

  const int cells = grid_.cells();
  const double w = config_.width, h = config_.height;
  f.state = Vector::Zero(state_dim());
  for (int i = 0; i < n; ++i) {
    f.state(grid_.index(positions_[i])) = 1.0;
    f.state(2 * cells + grid_.index(targets_[i])) = 1.0;
  }
  for (int c = 0; c < cells; ++c) {
    f.state(cells + c) = grid_.obstacle({c % config_.width, c / config_.width}) ? 1.0 : 0.0;
  }
  int k = 3 * cells;
  for (int i = 0; i < n; ++i) {
    f.state(k++) = positions_[i].x / w;
    f.state(k++) = positions_[i].y / h;
    f.state(k++) = (targets_[i].x - positions_[i].x) / w;
    f.state(k++) = (targets_[i].y - positions_[i].y) / h;
  }
  f.state(k++) = info_.formation_satisfied ? 1.0 : 0.0;
  f.state(k++) = static_cast<double>(info_.steps) / config_.step_limit;
  return f;
}

// ---------------------------------------------------------------------------------------------
// WarehouseEnv

WarehouseEnv::WarehouseEnv(WarehouseConfig config)
    : config_(std::move(config)), grid_(config_.width, config_.height, config_.obstacles) {
  if (config_.n_agents < 1) throw ConfigError("warehouse needs at least 1 agent");
  if (config_.height < 3) throw ConfigError("warehouse grid must be at least 3 rows high");
  if (config_.n_shelves < 1 || 1 + 2 * (config_.n_shelves - 1) >= config_.width) {
    throw ConfigError("warehouse width " + std::to_string(config_.width) + " cannot hold " +
                      std::to_string(config_.n_shelves) + " shelves");
  }
  if (config_.n_requests < 1) throw ConfigError("request queue length must be at least 1");
  if (config_.step_limit < 1) throw ConfigError("step limit must be positive");
  for (int s = 0; s < config_.n_shelves; ++s) {
    const Cell c{1 + 2 * s, 1};
    if (grid_.obstacle(c)) throw ConfigError("shelf cell is an obstacle");
    shelves_.push_back(c);
  }
  station_ = {config_.width / 2, config_.height - 1};
  if (grid_.obstacle(station_)) throw ConfigError("station cell is an obstacle");
}

EnvFrame WarehouseEnv::reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Cell> exclude = shelves_;
  exclude.push_back(station_);
  positions_ = sample_distinct(free_cells(grid_, 0, config_.width, exclude), config_.n_agents, rng);
  carrying_.assign(config_.n_agents, -1);
  requests_.clear();
  for (int r = 0; r < config_.n_requests; ++r) {
    requests_.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(config_.n_shelves)));
  }
  next_request_ = 0;
  info_ = StepInfo{};
  done_ = false;
  return frame(0.0);
}

EnvFrame WarehouseEnv::step(std::span<const int> actions) {
  if (done_) throw StateError("step called on a finished episode; call reset first");
  positions_ = resolve_moves(grid_, positions_, actions, info_.collisions);
  ++info_.steps;

  double reward = kStepCost;
  const int requested = requests_[next_request_];
  const auto shelf_taken = [&](int s) { return std::find(carrying_.begin(), carrying_.end(), s) != carrying_.end(); };
  for (int i = 0; i < config_.n_agents; ++i) {
    if (actions[i] != static_cast<int>(Action::stay)) continue;
    if (carrying_[i] >= 0) {
      carrying_[i] = -1;
    } else if (positions_[i] == shelves_[requested] && !shelf_taken(requested)) {
      carrying_[i] = requested;
    }
  }
  for (int i = 0; i < config_.n_agents && next_request_ < requests_.size(); ++i) {
    if (carrying_[i] == requests_[next_request_] && positions_[i] == station_) {
      carrying_[i] = -1;
      reward += kDeliveryReward;
      ++info_.deliveries;
      ++next_request_;
    }
  }
  info_.completed = next_request_ == requests_.size();
  done_ = info_.completed || info_.steps >= config_.step_limit;
  return frame(reward);
}

EnvFrame WarehouseEnv::frame(double reward) const {
  const int n = config_.n_agents;
  EnvFrame f;
  f.reward = reward;
  f.done = done_;
  f.info = info_;
  const int requested = next_request_ < requests_.size() ? requests_[next_request_] : -1;
  const Cell req_cell = requested >= 0 ? shelves_[requested] : Cell{-1, -1};

  f.obs = Matrix::Zero(n, obs_dim());
  for (int i = 0; i < n; ++i) {
    double* row = f.obs.row(i).data();
    write_window(grid_, positions_, static_cast<std::size_t>(i), row);
    row[9] = positions_[i].x;
    row[10] = positions_[i].y;
    row[11] = carrying_[i] >= 0 ? 1.0 : 0.0;
    row[12] = req_cell.x;
    row[13] = req_cell.y;
  }

  const int cells = grid_.cells();
  f.state = Vector::Zero(state_dim());
  for (int i = 0; i < n; ++i) f.state(grid_.index(positions_[i])) = 1.0;
  for (int s = 0; s < config_.n_shelves; ++s) {
    if (std::find(carrying_.begin(), carrying_.end(), s) == carrying_.end()) {
      f.state(cells + grid_.index(shelves_[s])) = 1.0;
    }
  }
  if (requested >= 0) f.state(2 * cells + grid_.index(req_cell)) = 1.0;
  int k = 3 * cells;
  for (int i = 0; i < n; ++i) {
    f.state(k++) = static_cast<double>(positions_[i].x) / config_.width;
    f.state(k++) = static_cast<double>(positions_[i].y) / config_.height;
    f.state(k++) = carrying_[i] >= 0 ? 1.0 : 0.0;
  }
  f.state(k++) = static_cast<double>(info_.deliveries) / config_.n_requests;
  f.state(k++) = static_cast<double>(info_.steps) / config_.step_limit;
  return f;
}

// ---------------------------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(const Policy& policy, Env& env, int episodes, int step_limit, std::uint64_t seed) {
  EvalReport report;
  report.episodes = std::max(episodes, 0);
  if (episodes <= 0) return report;
  double total_return = 0, total_makespan = 0;
  int completed = 0;
  for (int e = 0; e < episodes; ++e) {
    EnvFrame frame = env.reset(seed + static_cast<std::uint64_t>(e));
    double ret = 0;
    int steps = 0;
    while (!frame.done && steps < step_limit) {
      const std::vector<int> actions = policy(frame);
      frame = env.step(actions);
      ret += frame.reward;
      ++steps;
    }
    total_return += ret;
    if (frame.info.completed) {
      ++completed;
      total_makespan += steps;
    } else {
      total_makespan += step_limit;
    }
  }
  report.mean_return = total_return / episodes;
  report.mean_makespan = total_makespan / episodes;
  report.completion_rate = static_cast<double>(completed) / episodes;
  return report;
}

Policy random_policy(int n_agents, std::uint64_t seed) {
  auto rng = std::make_shared<std::mt19937_64>(seed);
  return [rng, n_agents](const EnvFrame&) {
    std::vector<int> actions(static_cast<std::size_t>(n_agents));
    for (int& a : actions) a = static_cast<int>((*rng)() % kNumActions);
    return actions;
  };
}

void TraceWriter::write(int step, const Env& env, std::span<const int> actions, const EnvFrame& frame) {
  nlohmann::json positions = nlohmann::json::array();
  for (const Cell& c : env.positions()) positions.push_back({c.x, c.y});
  nlohmann::json record = {
      {"step", step},
      {"positions", positions},
      {"actions", std::vector<int>(actions.begin(), actions.end())},
      {"reward", frame.reward},
      {"info",
       {{"collisions", frame.info.collisions},
        {"deliveries", frame.info.deliveries},
        {"formation_satisfied", frame.info.formation_satisfied},
        {"completed", frame.info.completed},
        {"steps", frame.info.steps}}},
  };
  out_ << record.dump() << '\n';
}

}  // namespace sdhn::envs
