#include "sdhn/nets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace sdhn::nets {

using diffnum::ShapeError;

std::string_view to_string(Group g) {
  switch (g) {
    case Group::encoder:
      return "encoder";
    case Group::generator:
      return "generator";
    case Group::hgcn:
      return "hgcn";
    case Group::actor:
      return "actor";
    case Group::critic:
      return "critic";
  }
  return "?";
}

bool critic_side(Group g) { return g != Group::actor; }

void ParamSet::add(std::string name, Group group, Matrix value) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  Matrix grad = Matrix::Zero(value.rows(), value.cols());
  params_.push_back(Param{std::move(name), group, std::move(value), std::move(grad)});
}

std::size_t ParamSet::index(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

bool ParamSet::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Param& p) { return p.name == name; });
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParamSet::copy_values_from(const ParamSet& src, bool (*select)(Group)) {
  if (src.size() != size()) throw std::logic_error("parameter layouts differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (select(params_[i].group)) params_[i].value = src.params_[i].value;
  }
}

bool ParamSet::values_equal(const ParamSet& other, bool (*select)(Group)) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!select(params_[i].group)) continue;
    const Matrix& a = params_[i].value;
    const Matrix& b = other.params_[i].value;
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    if (std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) != 0) return false;
  }
  return true;
}

namespace {

Matrix glorot(int fan_in, int fan_out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix orthogonal(int n, std::mt19937_64& rng) {
  const Matrix draw = glorot(n, n, rng);
  Eigen::HouseholderQR<Matrix> qr(draw);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q;
}

Matrix zeros_row(int n) { return Matrix::Zero(1, n); }

}  // namespace

ParamSet init_params(const NetConfig& c, std::uint64_t seed) {
  if (c.obs_dim < 1 || c.state_dim < 1 || c.hidden < 1 || c.n_actions < 1 || c.n_hyperedges < 1) {
    throw ShapeError("network dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  const int h = c.hidden;
  ParamSet ps;
  ps.add("encoder.w", Group::encoder, glorot(c.obs_dim, h, rng));
  ps.add("encoder.b", Group::encoder, zeros_row(h));
  if (!c.plain_mappo) {
    for (int l = 0; l < kGeneratorLayers; ++l) {
      const std::string pre = "generator.l" + std::to_string(l);
      ps.add(pre + ".wx", Group::generator, glorot(l == 0 ? c.obs_dim : h, h, rng));
      ps.add(pre + ".wh", Group::generator, orthogonal(h, rng));
      ps.add(pre + ".b", Group::generator, zeros_row(h));
    }
    ps.add("generator.head.w", Group::generator, glorot(h, c.n_hyperedges, rng));
    ps.add("generator.head.b", Group::generator, zeros_row(c.n_hyperedges));
    for (int l = 0; l < kHgcnLayers; ++l) {
      ps.add("hgcn.theta" + std::to_string(l), Group::hgcn, glorot(h, h, rng));
    }
  }
  ps.add("actor.w0", Group::actor, glorot(c.obs_dim, h, rng));
  ps.add("actor.b0", Group::actor, zeros_row(h));
  ps.add("actor.w1", Group::actor, glorot(h, h, rng));
  ps.add("actor.b1", Group::actor, zeros_row(h));
  ps.add("actor.head.w", Group::actor, glorot(h, c.n_actions, rng));
  ps.add("actor.head.b", Group::actor, zeros_row(c.n_actions));
  ps.add("critic.state.w", Group::critic, glorot(c.state_dim, h, rng));
  ps.add("critic.state.b", Group::critic, zeros_row(h));
  ps.add("critic.w0", Group::critic, glorot(2 * h, h, rng));
  ps.add("critic.b0", Group::critic, zeros_row(h));
  ps.add("critic.w1", Group::critic, glorot(h, h, rng));
  ps.add("critic.b1", Group::critic, zeros_row(h));
  ps.add("critic.head.w", Group::critic, glorot(h, 1, rng));
  ps.add("critic.head.b", Group::critic, zeros_row(1));
  return ps;
}

GeneratorState GeneratorState::zeros(int n_agents, int hidden) {
  GeneratorState s;
  for (auto& l : s.layers) l = Matrix::Zero(n_agents, hidden);
  return s;
}

bool GeneratorState::finite() const {
  return std::all_of(layers.begin(), layers.end(), [](const Matrix& m) { return m.allFinite(); });
}

BoundParams::BoundParams(Tape& tape, const ParamSet& params, bool differentiable)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (const Param& p : params) vars_.push_back(differentiable ? tape.variable(p.value) : tape.constant(p.value));
}

void BoundParams::accumulate_grads(ParamSet& target) const {
  if (target.size() != vars_.size()) throw std::logic_error("parameter layouts differ");
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (tape_->requires_grad(vars_[i])) target[i].grad += tape_->grad(vars_[i]);
  }
}

namespace {

Var affine(const BoundParams& p, Var x, const std::string& w, const std::string& b) {
  return diffnum::add(diffnum::matmul(x, p[w]), p[b]);
}

}  // namespace

Var encode_obs(const BoundParams& p, Var obs) { return diffnum::relu(affine(p, obs, "encoder.w", "encoder.b")); }

GeneratorOutput generator_forward(const BoundParams& p, Var obs, const std::array<Var, kGeneratorLayers>& state) {
  for (const Var& h : state) {
    if (!h.value().allFinite()) throw DivergenceError("generator prior state is non-finite");
  }
  GeneratorOutput out;
  Var input = obs;
  for (int l = 0; l < kGeneratorLayers; ++l) {
    const std::string pre = "generator.l" + std::to_string(l);
    Var pre_act = diffnum::add(diffnum::add(diffnum::matmul(input, p[pre + ".wx"]), diffnum::matmul(state[l], p[pre + ".wh"])),
                               p[pre + ".b"]);
    out.hidden[l] = diffnum::tanh(pre_act);
    if (!out.hidden[l].value().allFinite()) throw DivergenceError("generator hidden state became non-finite");
    input = out.hidden[l];
  }
  Var logits = affine(p, input, "generator.head.w", "generator.head.b");
  out.p = diffnum::clamp(diffnum::sigmoid(logits), hypergraph::kProbEps, 1.0 - hypergraph::kProbEps);
  return out;
}

Var critic_values(const BoundParams& p, Var messages, Var global_states, Eigen::Index n_agents) {
  if (messages.rows() != global_states.rows() * n_agents) {
    throw ShapeError("critic: " + std::to_string(messages.rows()) + " message rows for " +
                     std::to_string(global_states.rows()) + " states of " + std::to_string(n_agents) + " agents");
  }
  Var embed = diffnum::relu(affine(p, global_states, "critic.state.w", "critic.state.b"));
  Var joined = diffnum::concat_cols(messages, diffnum::repeat_rows(embed, n_agents));
  Var z0 = diffnum::relu(affine(p, joined, "critic.w0", "critic.b0"));
  Var z1 = diffnum::relu(affine(p, z0, "critic.w1", "critic.b1"));
  return affine(p, z1, "critic.head.w", "critic.head.b");
}

Var actor_logits(const BoundParams& p, Var obs) {
  Var z0 = diffnum::relu(affine(p, obs, "actor.w0", "actor.b0"));
  Var z1 = diffnum::relu(affine(p, z0, "actor.w1", "actor.b1"));
  return affine(p, z1, "actor.head.w", "actor.head.b");
}

CriticPass critic_pipeline(const BoundParams& p, const CriticInputs& in, const CriticOptions& options) {
  Tape& tape = p.tape();
  const Eigen::Index n = options.n_agents;
  CriticPass out;
  Var obs = tape.constant(in.obs);
  Var features = encode_obs(p, obs);
  Var states = tape.constant(in.global_states);

  if (!p.params().contains("generator.head.w")) {
    out.values = critic_values(p, features, states, n);
    return out;
  }

  std::array<Var, kGeneratorLayers> prior;
  for (int l = 0; l < kGeneratorLayers; ++l) prior[l] = tape.constant(in.state.layers[l]);
  GeneratorOutput gen = generator_forward(p, obs, prior);
  out.p = gen.p;
  out.next_state = gen.hidden;
  out.y = options.stochastic_edges ? hypergraph::relaxed_sample(gen.p, in.noise, options.tau) : gen.p;
  out.h = hypergraph::harden_st(out.y);
  out.sk_relaxed = hypergraph::skewness_rows(hypergraph::block_column_sums(out.y, n));

  Var x = features;
  for (int l = 0; l < kHgcnLayers; ++l) x = hypergraph::hgcn_layer(out.h, x, p["hgcn.theta" + std::to_string(l)], n);
  out.values = critic_values(p, x, states, n);
  return out;
}

Matrix encode_obs(const Matrix& obs, const ParamSet& params) {
  Tape tape;
  BoundParams p(tape, params, false);
  return encode_obs(p, tape.constant(obs)).value();
}

std::pair<hypergraph::HyperedgeProbMatrix, GeneratorState> generator_forward(const Matrix& obs,
                                                                             const GeneratorState& state,
                                                                             const ParamSet& params) {
  Tape tape;
  BoundParams p(tape, params, false);
  std::array<Var, kGeneratorLayers> prior;
  for (int l = 0; l < kGeneratorLayers; ++l) prior[l] = tape.constant(state.layers[l]);
  GeneratorOutput out = generator_forward(p, tape.constant(obs), prior);
  GeneratorState next;
  for (int l = 0; l < kGeneratorLayers; ++l) next.layers[l] = out.hidden[l].value();
  return {hypergraph::HyperedgeProbMatrix(out.p.value()), std::move(next)};
}

Vector critic_forward(const Vector& global_state, const Matrix& messages, const ParamSet& params) {
  Tape tape;
  BoundParams p(tape, params, false);
  Var v = critic_values(p, tape.constant(messages), tape.constant(global_state.transpose()), messages.rows());
  return v.value().col(0);
}

int Categorical::argmax() const {
  Eigen::Index best = 0;
  probs.maxCoeff(&best);
  return static_cast<int>(best);
}

double Categorical::log_prob(int action) const {
  return std::log(std::max(probs(action), kActionProbEps));
}

std::vector<Categorical> actor_forward_batch(const Matrix& obs, const ParamSet& params) {
  Tape tape;
  BoundParams p(tape, params, false);
  const Matrix logp = diffnum::log_softmax_rows(actor_logits(p, tape.constant(obs))).value();
  std::vector<Categorical> out(static_cast<std::size_t>(obs.rows()));
  for (Eigen::Index r = 0; r < obs.rows(); ++r) out[r].probs = logp.row(r).transpose().array().exp();
  return out;
}

Categorical actor_forward(const Vector& obs_i, const ParamSet& params) {
  return actor_forward_batch(obs_i.transpose(), params).front();
}

// ---------------------------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[5] = {'S', 'D', 'H', 'N', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw CheckpointError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& out, const ParamSet& params, std::uint64_t digest) {
  out.write(kMagic, sizeof(kMagic));
  put_u64(out, digest);
  put_u64(out, params.scalar_count());
  for (const Param& p : params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(p.value.data()[i]));
      const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
      out.write(bytes, 4);
    }
  }
  if (!out) throw CheckpointError("failed to write checkpoint");
}

void save_checkpoint(const std::string& path, const ParamSet& params, std::uint64_t digest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  save_checkpoint(out, params, digest);
}

ParamSet load_checkpoint(std::istream& in, const NetConfig& config, std::uint64_t expected_digest) {
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0) {
    throw CheckpointError("bad checkpoint magic: SDHN1 expected");
  }
  const std::uint64_t digest = get_u64(in);
  if (digest != expected_digest) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "config digest mismatch: checkpoint %016llx, config %016llx",
                  static_cast<unsigned long long>(digest), static_cast<unsigned long long>(expected_digest));
    throw CheckpointError(buf);
  }
  ParamSet params = init_params(config, 0);
  const std::uint64_t count = get_u64(in);
  if (count != params.scalar_count()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " values, layout needs " +
                          std::to_string(params.scalar_count()));
  }
  for (Param& p : params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      unsigned char b[4];
      if (!in.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("truncated checkpoint body");
      const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                 (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
      p.value.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint body");
  return params;
}

ParamSet load_checkpoint(const std::string& path, const NetConfig& config, std::uint64_t expected_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return load_checkpoint(in, config, expected_digest);
}

}  // namespace sdhn::nets
