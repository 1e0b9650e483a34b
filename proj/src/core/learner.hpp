#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "core/environment.hpp"
#include "core/nn.hpp"
#include "core/phantom.hpp"

namespace ps {

struct TrainConfig {
  double gamma = 0.9;
  double learning_rate = 1e-4;
  uint32_t batch_size = 48;
  uint32_t replay_capacity = 100000;
  uint32_t warmup = 5000;          // transitions before updates start
  uint32_t target_sync = 2500;     // updates between target syncs
  double epsilon_start = 1.0;
  double epsilon_end = 0.1;
  uint32_t epsilon_anneal_steps = 100000;
  uint64_t max_steps = 100000;     // total environment steps
  uint64_t checkpoint_every = 25000;
  uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const;
  double epsilon_at(uint64_t env_step) const;
};

// The four Q-learning flavors: double selects the DDQN target (argmax by the
// online net, value by the target net); dueling switches the network head.
struct VariantConfig {
  bool double_q = false;
  bool dueling = false;

  std::string name() const;                       // dqn | ddqn | duel-dqn | duel-ddqn
  static VariantConfig from_name(const std::string& name);
};

// Fixed-capacity ring of transitions with uniform sampling (with
// replacement). Oldest entries are evicted once full.
class ReplayMemory {
public:
  explicit ReplayMemory(size_t capacity);

  void push(Transition t);
  size_t size() const { return slots_.size(); }
  size_t capacity() const { return capacity_; }
  const Transition& at(size_t i) const { return slots_[i]; }

  size_t sample_index(Rng& rng) const;
  std::vector<size_t> sample(size_t batch, Rng& rng) const;

private:
  size_t capacity_;
  size_t next_ = 0;
  std::vector<Transition> slots_;
};

// Stacks states into the network input layout [B, C, D, H, W]. Both stack
// modes share one memory layout, so this is four frame copies per state.
nn::Tensor encode_states(std::span<const EnvState> states,
                         const nn::Architecture& arch);

// Argmax with ties broken toward the lowest index.
template <class T>
int argmax_action(std::span<const T> q_row) {
  int best = 0;
  for (int i = 1; i < int(q_row.size()); ++i)
    if (q_row[i] > q_row[best]) best = i;
  return best;
}

// With probability epsilon a uniform action, otherwise the argmax.
Action epsilon_greedy(std::span<const float> q_row, double epsilon, Rng& rng);

// TD targets for a sampled batch: r for terminal transitions, otherwise
// r + gamma * max_a' Q_target(s') (DQN) or r + gamma * Q_target(s', argmax_a'
// Q_net(s')) (double).
std::vector<double> td_targets(const ReplayMemory& memory,
                               std::span<const size_t> batch,
                               const nn::Network& net,
                               const nn::Network& target_net, double gamma,
                               bool double_q);

struct LossAndGrads {
  double loss = 0.0;
  std::vector<nn::Tensor> grads;
};

// Mean squared error between Q_net(s, a) at the taken actions and the fixed
// targets; gradients flow only through the taken-action entries.
LossAndGrads loss_and_gradients(const ReplayMemory& memory,
                                std::span<const size_t> batch,
                                std::span<const double> targets,
                                nn::Network& net);

// Copies the online network into the target network (architectures must
// match).
void sync_target(const nn::Network& net, nn::Network& target_net);

struct Dataset {
  std::vector<std::shared_ptr<const Volume>> volumes;  // intensity-normalized
  std::vector<GroundTruth> truths;
  std::vector<std::string> names;
};

// Loads every manifest entry and normalizes intensities once per volume.
Dataset load_dataset(const std::filesystem::path& manifest_path);

struct TrainResult {
  uint64_t env_steps = 0;
  uint64_t updates = 0;
  uint64_t episodes = 0;
  uint64_t syncs = 0;
  double wall_seconds = 0.0;
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;
};

// Runs the full training loop: one episode at a time over uniformly drawn
// volumes, epsilon-greedy collection, one minibatch update per environment
// step once the replay holds `warmup` transitions, periodic target syncs and
// checkpoints, and a line-delimited metrics log (one JSON object per
// episode). Deterministic given the config seed.
TrainResult train(const Dataset& dataset, const TrainConfig& train_cfg,
                  const VariantConfig& variant, const EpisodeConfig& episode_cfg,
                  const std::optional<nn::Architecture>& arch_override,
                  const std::filesystem::path& out_dir);

struct TrajectoryRecord {
  uint32_t step = 0;
  uint32_t level = 0;
  int action = -1;               // action taken from this plane; -1 terminal/none
  PlaneParams params;            // plane visited at this step
  double max_q = 0.0;
  std::optional<int> reward;     // reward received on arrival; unset at inference
};

struct InferenceResult {
  PlaneParams final_plane;
  std::vector<TrajectoryRecord> trajectory;
  uint32_t steps = 0;
  double mean_step_seconds = 0.0;
  StepEvent terminal_event = StepEvent::None;
};

// Greedy rollout through all scale levels, recording per-step max-Q for the
// oscillation rule. The returned plane is the environment's lowest-Q
// resolution at the finest level.
InferenceResult q_policy_inference(const nn::Network& net, Environment& env,
                                   Rng& rng);

}  // namespace ps
