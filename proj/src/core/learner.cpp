#include "core/learner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "core/evaluation.hpp"

namespace ps {

namespace {

using nlohmann::json;

nn::Tensor forward_states(const nn::Network& net,
                          std::span<const EnvState> states) {
  return net.forward(encode_states(states, net.arch()));
}

}  // namespace

void TrainConfig::validate() const {
  if (gamma < 0.0 || gamma > 1.0)
    raise(ErrorCode::Config, "gamma must be in [0, 1]");
  if (!(learning_rate > 0.0))
    raise(ErrorCode::Config, "learning rate must be positive");
  if (batch_size < 1) raise(ErrorCode::Config, "batch size must be >= 1");
  if (warmup < batch_size)
    raise(ErrorCode::Config, "warmup must be at least the batch size");
  if (replay_capacity < batch_size)
    raise(ErrorCode::Config, "replay capacity must hold at least one batch");
  if (target_sync < 1) raise(ErrorCode::Config, "target sync must be >= 1");
  if (epsilon_start < 0.0 || epsilon_start > 1.0 || epsilon_end < 0.0 ||
      epsilon_end > epsilon_start)
    raise(ErrorCode::Config,
          "epsilon schedule requires 0 <= end <= start <= 1");
  if (epsilon_anneal_steps < 1)
    raise(ErrorCode::Config, "epsilon anneal steps must be >= 1");
}

double TrainConfig::epsilon_at(uint64_t env_step) const {
  const double t =
      std::min(1.0, double(env_step) / double(epsilon_anneal_steps));
  return epsilon_start + (epsilon_end - epsilon_start) * t;
}

std::string VariantConfig::name() const {
  if (dueling) return double_q ? "duel-ddqn" : "duel-dqn";
  return double_q ? "ddqn" : "dqn";
}

VariantConfig VariantConfig::from_name(const std::string& name) {
  if (name == "dqn") return {false, false};
  if (name == "ddqn") return {true, false};
  if (name == "duel-dqn") return {false, true};
  if (name == "duel-ddqn") return {true, true};
  raise(ErrorCode::Config,
        "unknown variant \"" + name +
            "\" (expected dqn | ddqn | duel-dqn | duel-ddqn)");
}

ReplayMemory::ReplayMemory(size_t capacity) : capacity_(capacity) {
  if (capacity_ < 1)
    raise(ErrorCode::Contract, "replay capacity must be >= 1");
  slots_.reserve(std::min<size_t>(capacity_, 1 << 20));
}

void ReplayMemory::push(Transition t) {
  if (slots_.size() < capacity_) {
    slots_.push_back(std::move(t));
  } else {
    slots_[next_] = std::move(t);
  }
  next_ = (next_ + 1) % capacity_;
}

size_t ReplayMemory::sample_index(Rng& rng) const {
  if (slots_.empty())
    raise(ErrorCode::Contract, "cannot sample from empty replay memory");
  return size_t(rng.next_below(slots_.size()));
}

std::vector<size_t> ReplayMemory::sample(size_t batch, Rng& rng) const {
  std::vector<size_t> out(batch);
  for (auto& i : out) i = sample_index(rng);
  return out;
}

nn::Tensor encode_states(std::span<const EnvState> states,
                         const nn::Architecture& arch) {
  const size_t item =
      size_t(arch.input[0]) * arch.input[1] * arch.input[2] * arch.input[3];
  const size_t frame_len = item / kHistoryLength;
  nn::Tensor batch(std::vector<uint32_t>{uint32_t(states.size()), arch.input[0],
                                         arch.input[1], arch.input[2],
                                         arch.input[3]});
  for (size_t b = 0; b < states.size(); ++b) {
    float* dst = batch.data.data() + b * item;
    for (int h = 0; h < kHistoryLength; ++h) {
      const auto& frame = states[b].history[h];
      if (!frame || frame->values.size() != frame_len)
        raise(ErrorCode::Contract,
              "state frame size does not match the network input");
      std::copy(frame->values.begin(), frame->values.end(),
                dst + size_t(h) * frame_len);
    }
  }
  return batch;
}

Action epsilon_greedy(std::span<const float> q_row, double epsilon, Rng& rng) {
  if (epsilon < 0.0 || epsilon > 1.0)
    raise(ErrorCode::Contract, "epsilon must be in [0, 1]");
  if (epsilon > 0.0 && rng.next_double() < epsilon)
    return Action(rng.next_below(q_row.size()));
  return Action(argmax_action(q_row));
}

std::vector<double> td_targets(const ReplayMemory& memory,
                               std::span<const size_t> batch,
                               const nn::Network& net,
                               const nn::Network& target_net, double gamma,
                               bool double_q) {
  if (batch.empty())
    raise(ErrorCode::Contract, "td_targets requires a non-empty batch");

  std::vector<EnvState> next_states;
  next_states.reserve(batch.size());
  for (size_t i : batch) next_states.push_back(memory.at(i).s_next);

  const nn::Tensor q_target = forward_states(target_net, next_states);
  nn::Tensor q_online;
  if (double_q) q_online = forward_states(net, next_states);

  const uint32_t actions = target_net.arch().head.actions;
  std::vector<double> targets(batch.size());
  for (size_t b = 0; b < batch.size(); ++b) {
    const Transition& t = memory.at(batch[b]);
    if (t.terminal) {
      targets[b] = double(t.r);
      continue;
    }
    std::span<const float> trow(q_target.data.data() + b * actions, actions);
    double next_value;
    if (double_q) {
      std::span<const float> orow(q_online.data.data() + b * actions, actions);
      next_value = double(trow[size_t(argmax_action(orow))]);
    } else {
      next_value = double(trow[size_t(argmax_action(trow))]);
    }
    targets[b] = double(t.r) + gamma * next_value;
  }
  return targets;
}

LossAndGrads loss_and_gradients(const ReplayMemory& memory,
                                std::span<const size_t> batch,
                                std::span<const double> targets,
                                nn::Network& net) {
  if (batch.size() != targets.size())
    raise(ErrorCode::Contract, "targets must align with the batch");

  std::vector<EnvState> states;
  states.reserve(batch.size());
  for (size_t i : batch) states.push_back(memory.at(i).s);

  nn::Network::Cache cache;
  const nn::Tensor q = net.forward(encode_states(states, net.arch()), cache);
  const uint32_t actions = net.arch().head.actions;

  nn::Tensor q_grad(std::vector<uint32_t>{uint32_t(batch.size()), actions});
  double loss = 0.0;
  const double inv_b = 1.0 / double(batch.size());
  for (size_t b = 0; b < batch.size(); ++b) {
    const uint8_t a = uint8_t(memory.at(batch[b]).a);
    const double pred = double(q.data[b * actions + a]);
    const double err = pred - targets[b];
    loss += err * err * inv_b;
    q_grad.data[b * actions + a] = float(2.0 * err * inv_b);
  }
  if (!std::isfinite(loss))
    raise(ErrorCode::Numeric, "non-finite training loss");

  LossAndGrads out;
  out.loss = loss;
  out.grads = net.backward(cache, q_grad);
  return out;
}

void sync_target(const nn::Network& net, nn::Network& target_net) {
  if (!(net.arch() == target_net.arch()))
    raise(ErrorCode::Contract, "target network architecture mismatch");
  target_net = net;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset ds;
  for (const auto& entry : load_manifest(manifest_path)) {
    auto vol = std::make_shared<Volume>(
        normalize_intensities(load_volume(entry.volume_path)));
    ds.volumes.push_back(std::move(vol));
    ds.truths.push_back(load_ground_truth(entry.sidecar_path));
    ds.names.push_back(entry.volume_path.filename().string());
  }
  if (ds.volumes.empty())
    raise(ErrorCode::Config, "dataset manifest is empty");
  return ds;
}

TrainResult train(const Dataset& dataset, const TrainConfig& train_cfg,
                  const VariantConfig& variant, const EpisodeConfig& episode_cfg,
                  const std::optional<nn::Architecture>& arch_override,
                  const std::filesystem::path& out_dir) {
  train_cfg.validate();
  episode_cfg.validate();
  std::filesystem::create_directories(out_dir);

  const nn::Architecture arch =
      arch_override ? *arch_override
                    : nn::Architecture::default_for_grid(episode_cfg.grid_size,
                                                         variant.dueling);
  if (arch.head.dueling != variant.dueling)
    raise(ErrorCode::Config,
          "architecture head does not match the requested variant");

  Rng rng_init(derive_stream_seed(train_cfg.seed, "train.init"));
  Rng rng_env(derive_stream_seed(train_cfg.seed, "train.env"));
  Rng rng_explore(derive_stream_seed(train_cfg.seed, "train.explore"));
  Rng rng_replay(derive_stream_seed(train_cfg.seed, "train.replay"));

  nn::Network net(arch, rng_init);
  nn::Network target_net = net;
  const nn::AdamConfig adam{train_cfg.learning_rate, train_cfg.adam_beta1,
                            train_cfg.adam_beta2, train_cfg.adam_epsilon};

  TrainResult result;
  result.checkpoint_path = out_dir / "checkpoint.pqn";
  result.metrics_path = out_dir / "metrics.jsonl";
  nn::save_checkpoint(net, result.checkpoint_path);

  std::ofstream metrics(result.metrics_path, std::ios::trunc);
  if (!metrics)
    raise(ErrorCode::Io,
          "cannot write metrics log: " + result.metrics_path.string());

  ReplayMemory replay(train_cfg.replay_capacity);
  const auto t_begin = std::chrono::steady_clock::now();

  uint64_t env_steps = 0, updates = 0, episodes = 0, syncs = 0;
  double epsilon = train_cfg.epsilon_start;

  try {
    while (env_steps < train_cfg.max_steps) {
      const size_t vol_idx = size_t(rng_env.next_below(dataset.volumes.size()));
      Environment env(dataset.volumes[vol_idx], episode_cfg,
                      dataset.truths[vol_idx].plane);
      env.reset(rng_env);

      double ep_return = 0.0, ep_loss_sum = 0.0;
      uint64_t ep_len = 0, ep_updates = 0;

      while (!env.terminal() && env_steps < train_cfg.max_steps) {
        const EnvState state = env.state();
        const nn::Tensor q = forward_states(net, {&state, 1});
        std::span<const float> q_row(q.data.data(), q.data.size());
        const double max_q = double(q_row[size_t(argmax_action(q_row))]);

        epsilon = train_cfg.epsilon_at(env_steps);
        const Action a = epsilon_greedy(q_row, epsilon, rng_explore);
        const StepResult sr = env.step(a, max_q);
        replay.push(Transition{state, a, int8_t(sr.reward), env.state(),
                               sr.terminal});
        env_steps += 1;
        ep_len += 1;
        ep_return += sr.reward;

        if (replay.size() >= train_cfg.warmup) {
          const auto batch = replay.sample(train_cfg.batch_size, rng_replay);
          const auto targets = td_targets(replay, batch, net, target_net,
                                          train_cfg.gamma, variant.double_q);
          const auto lg = loss_and_gradients(replay, batch, targets, net);
          net.adam_step(lg.grads, adam);
          updates += 1;
          ep_updates += 1;
          ep_loss_sum += lg.loss;
          if (updates % train_cfg.target_sync == 0) {
            sync_target(net, target_net);
            syncs += 1;
          }
        }
        if (train_cfg.checkpoint_every > 0 &&
            env_steps % train_cfg.checkpoint_every == 0)
          nn::save_checkpoint(net, result.checkpoint_path);
      }

      episodes += 1;
      const auto& gt = dataset.truths[vol_idx];
      const EvalResult er = evaluate_plane(env.final_plane(), gt);
      const json line{{"step", env_steps},
                      {"episode", episodes},
                      {"loss", ep_updates ? ep_loss_sum / double(ep_updates)
                                          : 0.0},
                      {"epsilon", epsilon},
                      {"return", ep_return},
                      {"ep_len", ep_len},
                      {"e_d", er.e_d_mm},
                      {"e_theta", er.e_theta_deg}};
      metrics << line.dump() << "\n" << std::flush;  // one line per episode
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Numeric)
      raise(ErrorCode::Numeric,
            "training aborted at env step " + std::to_string(env_steps) +
                " (last good checkpoint retained): " + e.what());
    throw;
  }

  metrics.flush();
  nn::save_checkpoint(net, result.checkpoint_path);

  result.env_steps = env_steps;
  result.updates = updates;
  result.episodes = episodes;
  result.syncs = syncs;
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin)
          .count();

  json report{{"variant", variant.name()},
              {"episodes", episodes},
              {"env_steps", env_steps},
              {"updates", updates},
              {"target_syncs", syncs},
              {"wall_seconds", result.wall_seconds},
              {"checkpoint", result.checkpoint_path.filename().string()}};
  std::ofstream report_out(out_dir / "train_report.json", std::ios::trunc);
  report_out << report.dump(2) << "\n";
  return result;
}

InferenceResult q_policy_inference(const nn::Network& net, Environment& env,
                                   Rng& rng) {
  InferenceResult out;
  env.reset(rng);

  double total_seconds = 0.0;
  uint32_t step = 0;
  std::optional<int> pending_reward;  // unset: inference computes no reward

  while (!env.terminal()) {
    const auto t0 = std::chrono::steady_clock::now();
    const EnvState state = env.state();
    const nn::Tensor q = forward_states(net, {&state, 1});
    std::span<const float> q_row(q.data.data(), q.data.size());
    const int a = argmax_action(q_row);
    const double max_q = double(q_row[size_t(a)]);

    out.trajectory.push_back(TrajectoryRecord{step, state.level, a,
                                              state.params, max_q,
                                              pending_reward});
    const StepResult sr = env.step(Action(a), max_q);
    total_seconds += std::chrono::duration<double>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    step += 1;
    out.terminal_event = sr.event;
  }

  out.final_plane = env.final_plane();
  out.steps = step;
  out.mean_step_seconds = step > 0 ? total_seconds / double(step) : 0.0;
  return out;
}

}  // namespace ps
