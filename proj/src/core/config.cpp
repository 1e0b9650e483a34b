#include "core/config.hpp"

#include <fstream>

#include <json.hpp>

namespace ps {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const char* where) {
  if (!j.is_object())
    raise(ErrorCode::Config, std::string("config section \"") + where +
                                 "\" must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (item.key() == k) ok = true;
    if (!ok)
      raise(ErrorCode::Config, std::string("unknown config key \"") +
                                   item.key() + "\" in " + where);
  }
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    raise(ErrorCode::Config,
          std::string("bad value for config key \"") + key + "\": " + e.what());
  }
}

template <class T, size_t N>
void get_array_if(const json& j, const char* key, std::array<T, N>& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != N)
    raise(ErrorCode::Config, std::string("config key \"") + key + "\" must be "
                                 "an array of " + std::to_string(N));
  for (size_t i = 0; i < N; ++i) {
    try {
      out[i] = a.at(i).get<T>();
    } catch (const json::exception& e) {
      raise(ErrorCode::Config,
            std::string("bad value in config array \"") + key + "\": " +
                e.what());
    }
  }
}

PlaneParams parse_plane(const json& j, const char* where) {
  reject_unknown(j, {"theta_x", "theta_y", "theta_z", "d"}, where);
  PlaneParams p;
  get_if(j, "theta_x", p.theta_x);
  get_if(j, "theta_y", p.theta_y);
  get_if(j, "theta_z", p.theta_z);
  get_if(j, "d", p.d);
  return p;
}

json plane_to_json(const PlaneParams& p) {
  return json{{"theta_x", p.theta_x},
              {"theta_y", p.theta_y},
              {"theta_z", p.theta_z},
              {"d", p.d}};
}

}  // namespace

TrainConfig desk_train_config() {
  TrainConfig t;
  t.gamma = 0.8;
  t.learning_rate = 5e-4;
  t.batch_size = 32;
  t.replay_capacity = 30000;
  t.warmup = 1500;
  t.target_sync = 500;
  t.epsilon_start = 1.0;
  t.epsilon_end = 0.1;
  t.epsilon_anneal_steps = 26000;
  t.max_steps = 40000;
  t.checkpoint_every = 10000;
  return t;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::Config, std::string("config is not valid JSON: ") +
                                 e.what());
  }
  // Accept an echoed resolved-config file directly.
  if (j.is_object() && j.contains("config") && j.contains("command"))
    j = j.at("config");

  reject_unknown(j,
                 {"seed", "threads", "phantom", "grid", "schedule", "episode",
                  "train", "variant", "architecture", "eval"},
                 "config root");

  RunConfig cfg;
  get_if(j, "seed", cfg.seed);
  get_if(j, "threads", cfg.threads);

  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    reject_unknown(p,
                   {"dims", "spacing", "max_tilt_deg", "max_offset_mm",
                    "noise_amp", "slab_thickness_mm", "mirror_noise"},
                   "phantom");
    get_array_if(p, "dims", cfg.phantom.dims);
    get_array_if(p, "spacing", cfg.phantom.spacing);
    get_if(p, "max_tilt_deg", cfg.phantom.max_tilt_deg);
    get_if(p, "max_offset_mm", cfg.phantom.max_offset_mm);
    get_if(p, "noise_amp", cfg.phantom.noise_amp);
    get_if(p, "slab_thickness_mm", cfg.phantom.slab_thickness_mm);
    get_if(p, "mirror_noise", cfg.phantom.mirror_noise);
  }

  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    reject_unknown(g, {"size"}, "grid");
    get_array_if(g, "size", cfg.grid_size);
  }

  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    reject_unknown(s, {"preset", "levels"}, "schedule");
    get_if(s, "preset", cfg.schedule_preset);
    if (s.contains("levels")) {
      cfg.custom_schedule.levels.clear();
      for (const auto& l : s.at("levels")) {
        reject_unknown(l, {"spacing_mm", "angle_step_deg", "d_step_mm"},
                       "schedule level");
        ScaleLevel level{0, 0, 0};
        get_if(l, "spacing_mm", level.spacing_mm);
        get_if(l, "angle_step_deg", level.angle_step_deg);
        get_if(l, "d_step_mm", level.d_step_mm);
        cfg.custom_schedule.levels.push_back(level);
      }
    }
  }

  if (j.contains("episode")) {
    const auto& e = j.at("episode");
    reject_unknown(e,
                   {"max_steps_per_level", "oscillation_window", "init_mode",
                    "center_fraction", "fixed_plane"},
                   "episode");
    get_if(e, "max_steps_per_level", cfg.max_steps_per_level);
    get_if(e, "oscillation_window", cfg.oscillation_window);
    get_if(e, "init_mode", cfg.init_mode);
    get_if(e, "center_fraction", cfg.center_fraction);
    if (e.contains("fixed_plane"))
      cfg.fixed_plane = parse_plane(e.at("fixed_plane"), "fixed_plane");
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t,
                   {"preset", "gamma", "learning_rate", "batch_size",
                    "replay_capacity", "warmup", "target_sync", "epsilon_start",
                    "epsilon_end", "epsilon_anneal_steps", "max_steps",
                    "checkpoint_every", "adam_beta1", "adam_beta2",
                    "adam_epsilon"},
                   "train");
    get_if(t, "preset", cfg.train_preset);
    if (cfg.train_preset == "desk")
      cfg.train = desk_train_config();
    else if (cfg.train_preset != "default")
      raise(ErrorCode::Config,
            "unknown train preset \"" + cfg.train_preset + "\"");
    get_if(t, "gamma", cfg.train.gamma);
    get_if(t, "learning_rate", cfg.train.learning_rate);
    get_if(t, "batch_size", cfg.train.batch_size);
    get_if(t, "replay_capacity", cfg.train.replay_capacity);
    get_if(t, "warmup", cfg.train.warmup);
    get_if(t, "target_sync", cfg.train.target_sync);
    get_if(t, "epsilon_start", cfg.train.epsilon_start);
    get_if(t, "epsilon_end", cfg.train.epsilon_end);
    get_if(t, "epsilon_anneal_steps", cfg.train.epsilon_anneal_steps);
    get_if(t, "max_steps", cfg.train.max_steps);
    get_if(t, "checkpoint_every", cfg.train.checkpoint_every);
    get_if(t, "adam_beta1", cfg.train.adam_beta1);
    get_if(t, "adam_beta2", cfg.train.adam_beta2);
    get_if(t, "adam_epsilon", cfg.train.adam_epsilon);
  }

  if (j.contains("variant")) {
    const auto& v = j.at("variant");
    reject_unknown(v, {"double", "dueling"}, "variant");
    get_if(v, "double", cfg.variant.double_q);
    get_if(v, "dueling", cfg.variant.dueling);
  }

  if (j.contains("architecture") && !j.at("architecture").is_null())
    cfg.architecture =
        nn::Architecture::from_json_string(j.at("architecture").dump());

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"checkpoints"}, "eval");
    if (e.contains("checkpoints")) {
      for (const auto& item : e.at("checkpoints").items())
        cfg.eval_checkpoints[item.key()] =
            std::filesystem::path(item.value().get<std::string>());
    }
  }

  cfg.train.seed = cfg.seed;
  cfg.phantom.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::Io, "cannot open config file: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_json_text(text);
}

std::string RunConfig::to_json_text() const {
  json j{
      {"seed", seed},
      {"threads", threads},
      {"phantom",
       {{"dims", phantom.dims},
        {"spacing", phantom.spacing},
        {"max_tilt_deg", phantom.max_tilt_deg},
        {"max_offset_mm", phantom.max_offset_mm},
        {"noise_amp", phantom.noise_amp},
        {"slab_thickness_mm", phantom.slab_thickness_mm},
        {"mirror_noise", phantom.mirror_noise}}},
      {"grid", {{"size", grid_size}}},
      {"episode",
       {{"max_steps_per_level", max_steps_per_level},
        {"oscillation_window", oscillation_window},
        {"init_mode", init_mode},
        {"center_fraction", center_fraction},
        {"fixed_plane", plane_to_json(fixed_plane)}}},
      {"train",
       {{"preset", train_preset},
        {"gamma", train.gamma},
        {"learning_rate", train.learning_rate},
        {"batch_size", train.batch_size},
        {"replay_capacity", train.replay_capacity},
        {"warmup", train.warmup},
        {"target_sync", train.target_sync},
        {"epsilon_start", train.epsilon_start},
        {"epsilon_end", train.epsilon_end},
        {"epsilon_anneal_steps", train.epsilon_anneal_steps},
        {"max_steps", train.max_steps},
        {"checkpoint_every", train.checkpoint_every},
        {"adam_beta1", train.adam_beta1},
        {"adam_beta2", train.adam_beta2},
        {"adam_epsilon", train.adam_epsilon}}},
      {"variant",
       {{"double", variant.double_q}, {"dueling", variant.dueling}}},
  };

  json sched{{"preset", schedule_preset}};
  if (schedule_preset == "custom") {
    json levels = json::array();
    for (const auto& l : custom_schedule.levels)
      levels.push_back({{"spacing_mm", l.spacing_mm},
                        {"angle_step_deg", l.angle_step_deg},
                        {"d_step_mm", l.d_step_mm}});
    sched["levels"] = levels;
  }
  j["schedule"] = sched;

  if (architecture)
    j["architecture"] = json::parse(architecture->to_json_string());

  if (!eval_checkpoints.empty()) {
    json cps = json::object();
    for (const auto& [name, path] : eval_checkpoints) cps[name] = path.string();
    j["eval"] = {{"checkpoints", cps}};
  }
  return j.dump(2);
}

ScaleSchedule RunConfig::schedule() const {
  if (schedule_preset == "brain") return brain_schedule();
  if (schedule_preset == "cardiac") return cardiac_schedule();
  if (schedule_preset == "custom") return custom_schedule;
  raise(ErrorCode::Config,
        "unknown schedule preset \"" + schedule_preset + "\"");
}

EpisodeConfig RunConfig::episode_config() const {
  EpisodeConfig e;
  e.grid_size = grid_size;
  e.schedule = schedule();
  e.max_steps_per_level = max_steps_per_level;
  e.oscillation_window = oscillation_window;
  e.center_fraction = center_fraction;
  e.fixed_plane = fixed_plane;
  if (init_mode == "uniform")
    e.init_mode = InitMode::UniformRandom;
  else if (init_mode == "center")
    e.init_mode = InitMode::CenterRestricted;
  else if (init_mode == "fixed")
    e.init_mode = InitMode::FixedPlane;
  else
    raise(ErrorCode::Config, "unknown init mode \"" + init_mode + "\"");
  return e;
}

void RunConfig::validate() const {
  phantom.validate();
  train.validate();
  episode_config().validate();
  if (architecture && architecture->head.dueling != variant.dueling)
    raise(ErrorCode::Config,
          "architecture head dueling flag conflicts with the variant");
}

void echo_resolved_config(const RunConfig& cfg, const std::string& command,
                          const std::map<std::string, std::string>& args,
                          const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  json j{{"command", command},
         {"args", args},
         {"config", json::parse(cfg.to_json_text())}};
  std::ofstream out(out_dir / "resolved_config.json", std::ios::trunc);
  if (!out)
    raise(ErrorCode::Io, "cannot write resolved config into " +
                             out_dir.string());
  out << j.dump(2) << "\n";
}

}  // namespace ps
