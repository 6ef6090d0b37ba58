#include "actnet/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace actnet {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::FS: return "FS";
    case TrainMode::MT: return "MT";
    case TrainMode::KD: return "KD";
    case TrainMode::ACT: return "ACT";
  }
  return "ACT";
}

TrainMode parse_mode(const std::string& text) {
  if (text == "FS") return TrainMode::FS;
  if (text == "MT") return TrainMode::MT;
  if (text == "KD") return TrainMode::KD;
  if (text == "ACT") return TrainMode::ACT;
  throw ConfigError("unknown mode '" + text + "' (expected FS, MT, KD or ACT)");
}

bool uses_kd(TrainMode mode) noexcept { return mode == TrainMode::KD || mode == TrainMode::ACT; }
bool uses_co(TrainMode mode) noexcept { return mode == TrainMode::MT || mode == TrainMode::ACT; }

void TrainConfig::validate() const {
  actnet::validate(student_spec);
  actnet::validate(teacher_spec);
  if (student_spec.num_classes != teacher_spec.num_classes || student_spec.in_channels != teacher_spec.in_channels)
    throw ConfigError("student and teacher must agree on classes and input channels");
  weights.validate();
  perturbation.validate();
  if (!(ema_decay >= 0 && ema_decay < 1)) throw ConfigError("ema_decay must be in [0, 1)");
  if (!(base_lr > 0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  if (t_max < 1) throw ConfigError("t_max must be >= 1");
  if (batch.labeled < 1) throw ConfigError("labeled_n must be >= 1");
  if (batch.unlabeled < 0) throw ConfigError("unlabeled_n must be >= 0");
  if (consistency_rampup < 0) throw ConfigError("consistency_rampup must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_spec(const ModelSpec& s) {
  return std::to_string(s.num_encoder_layers) + "," + std::to_string(s.initial_channels);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

template <typename I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

void set_spec_shape(ModelSpec& spec, const std::string& key, const std::string& v) {
  try {
    const ModelSpec parsed = parse_spec(v);
    spec.num_encoder_layers = parsed.num_encoder_layers;
    spec.initial_channels = parsed.initial_channels;
  } catch (const Error& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

std::map<std::string, std::string> to_key_values(const TrainConfig& c) {
  std::string rot;
  for (std::size_t i = 0; i < c.perturbation.rotate_choices.size(); ++i)
    rot += (i ? "," : "") + std::to_string(c.perturbation.rotate_choices[i]);
  return {
      {"student_spec", fmt_spec(c.student_spec)},
      {"teacher_spec", fmt_spec(c.teacher_spec)},
      {"num_classes", std::to_string(c.student_spec.num_classes)},
      {"in_channels", std::to_string(c.student_spec.in_channels)},
      {"mode", to_string(c.mode)},
      {"lambda_kd", fmt_double(c.weights.lambda_kd)},
      {"lambda_co", fmt_double(c.weights.lambda_co)},
      {"temperature", fmt_double(c.weights.temperature)},
      {"dice_eps", fmt_double(c.weights.dice_eps)},
      {"ema_decay", fmt_double(c.ema_decay)},
      {"ema_warmup", c.ema_warmup ? "true" : "false"},
      {"base_lr", fmt_double(c.base_lr)},
      {"momentum", fmt_double(c.momentum)},
      {"t_max", std::to_string(c.t_max)},
      {"labeled_n", std::to_string(c.batch.labeled)},
      {"unlabeled_n", std::to_string(c.batch.unlabeled)},
      {"cycle", c.batch.cycle ? "true" : "false"},
      {"noise_sigma", fmt_double(c.perturbation.noise_sigma)},
      {"flip_prob", fmt_double(c.perturbation.flip_prob)},
      {"rotate_choices", rot},
      {"perturb_seed", std::to_string(c.perturbation.rng_seed)},
      {"consistency_rampup", std::to_string(c.consistency_rampup)},
      {"eval_every", std::to_string(c.eval_every)},
      {"checkpoint_every", std::to_string(c.checkpoint_every)},
      {"seed", std::to_string(c.seed)},
      {"init_seed", std::to_string(c.init_seed)},
      {"from_scratch", c.from_scratch ? "true" : "false"},
  };
}

void apply_setting(TrainConfig& c, const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key), v = trim(raw_value);
  if (key == "student_spec") set_spec_shape(c.student_spec, key, v);
  else if (key == "teacher_spec") set_spec_shape(c.teacher_spec, key, v);
  else if (key == "num_classes") c.student_spec.num_classes = c.teacher_spec.num_classes = parse_int<int>(key, v);
  else if (key == "in_channels") c.student_spec.in_channels = c.teacher_spec.in_channels = parse_int<int>(key, v);
  else if (key == "mode") c.mode = parse_mode(v);
  else if (key == "lambda_kd") c.weights.lambda_kd = parse_double(key, v);
  else if (key == "lambda_co") c.weights.lambda_co = parse_double(key, v);
  else if (key == "temperature") c.weights.temperature = parse_double(key, v);
  else if (key == "dice_eps") c.weights.dice_eps = parse_double(key, v);
  else if (key == "ema_decay") c.ema_decay = parse_double(key, v);
  else if (key == "ema_warmup") c.ema_warmup = parse_bool(key, v);
  else if (key == "base_lr") c.base_lr = parse_double(key, v);
  else if (key == "momentum") c.momentum = parse_double(key, v);
  else if (key == "t_max") c.t_max = parse_int<std::int64_t>(key, v);
  else if (key == "labeled_n") c.batch.labeled = parse_int<int>(key, v);
  else if (key == "unlabeled_n") c.batch.unlabeled = parse_int<int>(key, v);
  else if (key == "cycle") c.batch.cycle = parse_bool(key, v);
  else if (key == "noise_sigma") c.perturbation.noise_sigma = parse_double(key, v);
  else if (key == "flip_prob") c.perturbation.flip_prob = parse_double(key, v);
  else if (key == "rotate_choices") {
    std::vector<int> rot;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');) {
      item = trim(item);
      if (!item.empty()) rot.push_back(parse_int<int>(key, item));
    }
    c.perturbation.rotate_choices = rot;
  } else if (key == "perturb_seed") c.perturbation.rng_seed = parse_int<std::uint64_t>(key, v);
  else if (key == "consistency_rampup") c.consistency_rampup = parse_int<std::int64_t>(key, v);
  else if (key == "eval_every") c.eval_every = parse_int<std::int64_t>(key, v);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_int<std::int64_t>(key, v);
  else if (key == "seed") c.seed = parse_int<std::uint64_t>(key, v);
  else if (key == "init_seed") c.init_seed = parse_int<std::uint64_t>(key, v);
  else if (key == "from_scratch") c.from_scratch = parse_bool(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

void apply_config_text(TrainConfig& config, const std::string& text, const std::string& origin) {
  std::stringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      apply_setting(config, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(base, ss.str(), path.string());
  return base;
}

std::string config_text(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, v] : to_key_values(config)) out += k + "=" + v + "\n";
  return out;
}

std::string config_digest(const TrainConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_text(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace actnet
