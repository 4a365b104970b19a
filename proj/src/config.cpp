#include "stp/config.hpp"

#include <fstream>
#include <sstream>

namespace stp {

const std::vector<ConfigKey>& RunConfig::schema() {
  static const std::vector<ConfigKey> keys = {
      {"model.preset", "tiny", "architecture preset: tiny (32px desk scale) or paper (224px ViT-B)"},
      {"model.image_size", "32", "input image side length"},
      {"model.patch", "4", "patch size"},
      {"model.channels", "3", "image channels"},
      {"model.enc_dim", "128", "encoder hidden dim"},
      {"model.enc_depth", "4", "encoder blocks"},
      {"model.enc_heads", "4", "encoder attention heads"},
      {"model.enc_mlp_ratio", "4", "encoder FFN expansion"},
      {"model.dec_dim", "64", "decoder hidden dim"},
      {"model.dec_depth", "2", "decoder blocks"},
      {"model.dec_heads", "4", "decoder attention heads"},
      {"model.dec_mlp_ratio", "4", "decoder FFN expansion"},
      {"model.dec_arch", "self_cross", "temporal decoder block: self_cross or joint_self"},
      {"mask.rho_current", "0.75", "current-frame masking ratio"},
      {"mask.rho_future", "0.95", "future-frame masking ratio"},
      {"train.base_lr", "0.00015", "peak learning rate after warmup"},
      {"train.weight_decay", "0.05", "AdamW decoupled weight decay"},
      {"train.beta1", "0.9", "AdamW beta1"},
      {"train.beta2", "0.95", "AdamW beta2"},
      {"train.batch", "32", "effective batch size (pairs per step)"},
      {"train.steps", "1000", "total optimizer steps (ignored if train.epochs > 0)"},
      {"train.warmup_steps", "100", "linear warmup steps (ignored if train.epochs > 0)"},
      {"train.epochs", "0", "when > 0, steps = epochs * ceil(clips/batch)"},
      {"train.warmup_epochs", "5", "warmup epochs (used when train.epochs > 0)"},
      {"train.lambda_spatial", "1", "spatial prediction loss weight"},
      {"train.lambda_temporal", "1", "temporal prediction loss weight"},
      {"train.seed", "0", "training seed"},
      {"train.threads", "1", "worker threads over batch pairs (any value is bit-identical)"},
      {"train.save_every", "0", "checkpoint every N steps (0 = final only)"},
      {"train.stop_after", "0", "halt after this step (0 = run to train.steps); schedule keeps train.steps"},
      {"data.source", "synth", "clip source: synth or dir"},
      {"data.dir", "", "frame directory (source=dir)"},
      {"data.manifest", "", "synthetic manifest path (overrides data.* generation keys)"},
      {"data.clips", "500", "number of synthetic clips"},
      {"data.frames", "64", "frames per synthetic clip"},
      {"data.size", "32", "synthetic render size"},
      {"data.sprites_min", "1", "min sprites per clip"},
      {"data.sprites_max", "3", "max sprites per clip"},
      {"data.speed_min", "0.3", "min sprite speed, px/frame"},
      {"data.speed_max", "1.2", "max sprite speed, px/frame"},
      {"data.seed", "0", "dataset seed"},
      {"data.interval", "16", "frame interval: fixed (e.g. 16) or uniform range (8-24)"},
      {"data.export_clips", "0", "synth-data: also export this many clips as PPM frame folders"},
      {"data.crop", "true", "apply shared RandomResizedCrop to each pair"},
      {"data.crop_scale_min", "0.8", "crop area fraction lower bound"},
      {"data.crop_scale_max", "1.0", "crop area fraction upper bound"},
      {"out.dir", "run", "output directory"},
      {"ckpt.path", "", "checkpoint to load (probe/bc/attention) or resume from (pretrain)"},
      {"ckpt.force", "false", "load despite a config-digest mismatch"},
      {"probe.clips", "400", "single-sprite probe clips"},
      {"probe.pairs_per_clip", "4", "probe pairs sampled per clip"},
      {"probe.interval", "16", "probe pair interval"},
      {"probe.epochs", "120", "probe training epochs"},
      {"probe.lr", "0.01", "probe learning rate"},
      {"probe.batch", "64", "probe batch size"},
      {"probe.holdout", "0.2", "held-out fraction"},
      {"probe.seed", "1", "probe seed"},
      {"bc.demos", "50", "scripted-expert demonstrations to collect"},
      {"bc.demo_seed", "1000", "base seed for demo collection"},
      {"bc.demos_path", "", "demo file to load (collected fresh when empty)"},
      {"bc.save_demos", "", "write collected demos to this path"},
      {"bc.hidden", "256,256", "policy MLP hidden sizes"},
      {"bc.history", "1", "history window size"},
      {"bc.epochs", "60", "policy training epochs"},
      {"bc.lr", "0.001", "policy learning rate"},
      {"bc.batch", "128", "policy batch size"},
      {"bc.seed", "0", "policy init/shuffle seed"},
      {"bc.base_seeds", "100,200,300", "evaluation base seeds"},
      {"bc.episodes", "25", "episodes per base seed"},
      {"env.horizon", "50", "toy env episode horizon"},
      {"env.success_radius", "0.10", "success radius, fraction of arena"},
      {"env.action_max", "0.08", "per-axis action bound"},
      {"attention.image", "", "input image for the attention overlay"},
      {"attention.out", "", "overlay output path (default <out.dir>/attention.png)"},
  };
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& k : schema()) values_[k.key] = k.def;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
  set_keys_.insert(key);
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open '" + path + "'");
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    const auto begin = line.find_first_not_of(" \t\r");
    if (begin == std::string::npos) continue;
    const auto end = line.find_last_not_of(" \t\r");
    line = line.substr(begin, end - begin + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + " of '" + path +
                        "' is not key=value: '" + line + "'");
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t");
      return s.substr(b, e - b + 1);
    };
    set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const {
  try {
    return std::stoi(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
  }
}

int64_t RunConfig::get_i64(const std::string& key) const {
  try {
    return std::stoll(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
  }
}

uint64_t RunConfig::get_u64(const std::string& key) const {
  try {
    return std::stoull(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an unsigned integer: '" + get(key) + "'");
  }
}

double RunConfig::get_double(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::string RunConfig::echo() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
  return os.str();
}

uint64_t RunConfig::model_digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : values_) {
    if (k.rfind("model.", 0) != 0) continue;
    const std::string line = k + "=" + resolved_model_value(k) + "\n";
    h = fnv1a64(line.data(), line.size(), h);
  }
  return h;
}

std::string RunConfig::resolved_model_value(const std::string& key) const {
  // preset provides model.* values unless explicitly overridden
  const std::string& preset = get("model.preset");
  if (key == "model.preset" || was_set(key) || preset == "tiny") return get(key);
  if (preset != "paper") throw ConfigError("unknown model.preset '" + preset + "'");
  static const std::map<std::string, std::string> paper = {
      {"model.image_size", "224"}, {"model.patch", "16"},     {"model.channels", "3"},
      {"model.enc_dim", "768"},    {"model.enc_depth", "12"}, {"model.enc_heads", "12"},
      {"model.enc_mlp_ratio", "4"}, {"model.dec_dim", "512"}, {"model.dec_depth", "8"},
      {"model.dec_heads", "16"},   {"model.dec_mlp_ratio", "4"}, {"model.dec_arch", "self_cross"},
  };
  auto it = paper.find(key);
  return it != paper.end() ? it->second : get(key);
}

ModelConfig RunConfig::model_config() const {
  ModelConfig cfg;
  cfg.encoder.image_size = std::stoi(resolved_model_value("model.image_size"));
  cfg.encoder.patch = std::stoi(resolved_model_value("model.patch"));
  cfg.encoder.channels = std::stoi(resolved_model_value("model.channels"));
  cfg.encoder.dim = std::stoi(resolved_model_value("model.enc_dim"));
  cfg.encoder.depth = std::stoi(resolved_model_value("model.enc_depth"));
  cfg.encoder.heads = std::stoi(resolved_model_value("model.enc_heads"));
  cfg.encoder.mlp_ratio = std::stoi(resolved_model_value("model.enc_mlp_ratio"));
  cfg.decoder.dim = std::stoi(resolved_model_value("model.dec_dim"));
  cfg.decoder.depth = std::stoi(resolved_model_value("model.dec_depth"));
  cfg.decoder.heads = std::stoi(resolved_model_value("model.dec_heads"));
  cfg.decoder.mlp_ratio = std::stoi(resolved_model_value("model.dec_mlp_ratio"));
  cfg.decoder.arch = decoder_arch_from_string(resolved_model_value("model.dec_arch"));
  cfg.validate();
  return cfg;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig cfg;
  cfg.base_lr = get_double("train.base_lr");
  cfg.weight_decay = get_double("train.weight_decay");
  cfg.beta1 = get_double("train.beta1");
  cfg.beta2 = get_double("train.beta2");
  cfg.batch_size = get_int("train.batch");
  cfg.total_steps = get_int("train.steps");
  cfg.warmup_steps = get_int("train.warmup_steps");
  cfg.lambda_spatial = get_double("train.lambda_spatial");
  cfg.lambda_temporal = get_double("train.lambda_temporal");
  cfg.rho_current = get_double("mask.rho_current");
  cfg.rho_future = get_double("mask.rho_future");
  cfg.seed = get_u64("train.seed");
  cfg.threads = get_int("train.threads");
  cfg.validate();
  return cfg;
}

SynthManifest RunConfig::synth_manifest() const {
  SynthManifest m;
  m.seed = get_u64("data.seed");
  m.clips = get_int("data.clips");
  m.params.size = get_int("data.size");
  m.params.length = get_int("data.frames");
  m.params.sprites_min = get_int("data.sprites_min");
  m.params.sprites_max = get_int("data.sprites_max");
  m.params.speed_min = get_double("data.speed_min");
  m.params.speed_max = get_double("data.speed_max");
  return m;
}

DataPipelineConfig RunConfig::pipeline_config() const {
  DataPipelineConfig cfg;
  cfg.interval = IntervalPolicy::parse(get("data.interval"));
  cfg.crop = get_bool("data.crop");
  cfg.crop_scale = {get_double("data.crop_scale_min"), get_double("data.crop_scale_max")};
  cfg.out_size = std::stoi(resolved_model_value("model.image_size"));
  return cfg;
}

ToyEnvConfig RunConfig::env_config() const {
  ToyEnvConfig cfg;
  cfg.image_size = std::stoi(resolved_model_value("model.image_size"));
  cfg.horizon = get_int("env.horizon");
  cfg.success_radius = get_double("env.success_radius");
  cfg.action_max = get_double("env.action_max");
  return cfg;
}

PolicyConfig RunConfig::policy_config() const {
  PolicyConfig cfg;
  cfg.hidden.clear();
  std::istringstream hs(get("bc.hidden"));
  std::string tok;
  while (std::getline(hs, tok, ',')) {
    if (!tok.empty()) cfg.hidden.push_back(std::stoi(tok));
  }
  cfg.history = get_int("bc.history");
  cfg.epochs = get_int("bc.epochs");
  cfg.lr = get_double("bc.lr");
  cfg.batch = get_int("bc.batch");
  cfg.seed = get_u64("bc.seed");
  return cfg;
}

ProbeConfig RunConfig::probe_config() const {
  ProbeConfig cfg;
  cfg.epochs = get_int("probe.epochs");
  cfg.lr = get_double("probe.lr");
  cfg.batch = get_int("probe.batch");
  cfg.holdout = get_double("probe.holdout");
  cfg.seed = get_u64("probe.seed");
  return cfg;
}

}  // namespace stp
