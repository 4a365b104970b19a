#include "stp/commands.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "stp/downstream.hpp"
#include "stp/image_io.hpp"

namespace stp {

namespace {

namespace fs = std::filesystem;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
}

std::string format_csv_row(const StepStats& s) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g,%.10g\n",
                static_cast<long long>(s.step), s.total, s.spatial, s.temporal, s.lr);
  return buf;
}

std::vector<VideoClip> load_clips(const RunConfig& cfg) {
  const std::string& source = cfg.get("data.source");
  if (source == "dir") {
    const std::string& dir = cfg.get("data.dir");
    if (dir.empty()) throw ConfigError("data.source=dir requires data.dir");
    auto clips = ingest_frames(dir);
    if (clips.empty()) throw ValueError("data source empty: no clips under '" + dir + "'");
    return clips;
  }
  if (source != "synth") throw ConfigError("unknown data.source '" + source + "' (synth|dir)");
  SynthManifest manifest = cfg.get("data.manifest").empty()
                               ? cfg.synth_manifest()
                               : SynthManifest::load(cfg.get("data.manifest"));
  if (manifest.clips < 1) throw ValueError("data source empty: data.clips < 1");
  return generate_dataset(manifest);
}

ChannelStats stats_from_checkpoint(const Checkpoint& ck) {
  ChannelStats stats;
  const auto* m = ck.find("data.ch_mean");
  const auto* s = ck.find("data.ch_std");
  if (m && s && m->data.size() == 3 && s->data.size() == 3) {
    for (int c = 0; c < 3; ++c) {
      stats.mean[static_cast<size_t>(c)] = m->data[static_cast<size_t>(c)];
      stats.stdev[static_cast<size_t>(c)] = s->data[static_cast<size_t>(c)];
    }
  }
  return stats;
}

StpModel<float> model_from_checkpoint(const RunConfig& cfg, Checkpoint& ck) {
  if (cfg.get("ckpt.path").empty()) throw ConfigError("this command requires ckpt.path");
  ck = Checkpoint::load(cfg.get("ckpt.path"));
  Rng init_rng = Rng(cfg.get_u64("train.seed")).derive({stream_tag::kInit});
  StpModel<float> model(cfg.model_config(), init_rng);
  load_model_params(model, ck, cfg.model_digest(), cfg.get_bool("ckpt.force"));
  return model;
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::istringstream is(text);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw ConfigError("empty seed list '" + text + "'");
  return seeds;
}

}  // namespace

int cmd_pretrain(const RunConfig& cfg) {
  const std::string out_dir = cfg.get("out.dir");
  fs::create_directories(out_dir);
  write_text(out_dir + "/config.echo", cfg.echo());

  auto clips = load_clips(cfg);
  const ChannelStats stats = compute_channel_stats(clips);
  const DataPipelineConfig pipeline = cfg.pipeline_config();

  TrainConfig train_cfg = cfg.train_config();
  if (cfg.get_int("train.epochs") > 0) {
    const int spe = (static_cast<int>(clips.size()) + train_cfg.batch_size - 1) / train_cfg.batch_size;
    train_cfg.total_steps = cfg.get_int("train.epochs") * spe;
    train_cfg.warmup_steps = cfg.get_int("train.warmup_epochs") * spe;
  }

  Rng init_rng = Rng(train_cfg.seed).derive({stream_tag::kInit});
  StpModel<float> model(cfg.model_config(), init_rng);
  Trainer<float> trainer(model, train_cfg, cfg.model_digest());

  const std::string csv_path = out_dir + "/losses.csv";
  bool resumed = false;
  if (!cfg.get("ckpt.path").empty()) {
    trainer.load_checkpoint(cfg.get("ckpt.path"), cfg.get_bool("ckpt.force"));
    resumed = trainer.step_count() > 0;
  }
  std::ofstream csv(csv_path, resumed && fs::exists(csv_path) ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot open '" + csv_path + "' for writing");
  if (!resumed || !fs::exists(csv_path) || fs::file_size(csv_path) == 0)
    csv << "step,total,spatial,temporal,lr\n";

  const std::string ckpt_path = out_dir + "/ckpt.stpc";
  const int save_every = cfg.get_int("train.save_every");
  auto save = [&](const Trainer<float>& tr) {
    Checkpoint ck = tr.to_checkpoint();
    ck.tensors.push_back({"data.ch_mean",
                          {3},
                          {static_cast<float>(stats.mean[0]), static_cast<float>(stats.mean[1]),
                           static_cast<float>(stats.mean[2])}});
    ck.tensors.push_back({"data.ch_std",
                          {3},
                          {static_cast<float>(stats.stdev[0]), static_cast<float>(stats.stdev[1]),
                           static_cast<float>(stats.stdev[2])}});
    ck.save(ckpt_path);
  };

  int64_t run_until = train_cfg.total_steps;
  if (cfg.get_int("train.stop_after") > 0)
    run_until = std::min<int64_t>(run_until, cfg.get_int("train.stop_after"));
  StepStats last{};
  train_loop<float>(trainer, clips, pipeline, stats, run_until,
                    [&](const StepStats& s) {
                      csv << format_csv_row(s);
                      last = s;
                      if (save_every > 0 && s.step % save_every == save_every - 1) save(trainer);
                      if (s.step % 50 == 0 || s.step + 1 == run_until) {
                        std::printf("step %lld  total %.5f  spatial %.5f  temporal %.5f  lr %.3g\n",
                                    static_cast<long long>(s.step), s.total, s.spatial, s.temporal,
                                    s.lr);
                        std::fflush(stdout);
                      }
                    });
  csv.flush();
  save(trainer);

  if (cfg.get("data.source") == "synth" && cfg.get("data.manifest").empty()) {
    cfg.synth_manifest().save(out_dir + "/manifest.txt");
  }
  std::ostringstream report;
  report << "steps=" << trainer.step_count() << "\n"
         << "final_total=" << last.total << "\n"
         << "final_spatial=" << last.spatial << "\n"
         << "final_temporal=" << last.temporal << "\n"
         << "params=" << param_count(model.params()) << "\n"
         << "config_digest=" << cfg.model_digest() << "\n";
  write_text(out_dir + "/report.txt", report.str());
  std::printf("checkpoint: %s\n", ckpt_path.c_str());
  return 0;
}

int cmd_synth_data(const RunConfig& cfg) {
  const std::string out_dir = cfg.get("out.dir");
  fs::create_directories(out_dir);
  write_text(out_dir + "/config.echo", cfg.echo());
  const SynthManifest manifest = cfg.synth_manifest();
  manifest.save(out_dir + "/manifest.txt");
  const int export_clips = std::min(cfg.get_int("data.export_clips"), manifest.clips);
  if (export_clips > 0) {
    SynthManifest preview = manifest;
    preview.clips = export_clips;
    auto clips = generate_dataset(preview);
    for (size_t i = 0; i < clips.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "clip%04zu", i);
      export_clip_ppm(clips[i], out_dir + "/frames/" + name);
    }
  }
  std::printf("manifest: %s/manifest.txt (%d clips)\n", out_dir.c_str(), manifest.clips);
  return 0;
}

namespace {

// Single-sprite clips so the displacement label is unambiguous.
std::vector<PairExample<float>> probe_pairs(const RunConfig& cfg, const ChannelStats& stats) {
  SynthManifest manifest = cfg.synth_manifest();
  manifest.clips = cfg.get_int("probe.clips");
  manifest.seed = splitmix64(cfg.get_u64("probe.seed") ^ 0x5052ull);
  manifest.params.sprites_min = manifest.params.sprites_max = 1;
  auto clips = generate_dataset(manifest);
  DataPipelineConfig pipeline;
  pipeline.interval = IntervalPolicy::parse(cfg.get("probe.interval"));
  pipeline.crop = false;
  pipeline.out_size = manifest.params.size;
  const int per_clip = cfg.get_int("probe.pairs_per_clip");
  std::vector<PairExample<float>> pairs;
  pairs.reserve(clips.size() * static_cast<size_t>(per_clip));
  for (size_t ci = 0; ci < clips.size(); ++ci) {
    for (int j = 0; j < per_clip; ++j) {
      Rng rng = Rng(manifest.seed).derive({0x5041ull, ci, static_cast<uint64_t>(j)});
      pairs.push_back(make_example<float>(clips[ci], pipeline, stats, rng));
    }
  }
  return pairs;
}

}  // namespace

int cmd_probe(const RunConfig& cfg) {
  const std::string out_dir = cfg.get("out.dir");
  fs::create_directories(out_dir);
  write_text(out_dir + "/config.echo", cfg.echo());

  Checkpoint ck;
  StpModel<float> pretrained = model_from_checkpoint(cfg, ck);
  const ChannelStats stats = stats_from_checkpoint(ck);
  auto pairs = probe_pairs(cfg, stats);

  const ProbeConfig probe_cfg = cfg.probe_config();
  const double acc_pretrained =
      motion_probe(build_probe_dataset(pretrained.encoder(), pairs), probe_cfg);

  Rng random_rng = Rng(splitmix64(probe_cfg.seed ^ 0x52414e44ull)).derive({stream_tag::kInit});
  StpModel<float> random_init(cfg.model_config(), random_rng);
  const double acc_random =
      motion_probe(build_probe_dataset(random_init.encoder(), pairs), probe_cfg);

  std::ostringstream report;
  report << "probe.pretrained=" << acc_pretrained << "\n"
         << "probe.random_init=" << acc_random << "\n"
         << "probe.gap=" << acc_pretrained - acc_random << "\n";
  write_text(out_dir + "/report.txt", report.str());
  std::printf("%s", report.str().c_str());
  return 0;
}

int cmd_bc(const RunConfig& cfg) {
  const std::string out_dir = cfg.get("out.dir");
  fs::create_directories(out_dir);
  write_text(out_dir + "/config.echo", cfg.echo());

  Checkpoint ck;
  StpModel<float> model = model_from_checkpoint(cfg, ck);
  const ToyEnvConfig env_cfg = cfg.env_config();

  std::vector<Trajectory> demos;
  if (!cfg.get("bc.demos_path").empty()) {
    demos = load_demos(cfg.get("bc.demos_path"));
  } else {
    demos = collect_expert_demos(env_cfg, cfg.get_int("bc.demos"), cfg.get_u64("bc.demo_seed"));
  }
  if (demos.empty()) throw ValueError("bc: empty demonstration set");
  if (!cfg.get("bc.save_demos").empty()) save_demos(cfg.get("bc.save_demos"), demos);

  PolicyConfig policy_cfg = cfg.policy_config();
  const BcDataset dataset = build_bc_dataset(model.encoder(), demos, policy_cfg);
  Rng policy_rng = Rng(policy_cfg.seed).derive({0x504f4cull});
  MlpPolicy<float> policy(static_cast<int>(dataset.features.front().size()), policy_cfg.hidden, 2,
                          policy_rng);
  const double train_loss = bc_train(policy, dataset, policy_cfg);

  const auto base_seeds = parse_seed_list(cfg.get("bc.base_seeds"));
  const int episodes = cfg.get_int("bc.episodes");
  std::ostringstream report;
  report << "bc.train_loss=" << train_loss << "\n";
  double mean_success = 0;
  for (uint64_t seed : base_seeds) {
    const double success =
        rollout_eval(policy, model.encoder(), env_cfg, policy_cfg, episodes, seed);
    report << "bc.success.seed" << seed << "=" << success << "\n";
    mean_success += success;
  }
  mean_success /= static_cast<double>(base_seeds.size());
  report << "bc.success.mean=" << mean_success << "\n";
  write_text(out_dir + "/report.txt", report.str());
  std::printf("%s", report.str().c_str());
  return 0;
}

int cmd_attention(const RunConfig& cfg) {
  const std::string out_dir = cfg.get("out.dir");
  fs::create_directories(out_dir);
  write_text(out_dir + "/config.echo", cfg.echo());
  if (cfg.get("attention.image").empty()) throw ConfigError("attention requires attention.image");

  Checkpoint ck;
  StpModel<float> model = model_from_checkpoint(cfg, ck);
  const ChannelStats stats = stats_from_checkpoint(ck);
  const EncoderConfig& enc_cfg = model.config().encoder;

  Tensor<float> image = read_image(cfg.get("attention.image"));
  if (image.dim(1) != enc_cfg.image_size || image.dim(2) != enc_cfg.image_size) {
    throw ShapeError("attention: image is " + shape_str(image.shape()) + ", model expects " +
                     std::to_string(enc_cfg.image_size) + "x" + std::to_string(enc_cfg.image_size));
  }

  const int grid = enc_cfg.grid();
  Tensor<float> heat =
      minmax_normalize(cls_attention_grid(model.encoder(), channel_normalize(image, stats)));
  Tensor<float> heat_full =
      bilinear_resize(reshape(heat, {1, grid, grid}), 0, 0, grid, grid, enc_cfg.image_size,
                      enc_cfg.image_size);

  // overlay: dim the frame, add yellow proportional to attention
  const int hw = enc_cfg.image_size * enc_cfg.image_size;
  std::vector<float> overlay(static_cast<size_t>(3) * hw);
  const float yellow[3] = {1.0f, 0.95f, 0.1f};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < hw; ++i)
      overlay[static_cast<size_t>(c) * hw + i] =
          0.4f * image.data()[static_cast<size_t>(c) * hw + i] +
          0.6f * yellow[c] * heat_full.data()[static_cast<size_t>(i)];
  std::string out_path = cfg.get("attention.out");
  if (out_path.empty()) out_path = out_dir + "/attention.png";
  write_image(out_path, Tensor<float>::from_data({3, enc_cfg.image_size, enc_cfg.image_size},
                                                 std::move(overlay)));
  std::printf("attention overlay: %s\n", out_path.c_str());
  return 0;
}

namespace {

std::string env_var_name(const std::string& key) {
  std::string name = "STP_";
  for (char c : key) name += c == '.' ? '_' : static_cast<char>(std::toupper(c));
  return name;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"STP: spatiotemporal predictive pre-training at desk scale"};
  app.require_subcommand(1);

  struct SubState {
    CLI::App* sub = nullptr;
    std::string config_file;
    std::map<std::string, std::string> overrides;
  };
  std::vector<SubState> subs(5);
  const char* names[5] = {"pretrain", "probe", "bc", "attention", "synth-data"};
  const char* descs[5] = {"run spatiotemporal predictive pre-training",
                          "train the displacement-direction linear probe (pretrained vs random)",
                          "behavior-clone an MLP policy on frozen features and evaluate rollouts",
                          "write the [CLS] attention overlay for an image",
                          "write a regenerable synthetic-dataset manifest (optionally export frames)"};
  for (int i = 0; i < 5; ++i) {
    subs[static_cast<size_t>(i)].sub = app.add_subcommand(names[i], descs[i]);
    auto& st = subs[static_cast<size_t>(i)];
    st.sub->add_option("-c,--config", st.config_file, "key=value config file")
        ->envname("STP_CONFIG");
    for (const auto& key : RunConfig::schema()) {
      st.sub->add_option("--" + std::string(key.key), st.overrides[key.key], key.help)
          ->envname(env_var_name(key.key));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: cli: " << e.what() << "\n";
    return 2;
  }

  try {
    for (int i = 0; i < 5; ++i) {
      auto& st = subs[static_cast<size_t>(i)];
      if (!st.sub->parsed()) continue;
      RunConfig cfg;
      if (!st.config_file.empty()) cfg.load_file(st.config_file);
      for (const auto& key : RunConfig::schema()) {
        if (st.sub->count("--" + std::string(key.key)) > 0) cfg.set(key.key, st.overrides[key.key]);
      }
      switch (i) {
        case 0: return cmd_pretrain(cfg);
        case 1: return cmd_probe(cfg);
        case 2: return cmd_bc(cfg);
        case 3: return cmd_attention(cfg);
        case 4: return cmd_synth_data(cfg);
      }
    }
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "error: shape: " << e.what() << "\n";
    return 4;
  } catch (const ValueError& e) {
    std::cerr << "error: value: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace stp
