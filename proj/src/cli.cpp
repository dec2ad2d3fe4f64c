#include "metadec/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "metadec/image_io.hpp"
#include "metadec/report.hpp"
#include "metadec/training.hpp"

namespace fs = std::filesystem;

namespace metadec {

namespace {

struct MissingFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const char* kFooter =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected failure\n"
    "  2  unknown verb\n"
    "  3  invalid flags or config\n"
    "  4  missing input file\n"
    "  5  invalid dataset or checkpoint contents\n"
    "  6  training loss became non-finite";

const std::vector<std::string> kVerbs{"synth", "train", "eval", "infer", "drift-report",
                                      "inspect-layout"};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingFile(what + " not found: " + path);
}

std::string read_text(const std::string& path) {
  require_file(path, "file");
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Config keys as flags; values override the config file.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app, bool with_profile = true) {
    app->add_option("--config", file, "key = value config file");
    for (const auto& key : config_keys()) {
      if (key == "profile" && !with_profile) continue;
      if (key == "seed") continue;
      app->add_option("--" + key, values[key], "config key " + key);
    }
  }

  ModelConfig resolve(CLI::App* app, const std::optional<std::uint64_t>& seed) const {
    RawConfig raw;
    if (!file.empty()) {
      require_file(file, "config file");
      raw = read_config_file(file);
    }
    for (const auto& [key, value] : values) {
      if (app->count("--" + key) > 0) raw[key] = value;
    }
    if (seed) raw["seed"] = std::to_string(*seed);
    return validate_config(raw);
  }
};

std::vector<Sample> load_split(const std::string& root, const std::string& split) {
  require_file(root, "dataset directory");
  require_file((fs::path(root) / "splits" / (split + ".txt")).string(), "split file");
  try {
    return load_dataset(root, split);
  } catch (const std::exception& e) {
    throw BadData(e.what());
  }
}

void print_config(std::ostream& out, const ModelConfig& cfg) {
  out << "# resolved config\n" << serialize_config(cfg) << std::flush;
}

std::unique_ptr<Model<float>> load_model(const std::string& path, std::ostream& out) {
  require_file(path, "checkpoint");
  ModelConfig cfg;
  try {
    cfg = checkpoint_config(path);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw BadData(e.what());
  }
  print_config(out, cfg);
  auto model = std::make_unique<Model<float>>(cfg);
  try {
    load_checkpoint(path, *model, nullptr);
  } catch (const std::exception& e) {
    throw BadData(e.what());
  }
  return model;
}

std::vector<std::string> list_pngs(const std::string& dir) {
  require_file(dir, "input directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  if (argc >= 2) {
    const std::string first = argv[1];
    if (!first.empty() && first[0] != '-' &&
        std::find(kVerbs.begin(), kVerbs.end(), first) == kVerbs.end()) {
      err << "error: unknown verb '" << first << "' (expected synth, train, eval, infer, "
          << "drift-report or inspect-layout)\n";
      return kExitUnknownVerb;
    }
  }

  CLI::App app{"Input-conditioned decoder generation for infrared small-target segmentation"};
  app.footer(kFooter);
  app.require_subcommand(1);
  app.fallthrough();
  int workers = 1;
  app.add_option("--workers", workers, "parallel workers for data preparation")->check(CLI::PositiveNumber);

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset directory");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  synth->add_option("--spec", synth_spec, "scene spec file (key = value)");
  synth->add_option("--out", synth_out, "output dataset root")->required();
  synth->add_option("--seed", synth_seed, "generator seed")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model, writing checkpoints and a log");
  ConfigFlags train_cfg;
  train_cfg.attach(train_cmd);
  std::string train_data, train_out, train_split = "train", val_split = "test";
  std::uint64_t train_seed = 0;
  int max_steps = -1;
  bool resume = false;
  train_cmd->add_option("--data", train_data, "dataset root")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_cmd->add_option("--seed", train_seed, "training seed")->required();
  train_cmd->add_option("--train-split", train_split, "training split name");
  train_cmd->add_option("--val-split", val_split, "validation split name");
  train_cmd->add_option("--steps", max_steps, "step budget (default: epochs x batches)");
  train_cmd->add_flag("--resume", resume, "continue from <out>/last.ckpt");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_out;
  double threshold = 0.5, radius = 3.0;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_data)->required();
  eval_cmd->add_option("--split", eval_split);
  eval_cmd->add_option("--out", eval_out, "metric CSV path (default metrics.csv)");
  eval_cmd->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--match-radius", radius)->check(CLI::NonNegativeNumber);

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "write PNG masks for every PNG in a directory");
  std::string infer_ckpt, infer_in, infer_out;
  bool write_prob = false, dump_hp = false;
  infer_cmd->add_option("--checkpoint", infer_ckpt)->required();
  infer_cmd->add_option("--input", infer_in)->required();
  infer_cmd->add_option("--out", infer_out)->required();
  infer_cmd->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));
  infer_cmd->add_flag("--probability", write_prob, "write probabilities instead of binary masks");
  infer_cmd->add_flag("--dump-highpass", dump_hp, "also write the high-pass channel");

  // drift-report
  auto* drift_cmd = app.add_subcommand("drift-report", "per-scenario metrics and parameter separation");
  std::string drift_ckpt, drift_data, drift_split = "test", drift_out;
  drift_cmd->add_option("--checkpoint", drift_ckpt)->required();
  drift_cmd->add_option("--data", drift_data)->required();
  drift_cmd->add_option("--split", drift_split);
  drift_cmd->add_option("--out", drift_out, "drift CSV path (default drift.csv)");
  drift_cmd->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));

  // inspect-layout
  auto* layout_cmd = app.add_subcommand("inspect-layout", "print the generated-parameter layout");
  ConfigFlags layout_cfg;
  layout_cfg.attach(layout_cmd);
  std::string variant, layout_out;
  layout_cmd->add_option("--variant", variant, "alias for --decoder_variant");
  layout_cmd->add_option("--out", layout_out, "also write the CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    app.exit(e, o, er);
    std::string msg = er.str();
    if (msg.empty()) msg = e.what();
    err << msg;
    if (msg.back() != '\n') err << "\n";
    return kExitBadFlags;
  }

  try {
    if (*synth) {
      SynthDatasetSpec spec;
      if (!synth_spec.empty()) spec = parse_synth_spec(read_text(synth_spec));
      spec.seed = synth_seed;
      out << "# resolved scene spec\nscenarios = ";
      for (std::size_t i = 0; i < spec.scenarios.size(); ++i) {
        out << (i ? "," : "") << to_string(spec.scenarios[i]);
      }
      out << "\ntrain = " << spec.per_scenario_train << "\ntest = " << spec.per_scenario_test
          << "\nheight = " << spec.height << "\nwidth = " << spec.width
          << "\nmin_targets = " << spec.min_targets << "\nmax_targets = " << spec.max_targets
          << "\nseed = " << spec.seed << "\n";
      std::vector<std::string> tr, te;
      auto samples = synth_dataset(spec, &tr, &te, workers);
      write_dataset(synth_out, samples, tr, te);
      out << "wrote " << samples.size() << " samples to " << synth_out << "\n";
      return kExitOk;
    }
    if (*train_cmd) {
      const ModelConfig cfg = train_cfg.resolve(train_cmd, train_seed);
      print_config(out, cfg);
      auto train_set = load_split(train_data, train_split);
      std::vector<Sample> val_set;
      if (fs::exists(fs::path(train_data) / "splits" / (val_split + ".txt"))) {
        val_set = load_split(train_data, val_split);
      }
      Model<float> model(cfg);
      TrainOptions opt;
      opt.out_dir = train_out;
      opt.max_steps = max_steps;
      opt.resume = resume;
      opt.workers = workers;
      opt.progress = &out;
      fs::create_directories(train_out);
      std::ofstream(fs::path(train_out) / "config.cfg") << serialize_config(cfg);
      TrainState st;
      try {
        st = train(model, train_set, val_set, opt);
      } catch (const std::runtime_error& e) {
        if (std::string(e.what()).rfind("non-finite loss", 0) == 0) {
          err << "error: " << e.what() << "\n";
          return kExitDiverged;
        }
        throw;
      }
      out << "final step " << st.step << " loss " << st.last_loss << " best val IoU "
          << st.best_iou << "\n";
      return kExitOk;
    }
    if (*eval_cmd) {
      auto model = load_model(eval_ckpt, out);
      auto samples = load_split(eval_data, eval_split);
      const MetricReport all = evaluate_model(*model, samples, threshold, radius);
      std::string csv = metric_csv_header() + metric_csv_row(eval_split, "all", all);
      for (const auto& row : evaluate_by_scenario(*model, samples, threshold, radius)) {
        csv += metric_csv_row(eval_split, row.scenario, row.metrics);
      }
      const std::string path = eval_out.empty() ? "metrics.csv" : eval_out;
      std::ofstream(path) << csv;
      out << "IoU " << all.iou << " Pd " << all.pd << " Fa " << all.fa << " (" << all.n_images
          << " images, " << all.n_targets << " targets) -> " << path << "\n";
      return kExitOk;
    }
    if (*infer_cmd) {
      auto model = load_model(infer_ckpt, out);
      const auto files = list_pngs(infer_in);
      fs::create_directories(infer_out);
      for (const auto& f : files) {
        Tensor<std::uint8_t> raw;
        try {
          raw = read_png_gray(f);
        } catch (const std::exception& e) {
          throw BadData(e.what());
        }
        Tensor<double> img(raw.shape());
        for (std::size_t i = 0; i < raw.size(); ++i) img[i] = raw[i] / 255.0;
        const auto prob = predict_probabilities(*model, img);
        Tensor<std::uint8_t> mask(prob.shape());
        for (std::size_t i = 0; i < prob.size(); ++i) {
          mask[i] = write_prob ? static_cast<std::uint8_t>(std::lround(prob[i] * 255.0))
                               : (prob[i] >= threshold ? 255 : 0);
        }
        const fs::path name = fs::path(f).filename();
        write_png_gray((fs::path(infer_out) / name).string(), mask);
        if (dump_hp) {
          const auto sf = spatial_frequency_input(img, model->config().sigma_hp);
          double lo = sf.highpass[0], hi = sf.highpass[0];
          for (double v : sf.highpass.values()) lo = std::min(lo, v), hi = std::max(hi, v);
          Tensor<double> scaled(sf.highpass.shape());
          for (std::size_t i = 0; i < scaled.size(); ++i) {
            scaled[i] = hi > lo ? (sf.highpass[i] - lo) / (hi - lo) : 0.0;
          }
          write_png_gray((fs::path(infer_out) / (name.stem().string() + "_highpass.png")).string(),
                         to_u8(scaled));
        }
      }
      out << "wrote " << files.size() << " masks to " << infer_out << "\n";
      return kExitOk;
    }
    if (*drift_cmd) {
      auto model = load_model(drift_ckpt, out);
      auto samples = load_split(drift_data, drift_split);
      DriftReport rep;
      try {
        rep = drift_report(*model, samples, threshold);
      } catch (const std::invalid_argument& e) {
        throw BadData(e.what());
      }
      const std::string path = drift_out.empty() ? "drift.csv" : drift_out;
      std::ofstream(path) << drift_csv(rep.rows, rep.stats);
      out << "separation ratio " << rep.stats.ratio << (rep.stats.degenerate ? " (degenerate)" : "")
          << " intra " << rep.stats.intra << " inter " << rep.stats.inter << " -> " << path << "\n";
      return kExitOk;
    }
    if (*layout_cmd) {
      ModelConfig cfg = layout_cfg.resolve(layout_cmd, std::nullopt);
      if (!variant.empty()) {
        RawConfig raw = to_raw(cfg);
        raw["decoder_variant"] = variant;
        cfg = validate_config(raw);
      }
      print_config(out, cfg);
      const auto schema = make_schema(cfg.decoder_variant, cfg.decoder_width, cfg.num_decoder_stages);
      const auto layout = compute_layout(schema, cfg);
      const std::string csv = layout_csv(schema, layout);
      out << csv;
      if (!layout_out.empty()) std::ofstream(layout_out) << csv;
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "error: invalid config: " << e.what() << "\n";
    return kExitBadFlags;
  } catch (const MissingFile& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissingFile;
  } catch (const BadData& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace metadec
