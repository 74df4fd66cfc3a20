// latentvision command line: compress | latents | train | eval | report.
// Exit codes: 0 success, 2 usage or config error, 3 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "latentvision/plot.hpp"
#include "latentvision/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lvc;

namespace {

std::string default_data_root() {
  const char* env = std::getenv("LATENTVISION_DATA");
  return env ? env : "";
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty() || !fs::exists(path))
    throw ConfigError(what + " not found: " + (path.empty() ? "(unset)" : path));
}

std::string stem_of(const std::string& path) {
  return fs::path(path).stem().string();
}

// ---------------------------------------------------------------------------
// RunSpec: one structured config file per run, CLI flags override file keys,
// the resolved config is archived beside the outputs.
// ---------------------------------------------------------------------------

struct RunSpec {
  std::string mode = "frozen";
  std::string dataset_root;
  std::string manifest;
  std::string codec_weights;
  std::string classifier_init;
  std::string train_store;
  std::string val_store;
  std::string output_dir = "run";
  int quality_index = 8;
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  double rd_weight = 0.0;
  int classifier_width_divisor = 1;
  int codec_internal_channels = 64;
  bool log_sigma_input = false;
  int max_train_images = 0;  // 0 = use the full split
  int max_val_images = 0;
  double joint_task_weight = 1.0;
  double joint_rate_weight = 0.0;
  double joint_dist_weight = 0.0;

  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "command",         "mode",
        "dataset_root",    "manifest",
        "codec_weights",   "classifier_init",
        "train_store",     "val_store",
        "output_dir",      "quality_index",
        "epochs",          "batch_size",
        "learning_rate",   "seed",
        "rd_weight",       "classifier_width_divisor",
        "codec_internal_channels", "log_sigma_input",
        "max_train_images", "max_val_images",
        "joint_task_weight", "joint_rate_weight", "joint_dist_weight"};
    return keys;
  }

  void load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config: " + path);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    std::vector<std::string> unknown;
    for (const auto& [key, _] : j.items())
      if (!known_keys().count(key)) unknown.push_back(key);
    if (!unknown.empty()) {
      std::string msg = "unknown config keys:";
      for (const auto& k : unknown) msg += " " + k;
      throw ConfigError(msg);
    }
    if (j.contains("command") && j["command"] != "train")
      throw ConfigError("config command must be \"train\"");
    mode = j.value("mode", mode);
    dataset_root = j.value("dataset_root", dataset_root);
    manifest = j.value("manifest", manifest);
    codec_weights = j.value("codec_weights", codec_weights);
    classifier_init = j.value("classifier_init", classifier_init);
    train_store = j.value("train_store", train_store);
    val_store = j.value("val_store", val_store);
    output_dir = j.value("output_dir", output_dir);
    quality_index = j.value("quality_index", quality_index);
    epochs = j.value("epochs", epochs);
    batch_size = j.value("batch_size", batch_size);
    learning_rate = j.value("learning_rate", learning_rate);
    seed = j.value("seed", seed);
    rd_weight = j.value("rd_weight", rd_weight);
    classifier_width_divisor =
        j.value("classifier_width_divisor", classifier_width_divisor);
    codec_internal_channels =
        j.value("codec_internal_channels", codec_internal_channels);
    log_sigma_input = j.value("log_sigma_input", log_sigma_input);
    max_train_images = j.value("max_train_images", max_train_images);
    max_val_images = j.value("max_val_images", max_val_images);
    joint_task_weight = j.value("joint_task_weight", joint_task_weight);
    joint_rate_weight = j.value("joint_rate_weight", joint_rate_weight);
    joint_dist_weight = j.value("joint_dist_weight", joint_dist_weight);
  }

  json resolved() const {
    return {{"command", "train"},
            {"mode", mode},
            {"dataset_root", dataset_root},
            {"manifest", manifest},
            {"codec_weights", codec_weights},
            {"classifier_init", classifier_init},
            {"train_store", train_store},
            {"val_store", val_store},
            {"output_dir", output_dir},
            {"quality_index", quality_index},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"seed", seed},
            {"rd_weight", rd_weight},
            {"classifier_width_divisor", classifier_width_divisor},
            {"codec_internal_channels", codec_internal_channels},
            {"log_sigma_input", log_sigma_input},
            {"max_train_images", max_train_images},
            {"max_val_images", max_val_images},
            {"joint_task_weight", joint_task_weight},
            {"joint_rate_weight", joint_rate_weight},
            {"joint_dist_weight", joint_dist_weight}};
  }

  TrainConfig to_train_config() const {
    TrainConfig c;
    c.mode = mode_from_name(mode);
    c.quality_index = quality_index;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.learning_rate = learning_rate;
    c.seed = seed;
    c.rd_weight = rd_weight;
    c.classifier_width_divisor = classifier_width_divisor;
    c.codec_internal_channels = codec_internal_channels;
    c.log_sigma_input = log_sigma_input;
    c.joint_weights = {joint_task_weight, joint_rate_weight,
                       joint_dist_weight};
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// compress
// ---------------------------------------------------------------------------

int cmd_compress(const std::vector<std::string>& images,
                 const std::string& weights, const std::string& out_dir) {
  require_file(weights, "codec weights");
  CodecModel model = load_codec(weights);
  fs::create_directories(out_dir);
  GaussianPmfCache cache;

  std::ofstream csv(out_dir + "/bpp.csv");
  std::ofstream errs(out_dir + "/errors.csv");
  if (!csv || !errs) throw std::runtime_error("cannot write in " + out_dir);
  csv << "file,H,W,bytes,bpp\n" << std::setprecision(10);
  errs << "file,error\n";

  int ok = 0, failed = 0;
  for (const auto& img_path : images) {
    try {
      Tensor img = load_image(img_path);
      const int H = img.dim(1), W = img.dim(2);
      CompressResult res = compress(reflect_pad_to_multiple(img, 64), model,
                                    &cache);
      std::string out = out_dir + "/" + stem_of(img_path) + ".lvc";
      for (int k = 2; fs::exists(out); ++k)
        out = out_dir + "/" + stem_of(img_path) + "_" + std::to_string(k) +
              ".lvc";
      std::ofstream os(out, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write " + out);
      os.write(reinterpret_cast<const char*>(res.stream.data()),
               static_cast<std::streamsize>(res.stream.size()));
      double bpp = 8.0 * static_cast<double>(res.stream.size()) / (H * W);
      csv << img_path << "," << H << "," << W << "," << res.stream.size()
          << "," << bpp << "\n";
      ++ok;
    } catch (const std::exception& e) {
      std::cerr << "warning: " << img_path << ": " << e.what() << "\n";
      errs << img_path << "," << e.what() << "\n";
      ++failed;
    }
  }
  std::cout << "compressed " << ok << "/" << images.size() << " image(s) to "
            << out_dir << "\n";
  return (ok == 0 && failed > 0) ? 3 : 0;
}

// ---------------------------------------------------------------------------
// latents
// ---------------------------------------------------------------------------

int cmd_latents(const std::string& root, const std::string& manifest,
                const std::string& weights, const std::string& split,
                const std::string& out, uint64_t seed) {
  if (root.empty() || !fs::exists(root))
    throw ConfigError("dataset root not found: " +
                      (root.empty() ? "(unset)" : root));
  require_file(weights, "codec weights");
  CodecModel model = load_codec(weights);
  DatasetIndex index = ingest(root, manifest, seed);
  LatentStore store = precompute_latents(index, split_from_name(split), model);
  if (fs::path(out).has_parent_path())
    fs::create_directories(fs::path(out).parent_path());
  write_store(out, store);
  std::cout << store.records.size() << " record(s) -> " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

void write_train_artifacts(const RunSpec& spec, const RunMetrics& metrics) {
  metrics.write_csv(spec.output_dir + "/metrics.csv");
  {
    std::ofstream os(spec.output_dir + "/summary.json");
    os << metrics.summary_json().dump(2) << "\n";
  }
  std::vector<double> train_loss, val_loss, top1;
  for (const auto& r : metrics.rows) {
    train_loss.push_back(r.train_loss);
    val_loss.push_back(r.val_loss);
    top1.push_back(r.val_top1);
  }
  write_line_svg(spec.output_dir + "/loss.svg", "loss vs epoch", "loss",
                 {{"train", train_loss}, {"val", val_loss}});
  write_line_svg(spec.output_dir + "/top1.svg", "val top-1 vs epoch",
                 "top-1 (%)", {{"val top-1", top1}});
}

std::vector<LabeledImage> take_first(std::vector<LabeledImage> v, int limit) {
  if (limit > 0 && static_cast<int>(v.size()) > limit) v.resize(limit);
  return v;
}

int cmd_train(const RunSpec& spec) {
  TrainConfig cfg = spec.to_train_config();
  fs::create_directories(spec.output_dir);
  {
    std::ofstream os(spec.output_dir + "/config.json");
    if (!os) throw std::runtime_error("cannot write in " + spec.output_dir);
    os << spec.resolved().dump(2) << "\n";
  }

  if (cfg.mode == TrainMode::kCodec) {
    if (spec.dataset_root.empty() || !fs::exists(spec.dataset_root))
      throw ConfigError("dataset root not found: " + spec.dataset_root);
    DatasetIndex index = ingest(spec.dataset_root, spec.manifest, spec.seed);
    auto train_set = take_first(load_split_images(index, Split::kTrain),
                                spec.max_train_images);
    auto val_set = take_first(load_split_images(index, Split::kVal),
                              spec.max_val_images);
    CodecModel model(QualityConfig::for_quality(spec.quality_index), spec.seed,
                     spec.codec_internal_channels);
    RunMetrics metrics = pretrain_codec(cfg, model, train_set, val_set, true);
    save_codec(spec.output_dir + "/codec.lvcw", model);
    write_train_artifacts(spec, metrics);
    std::cout << "codec -> " << spec.output_dir << "/codec.lvcw\n";
    return 0;
  }

  require_file(spec.codec_weights, "codec weights");
  CodecModel codec = load_codec(spec.codec_weights);
  if (codec.q.quality_index != spec.quality_index)
    throw ConfigError("codec weights are for quality " +
                      std::to_string(codec.q.quality_index));

  if (cfg.mode == TrainMode::kFrozen) {
    LatentStore store_train, store_val;
    if (!spec.train_store.empty()) {
      require_file(spec.train_store, "train store");
      require_file(spec.val_store, "val store");
      store_train = read_store(spec.train_store);
      store_val = read_store(spec.val_store);
    } else {
      if (spec.dataset_root.empty() || !fs::exists(spec.dataset_root))
        throw ConfigError("dataset root not found: " + spec.dataset_root);
      DatasetIndex index = ingest(spec.dataset_root, spec.manifest, spec.seed);
      store_train = precompute_latents(index, Split::kTrain, codec);
      store_val = precompute_latents(index, Split::kVal, codec);
    }
    uint64_t codec_hash = params_hash(codec.parameters());

    ClassifierConfig ccfg;
    ccfg.num_classes = store_train.num_classes;
    ccfg.latent_channels = codec.q.latent_channels;
    ccfg.log_sigma_input = spec.log_sigma_input;
    ccfg = ccfg.scaled(spec.classifier_width_divisor);
    ccfg.validate();
    CResNet model(ccfg, spec.seed);
    if (!spec.classifier_init.empty()) {
      require_file(spec.classifier_init, "classifier init");
      model = load_classifier(spec.classifier_init);
    }

    FrozenResult result = train_frozen(cfg, model, store_train, store_val,
                                       true);
    if (params_hash(codec.parameters()) != codec_hash)
      throw std::runtime_error("frozen contract violated: codec moved");
    for (const auto& p : model.parameters()) {
      auto it = result.best_weights.find(p.name);
      if (it != result.best_weights.end()) p.var->value = it->second;
    }
    save_classifier(spec.output_dir + "/classifier.lvcw", model);
    write_train_artifacts(spec, result.metrics);
    std::cout << "classifier -> " << spec.output_dir
              << "/classifier.lvcw (best top-1 " << result.metrics.best_top1
              << ")\n";
    return 0;
  }

  // Joint fine-tuning.
  if (spec.dataset_root.empty() || !fs::exists(spec.dataset_root))
    throw ConfigError("dataset root not found: " + spec.dataset_root);
  DatasetIndex index = ingest(spec.dataset_root, spec.manifest, spec.seed);
  auto train_set = take_first(load_split_images(index, Split::kTrain),
                              spec.max_train_images);
  auto val_set = take_first(load_split_images(index, Split::kVal),
                            spec.max_val_images);

  ClassifierConfig ccfg;
  ccfg.num_classes = index.num_classes();
  ccfg.latent_channels = codec.q.latent_channels;
  ccfg.log_sigma_input = spec.log_sigma_input;
  ccfg = ccfg.scaled(spec.classifier_width_divisor);
  ccfg.validate();
  CResNet model(ccfg, spec.seed);
  if (!spec.classifier_init.empty()) {
    require_file(spec.classifier_init, "classifier init");
    model = load_classifier(spec.classifier_init);
  }

  RunMetrics metrics = train_joint(cfg, codec, model, train_set, val_set,
                                   true);
  save_codec(spec.output_dir + "/codec.lvcw", codec);
  save_classifier(spec.output_dir + "/classifier.lvcw", model);
  write_train_artifacts(spec, metrics);
  std::cout << "joint -> " << spec.output_dir << " (best top-1 "
            << metrics.best_top1 << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& classifier_path, const std::string& store_path,
             const std::string& out_csv) {
  require_file(classifier_path, "classifier checkpoint");
  require_file(store_path, "latent store");
  CResNet model = load_classifier(classifier_path);
  LatentStore store = read_store(store_path);
  EvalResult r = evaluate(model, store);

  std::cout << std::setprecision(10) << "top1 " << r.top1 << "\ntop5 "
            << r.top5 << "\nmean_bpp " << r.mean_bpp << "\n";
  if (!out_csv.empty()) {
    std::ofstream os(out_csv);
    if (!os) throw std::runtime_error("cannot write " + out_csv);
    os << "top1,top5,mean_bpp\n"
       << std::setprecision(10) << r.top1 << "," << r.top5 << "," << r.mean_bpp
       << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct RunCell {
  double top1 = 0, top5 = 0;
  bool present = false;
};

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_dir) {
  std::map<int, std::map<std::string, RunCell>> table;  // quality -> mode
  std::set<std::string> modes;
  int loaded = 0;
  for (const auto& dir : dirs) {
    std::ifstream sj(dir + "/summary.json"), cj(dir + "/config.json");
    if (!sj || !cj) {
      std::cerr << "warning: skipping " << dir << " (missing summary.json or "
                << "config.json)\n";
      continue;
    }
    try {
      json summary = json::parse(sj);
      json config = json::parse(cj);
      int q = config.at("quality_index").get<int>();
      std::string mode = config.at("mode").get<std::string>();
      RunCell cell;
      cell.top1 = summary.at("best_top1").get<double>();
      cell.top5 = summary.value("final_top5", 0.0);
      cell.present = true;
      table[q][mode] = cell;
      modes.insert(mode);
      ++loaded;
    } catch (const json::exception& e) {
      std::cerr << "warning: skipping " << dir << ": " << e.what() << "\n";
    }
  }
  if (loaded == 0) throw ConfigError("no readable run directories");

  std::ostringstream md, csv;
  md << std::setprecision(4) << std::fixed;
  csv << std::setprecision(10);
  md << "| quality |";
  csv << "quality";
  for (const auto& m : modes) {
    md << " " << m << " top-1 | " << m << " top-5 |";
    csv << "," << m << "_top1," << m << "_top5";
  }
  md << "\n|---|";
  for (size_t i = 0; i < 2 * modes.size(); ++i) md << "---|";
  md << "\n";
  csv << "\n";
  for (const auto& [q, row] : table) {
    md << "| " << q << " |";
    csv << q;
    for (const auto& m : modes) {
      auto it = row.find(m);
      if (it != row.end() && it->second.present) {
        md << " " << it->second.top1 << " | " << it->second.top5 << " |";
        csv << "," << it->second.top1 << "," << it->second.top5;
      } else {
        md << " - | - |";
        csv << ",,";
      }
    }
    md << "\n";
    csv << "\n";
  }

  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/report.md") << md.str();
  std::ofstream(out_dir + "/report.csv") << csv.str();
  std::cout << md.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latentvision: learned codec latents for classification"};
  app.require_subcommand(1);

  // compress
  auto* compress_cmd =
      app.add_subcommand("compress", "compress images to .lvc bitstreams");
  std::vector<std::string> images;
  std::string weights, out_dir = ".";
  compress_cmd->add_option("images", images, "input images")->required();
  compress_cmd->add_option("--weights", weights, "codec checkpoint")
      ->required();
  compress_cmd->add_option("--out", out_dir, "output directory");

  // latents
  auto* latents_cmd =
      app.add_subcommand("latents", "precompute a latent store for one split");
  std::string root = default_data_root(), manifest, split = "train", store_out;
  uint64_t lat_seed = 0;
  latents_cmd->add_option("--root", root, "dataset root");
  latents_cmd->add_option("--manifest", manifest, "manifest path");
  latents_cmd->add_option("--weights", weights, "codec checkpoint")
      ->required();
  latents_cmd->add_option("--split", split, "train|val|test");
  latents_cmd->add_option("--out", store_out, "output store path")->required();
  latents_cmd->add_option("--seed", lat_seed, "split seed (directory layout)");

  // train
  auto* train_cmd = app.add_subcommand("train", "run a training RunSpec");
  std::string config_path;
  RunSpec spec;
  bool has_mode = false, has_quality = false, has_epochs = false,
       has_batch = false, has_lr = false, has_seed = false, has_out = false,
       has_root = false;
  std::string o_mode, o_out, o_root;
  int o_quality = 0, o_epochs = 0, o_batch = 0;
  double o_lr = 0;
  uint64_t o_seed = 0;
  train_cmd->add_option("--config", config_path, "RunSpec JSON file");
  train_cmd->add_option("--mode", o_mode, "codec|frozen|joint")
      ->each([&](const std::string&) { has_mode = true; });
  train_cmd->add_option("--quality", o_quality, "quality index")
      ->each([&](const std::string&) { has_quality = true; });
  train_cmd->add_option("--epochs", o_epochs, "epochs")
      ->each([&](const std::string&) { has_epochs = true; });
  train_cmd->add_option("--batch-size", o_batch, "batch size")
      ->each([&](const std::string&) { has_batch = true; });
  train_cmd->add_option("--lr", o_lr, "learning rate")
      ->each([&](const std::string&) { has_lr = true; });
  train_cmd->add_option("--seed", o_seed, "seed")
      ->each([&](const std::string&) { has_seed = true; });
  train_cmd->add_option("--out", o_out, "output directory")
      ->each([&](const std::string&) { has_out = true; });
  train_cmd->add_option("--root", o_root, "dataset root")
      ->each([&](const std::string&) { has_root = true; });

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a classifier on a store");
  std::string classifier_path, store_path, eval_csv;
  eval_cmd->add_option("--classifier", classifier_path, "classifier checkpoint")
      ->required();
  eval_cmd->add_option("--store", store_path, "latent store")->required();
  eval_cmd->add_option("--out", eval_csv, "output CSV path");

  // report
  auto* report_cmd =
      app.add_subcommand("report", "tabulate runs across qualities and modes");
  std::vector<std::string> run_dirs;
  std::string report_out = ".";
  report_cmd->add_option("dirs", run_dirs, "run directories")->required();
  report_cmd->add_option("--out", report_out, "report output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*compress_cmd) return cmd_compress(images, weights, out_dir);
    if (*latents_cmd)
      return cmd_latents(root, manifest, weights, split, store_out, lat_seed);
    if (*train_cmd) {
      if (!config_path.empty()) spec.load(config_path);
      if (spec.dataset_root.empty()) spec.dataset_root = default_data_root();
      if (has_mode) spec.mode = o_mode;
      if (has_quality) spec.quality_index = o_quality;
      if (has_epochs) spec.epochs = o_epochs;
      if (has_batch) spec.batch_size = o_batch;
      if (has_lr) spec.learning_rate = o_lr;
      if (has_seed) spec.seed = o_seed;
      if (has_out) spec.output_dir = o_out;
      if (has_root) spec.dataset_root = o_root;
      return cmd_train(spec);
    }
    if (*eval_cmd) return cmd_eval(classifier_path, store_path, eval_csv);
    if (*report_cmd) return cmd_report(run_dirs, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
