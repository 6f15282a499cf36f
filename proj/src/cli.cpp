#include "ganshot/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ganshot/data_io.hpp"
#include "ganshot/detector.hpp"
#include "ganshot/evalkit.hpp"
#include "ganshot/gan.hpp"

namespace ganshot {

namespace {

namespace fs = std::filesystem;

// Resolved run configuration: training scalars plus the artifact paths a
// subcommand needs. The echo in run-config.txt round-trips through --config.
struct RunConfig {
  std::string command;
  uint64_t seed = 1;
  int epochs = 25;
  int batch_size = 72;
  int image_size = 32;
  int upscale = 4;
  float score_threshold = 0.5f;
  float nms_threshold = 0.2f;
  int threads = 1;
  int count = 100;
  bool enhancer = false;
  std::string out;
  std::string data, input, gan, ssd, ssd2, detections, gt;
  std::string config_path;
};

uint64_t parse_u64(const std::string& key, const std::string& v) {
  size_t used = 0;
  unsigned long long r = 0;
  try {
    r = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw ConfigError("config value for " + key + " is not an unsigned integer: '" + v + "'");
  return r;
}

int parse_int(const std::string& key, const std::string& v) {
  size_t used = 0;
  long r = 0;
  try {
    r = std::stol(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw ConfigError("config value for " + key + " is not an integer: '" + v + "'");
  return static_cast<int>(r);
}

float parse_float(const std::string& key, const std::string& v) {
  size_t used = 0;
  float r = 0;
  try {
    r = std::stof(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw ConfigError("config value for " + key + " is not a number: '" + v + "'");
  return r;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config value for " + key + " must be 0/1/true/false, got '" + v + "'");
}

std::string trimmed(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "command") {
    if (value != cfg.command)
      throw ConfigError("config was recorded for '" + value + "', not '" + cfg.command + "'");
  } else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "epochs") cfg.epochs = parse_int(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
  else if (key == "image_size") cfg.image_size = parse_int(key, value);
  else if (key == "upscale") cfg.upscale = parse_int(key, value);
  else if (key == "score_threshold") cfg.score_threshold = parse_float(key, value);
  else if (key == "nms_threshold") cfg.nms_threshold = parse_float(key, value);
  else if (key == "threads") cfg.threads = parse_int(key, value);
  else if (key == "count") cfg.count = parse_int(key, value);
  else if (key == "enhancer") cfg.enhancer = parse_bool(key, value);
  else if (key == "out") cfg.out = value;
  else if (key == "data") cfg.data = value;
  else if (key == "input") cfg.input = value;
  else if (key == "gan") cfg.gan = value;
  else if (key == "ssd") cfg.ssd = value;
  else if (key == "ssd2") cfg.ssd2 = value;
  else if (key == "detections") cfg.detections = value;
  else if (key == "gt") cfg.gt = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

// key=value lines; blank lines and #-comments allowed; flags already set on
// the command line win over file values.
void merge_config_file(RunConfig& cfg, const std::set<std::string>& from_flags) {
  auto blob = read_file(cfg.config_path);
  std::string text(blob.begin(), blob.end());
  size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = trimmed(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(cfg.config_path + ":" + std::to_string(line_no) +
                        ": expected key=value, got '" + line + "'");
    const std::string key = trimmed(line.substr(0, eq));
    const std::string value = trimmed(line.substr(eq + 1));
    if (key != "command" && from_flags.count(key)) continue;
    apply_config_key(cfg, key, value);
  }
}

void validate(const RunConfig& cfg) {
  auto open_unit = [](float v) { return v > 0.0f && v < 1.0f; };
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.image_size < 8) throw ConfigError("image_size must be >= 8");
  if (cfg.upscale < 2) throw ConfigError("upscale must be >= 2");
  if (!open_unit(cfg.score_threshold)) throw ConfigError("score_threshold must lie in (0,1)");
  if (!open_unit(cfg.nms_threshold)) throw ConfigError("nms_threshold must lie in (0,1)");
  if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
  if (cfg.count < 1) throw ConfigError("count must be >= 1");
}

void echo_run_config(const RunConfig& cfg) {
  std::string text;
  text += "command=" + cfg.command + "\n";
  text += "seed=" + std::to_string(cfg.seed) + "\n";
  text += "epochs=" + std::to_string(cfg.epochs) + "\n";
  text += "batch_size=" + std::to_string(cfg.batch_size) + "\n";
  text += "image_size=" + std::to_string(cfg.image_size) + "\n";
  text += "upscale=" + std::to_string(cfg.upscale) + "\n";
  text += "score_threshold=" + format_g9(cfg.score_threshold) + "\n";
  text += "nms_threshold=" + format_g9(cfg.nms_threshold) + "\n";
  text += "threads=" + std::to_string(cfg.threads) + "\n";
  text += "count=" + std::to_string(cfg.count) + "\n";
  text += std::string("enhancer=") + (cfg.enhancer ? "1" : "0") + "\n";
  text += "out=" + cfg.out + "\n";
  auto path_line = [&](const char* key, const std::string& v) {
    if (!v.empty()) text += std::string(key) + "=" + v + "\n";
  };
  path_line("data", cfg.data);
  path_line("input", cfg.input);
  path_line("gan", cfg.gan);
  path_line("ssd", cfg.ssd);
  path_line("ssd2", cfg.ssd2);
  path_line("detections", cfg.detections);
  path_line("gt", cfg.gt);
  const std::string path = (fs::path(cfg.out) / "run-config.txt").string();
  write_file(path, text.data(), text.size());
}

std::string scene_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05d.ppm", index);
  return buf;
}

std::vector<std::string> sorted_ppm_paths(const std::string& dir) {
  if (!fs::is_directory(dir)) throw InputError(dir + " is not a directory");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm")
      names.push_back(entry.path().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw InputError("no .ppm images under " + dir);
  return names;
}

std::vector<Tensor> load_images(const std::string& dir, int image_size) {
  std::vector<Tensor> images;
  for (const auto& path : sorted_ppm_paths(dir)) {
    Tensor img = read_image(path);
    if (img.shape() != Shape{3, image_size, image_size})
      throw InputError(path + " is " + shape_str(img.shape()) + ", expected [3," +
                       std::to_string(image_size) + "," + std::to_string(image_size) + "]");
    images.push_back(std::move(img));
  }
  return images;
}

std::vector<SyntheticScene> load_scenes(const std::string& dir, int image_size) {
  const std::string gt_path = (fs::path(dir) / "gt.csv").string();
  if (!fs::exists(gt_path)) throw InputError(dir + " has no gt.csv sidecar");
  auto gts = read_gt_csv(gt_path);
  auto images = load_images(dir, image_size);
  std::vector<SyntheticScene> scenes;
  for (size_t i = 0; i < images.size(); ++i) {
    SyntheticScene s;
    s.image = std::move(images[i]);
    const auto it = gts.find(static_cast<int>(i));
    if (it != gts.end()) s.gts = it->second;
    s.seed = static_cast<uint64_t>(i);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

GanConfig gan_config_of(const RunConfig& cfg) {
  GanConfig g;
  g.image_size = cfg.image_size;
  g.epochs = cfg.epochs;
  g.batch_size = cfg.batch_size;
  g.upscale_factor = cfg.upscale;
  return g;
}

int run_gen_data(const RunConfig& cfg) {
  SceneParams params;
  params.image_size = cfg.image_size;
  std::vector<SyntheticScene> scenes;
  for (int i = 0; i < cfg.count; ++i)
    scenes.push_back(synth_scene(cfg.seed + static_cast<uint64_t>(i), params));
  for (int i = 0; i < cfg.count; ++i)
    write_image((fs::path(cfg.out) / scene_name(i)).string(), scenes[static_cast<size_t>(i)].image);
  write_gt_csv((fs::path(cfg.out) / "gt.csv").string(), scenes);
  std::cout << "wrote " << cfg.count << " scenes under " << cfg.out << "\n";
  return 0;
}

int run_train_gan(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("train-gan needs --data");
  std::vector<Tensor> images;
  if (fs::path(cfg.data).extension() == ".bin") {
    if (cfg.image_size != 32)
      throw ConfigError("CIFAR batches are 32x32; image_size " +
                        std::to_string(cfg.image_size) + " does not apply");
    for (auto& record : read_cifar_batch(cfg.data)) images.push_back(std::move(record.image));
  } else {
    images = load_images(cfg.data, cfg.image_size);
  }

  GanConfig g = gan_config_of(cfg);
  GanTrainResult result;
  if (cfg.enhancer) {
    std::vector<EnhancerPair> pairs;
    for (auto& img : images) {
      SyntheticScene scene;
      scene.image = std::move(img);
      pairs.push_back(make_pairs(scene, g.upscale_factor));
    }
    result = train_enhancer(pairs, g, cfg.seed);
  } else {
    result = train_gan(images, g, cfg.seed);
  }
  const std::string ckpt = (fs::path(cfg.out) / "gan.ckpt").string();
  save_gan_checkpoint(ckpt, result.model);
  write_gan_loss_csv((fs::path(cfg.out) / "gan-loss.csv").string(), result.epochs);
  std::cout << "wrote " << ckpt << "\n";
  return 0;
}

int run_train_detector(const RunConfig& cfg) {
  if (cfg.data.empty()) throw ConfigError("train-detector needs --data");
  auto scenes = load_scenes(cfg.data, cfg.image_size);
  int num_classes = 1;
  for (const auto& scene : scenes)
    for (const auto& [box, cls] : scene.gts) num_classes = std::max(num_classes, cls + 1);

  DetectorConfig d;
  d.num_classes = num_classes;
  d.image_size = cfg.image_size;
  d.epochs = cfg.epochs;
  d.batch_size = cfg.batch_size;
  DetectorTrainResult result = train_detector(scenes, d, cfg.seed);

  const std::string ckpt = (fs::path(cfg.out) / "ssd.ckpt").string();
  save_ssd_checkpoint(ckpt, result.model);
  std::string csv = "epoch,loss\n";
  for (size_t e = 0; e < result.epoch_loss.size(); ++e)
    csv += std::to_string(e + 1) + "," + format_g9(result.epoch_loss[e]) + "\n";
  const std::string csv_path = (fs::path(cfg.out) / "detector-loss.csv").string();
  write_file(csv_path, csv.data(), csv.size());
  std::cout << "wrote " << ckpt << "\n";
  return 0;
}

int run_enhance(const RunConfig& cfg) {
  if (cfg.gan.empty() || cfg.input.empty()) throw ConfigError("enhance needs --gan and --input");
  GanModel model = load_gan_checkpoint(cfg.gan);
  Tensor low = read_image(cfg.input);
  Tensor restored = enhance(model, low, cfg.seed);
  const std::string path = (fs::path(cfg.out) / "enhanced.ppm").string();
  write_image(path, restored);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int run_detect(const RunConfig& cfg) {
  if (cfg.ssd.empty()) throw ConfigError("detect needs --ssd");
  if (cfg.input.empty() == cfg.data.empty())
    throw ConfigError("detect needs exactly one of --input or --data");
  SsdModel model = load_ssd_checkpoint(cfg.ssd);

  std::vector<Tensor> images;
  if (!cfg.input.empty()) images.push_back(read_image(cfg.input));
  else images = load_images(cfg.data, model.image_size);

  std::vector<std::vector<Detection>> per_image;
  for (const auto& img : images)
    per_image.push_back(nms(detect(model, img), cfg.nms_threshold));
  const std::string path = (fs::path(cfg.out) / "detections.csv").string();
  write_detections_csv(path, per_image);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int run_eval(const RunConfig& cfg) {
  if (cfg.detections.empty() || cfg.gt.empty())
    throw ConfigError("eval needs --detections and --gt");
  auto det_map = read_detections_csv(cfg.detections);
  auto gt_map = read_gt_csv(cfg.gt);

  std::set<int> ids;
  for (const auto& [id, v] : det_map) ids.insert(id);
  for (const auto& [id, v] : gt_map) ids.insert(id);

  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<std::pair<BoundingBox, int>>> gts;
  for (int id : ids) {
    auto d = det_map.find(id);
    dets.push_back(d == det_map.end() ? std::vector<Detection>{} : d->second);
    auto g = gt_map.find(id);
    gts.push_back(g == gt_map.end() ? std::vector<std::pair<BoundingBox, int>>{} : g->second);
  }

  EvalConfig e;
  e.score_threshold = cfg.score_threshold;
  e.nms_threshold = cfg.nms_threshold;
  PrCurve curve = pr_curve(dets, gts, e);
  write_pr_csv((fs::path(cfg.out) / "pr.csv").string(), curve);
  std::cout << "f1 " << format_g9(curve.f1_at_default) << "\n";
  return 0;
}

int run_compare(const RunConfig& cfg) {
  if (cfg.data.empty() || cfg.gan.empty() || cfg.ssd.empty())
    throw ConfigError("compare needs --data, --gan and --ssd");
  SsdModel ssd_naive = load_ssd_checkpoint(cfg.ssd);
  SsdModel ssd_enhanced = cfg.ssd2.empty() ? ssd_naive : load_ssd_checkpoint(cfg.ssd2);
  GanModel enhancer_model = load_gan_checkpoint(cfg.gan);
  auto scenes = load_scenes(cfg.data, ssd_naive.image_size);

  EvalConfig e;
  e.score_threshold = cfg.score_threshold;
  e.nms_threshold = cfg.nms_threshold;
  std::string dataset = fs::path(cfg.data).filename().string();
  if (dataset.empty()) dataset = "dataset";

  CompareReport report =
      compare_pipelines(dataset, scenes, ssd_naive, enhancer_model, ssd_enhanced, e);
  write_compare_csv((fs::path(cfg.out) / "compare.csv").string(), report);

  // side-by-side annotated frames, detections filtered at the score threshold
  const fs::path ann_dir = fs::path(cfg.out) / "annotated";
  fs::create_directories(ann_dir);
  const int size = ssd_naive.image_size;
  const int factor = enhancer_model.cfg.upscale_factor;
  for (size_t i = 0; i < scenes.size(); ++i) {
    Tensor low = box_downsample(scenes[i].image, factor);
    Tensor naive = reshape(
        upsample_nearest(reshape(low, Shape{1, 3, size / factor, size / factor}), factor),
        Shape{3, size, size});
    Tensor restored = enhance(enhancer_model, low, static_cast<uint64_t>(i));

    auto confident = [&](std::vector<Detection> dets) {
      std::vector<Detection> keep;
      for (const auto& d : dets)
        if (d.score >= cfg.score_threshold) keep.push_back(d);
      return keep;
    };
    auto dets_naive = confident(nms(detect(ssd_naive, naive), e.nms_threshold));
    auto dets_restored = confident(nms(detect(ssd_enhanced, restored), e.nms_threshold));

    char name[48];
    std::snprintf(name, sizeof(name), "ssd_%05zu.ppm", i);
    write_image((ann_dir / name).string(), annotate(naive, scenes[i].gts, dets_naive));
    std::snprintf(name, sizeof(name), "dcgan_ssd_%05zu.ppm", i);
    write_image((ann_dir / name).string(), annotate(restored, scenes[i].gts, dets_restored));
  }

  for (const auto& row : report.rows)
    std::cout << row.pipeline << " f1 " << format_g9(row.f1) << " recall "
              << format_g9(row.recall) << " tiny_recall " << format_g9(row.tiny_recall) << "\n";
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  RunConfig cfg;
  CLI::App app{"dcgan-enhanced small-object detection"};
  app.require_subcommand(1);

  struct FlagSpec {
    const char* flag;
    const char* key;
  };
  std::set<std::string> from_flags;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", cfg.config_path, "key=value file; flags win");
    sub->add_option("--seed", cfg.seed, "run seed");
    sub->add_option("--out", cfg.out, "output directory (default $GANSHOT_OUT or .)");
    sub->add_option("--threads", cfg.threads, "worker threads (default 1, deterministic)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "write synthetic scenes and gt.csv");
  add_common(gen);
  gen->add_option("--count", cfg.count, "number of scenes");
  gen->add_option("--image-size", cfg.image_size, "scene resolution");

  CLI::App* tgan = app.add_subcommand("train-gan", "train the adversarial pair");
  add_common(tgan);
  tgan->add_option("--data", cfg.data, "scene directory or CIFAR .bin batch");
  tgan->add_option("--epochs", cfg.epochs, "training epochs");
  tgan->add_option("--batch-size", cfg.batch_size, "minibatch size");
  tgan->add_option("--image-size", cfg.image_size, "training resolution");
  tgan->add_option("--upscale", cfg.upscale, "enhancer upscale factor");
  tgan->add_flag("--enhancer", cfg.enhancer, "train the low-res restoration generator");

  CLI::App* tdet = app.add_subcommand("train-detector", "train the detector on scenes");
  add_common(tdet);
  tdet->add_option("--data", cfg.data, "scene directory with gt.csv");
  tdet->add_option("--epochs", cfg.epochs, "training epochs");
  tdet->add_option("--batch-size", cfg.batch_size, "minibatch size");
  tdet->add_option("--image-size", cfg.image_size, "detector input resolution");

  CLI::App* enh = app.add_subcommand("enhance", "restore one low-res image");
  add_common(enh);
  enh->add_option("--gan", cfg.gan, "enhancer checkpoint");
  enh->add_option("--input", cfg.input, "low-res .ppm image");

  CLI::App* det = app.add_subcommand("detect", "detect objects and dump detections.csv");
  add_common(det);
  det->add_option("--ssd", cfg.ssd, "detector checkpoint");
  det->add_option("--input", cfg.input, "single .ppm image");
  det->add_option("--data", cfg.data, "directory of .ppm images");
  det->add_option("--nms-threshold", cfg.nms_threshold, "suppression overlap");
  det->add_option("--score-threshold", cfg.score_threshold, "reported in run config");

  CLI::App* ev = app.add_subcommand("eval", "precision/recall from detection and gt CSVs");
  add_common(ev);
  ev->add_option("--detections", cfg.detections, "detections.csv");
  ev->add_option("--gt", cfg.gt, "gt.csv");
  ev->add_option("--score-threshold", cfg.score_threshold, "F1 cutoff");
  ev->add_option("--nms-threshold", cfg.nms_threshold, "recorded for reproducibility");

  CLI::App* cmp = app.add_subcommand("compare", "naive-upsample vs enhancer pipelines");
  add_common(cmp);
  cmp->add_option("--data", cfg.data, "scene directory with gt.csv");
  cmp->add_option("--gan", cfg.gan, "enhancer checkpoint");
  cmp->add_option("--ssd", cfg.ssd, "detector checkpoint (naive pipeline)");
  cmp->add_option("--ssd2", cfg.ssd2, "detector checkpoint for the enhanced pipeline");
  cmp->add_option("--score-threshold", cfg.score_threshold, "F1 cutoff");
  cmp->add_option("--nms-threshold", cfg.nms_threshold, "suppression overlap");

  std::vector<char*> argv;
  std::vector<std::string> storage = args;
  storage.insert(storage.begin(), "ganshot");
  for (auto& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  cfg.command = sub->get_name();

  const FlagSpec flags[] = {
      {"--seed", "seed"},           {"--epochs", "epochs"},
      {"--batch-size", "batch_size"}, {"--image-size", "image_size"},
      {"--upscale", "upscale"},     {"--score-threshold", "score_threshold"},
      {"--nms-threshold", "nms_threshold"}, {"--threads", "threads"},
      {"--count", "count"},         {"--enhancer", "enhancer"},
      {"--out", "out"},             {"--data", "data"},
      {"--input", "input"},         {"--gan", "gan"},
      {"--ssd", "ssd"},             {"--ssd2", "ssd2"},
      {"--detections", "detections"}, {"--gt", "gt"}};
  for (const auto& spec : flags) {
    const CLI::Option* opt = sub->get_option_no_throw(spec.flag);
    if (opt && opt->count() > 0) from_flags.insert(spec.key);
  }

  try {
    if (!cfg.config_path.empty()) merge_config_file(cfg, from_flags);
    if (cfg.out.empty()) {
      const char* env = std::getenv("GANSHOT_OUT");
      cfg.out = env && *env ? env : ".";
    }
    validate(cfg);
    fs::create_directories(cfg.out);
    echo_run_config(cfg);

    if (cfg.command == "gen-data") return run_gen_data(cfg);
    if (cfg.command == "train-gan") return run_train_gan(cfg);
    if (cfg.command == "train-detector") return run_train_detector(cfg);
    if (cfg.command == "enhance") return run_enhance(cfg);
    if (cfg.command == "detect") return run_detect(cfg);
    if (cfg.command == "eval") return run_eval(cfg);
    if (cfg.command == "compare") return run_compare(cfg);
    throw ConfigError("unhandled subcommand " + cfg.command);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const BuildError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ganshot
