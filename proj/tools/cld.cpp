// cld: synthetic data, training, decomposition and evaluation.
//
// Exit codes: 0 success, 1 validation/config error, 2 I/O error,
// 3 numeric failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cld/config.hpp"
#include "cld/flow.hpp"
#include "cld/metrics.hpp"
#include "cld/stack_io.hpp"
#include "cld/synth.hpp"

namespace fs = std::filesystem;
using namespace cld;

namespace {

std::string stack_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "stack_%05zu", i);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenOptions {
  std::string out;
  std::size_t count = 8;
  std::uint64_t seed = 0;
  std::size_t frame = 64;
  std::size_t max_layers = 3;
};

int cmd_gen_data(const GenOptions& o) {
  if (o.count == 0) throw ConfigError("gen-data: --count must be positive");
  if (o.max_layers == 0) throw ConfigError("gen-data: --max-layers must be at least 1");
  const fs::path out(o.out);
  ensure_dir(out);
  const nlohmann::json echo = {{"command", "gen-data"},
                               {"count", o.count},
                               {"seed", o.seed},
                               {"frame", o.frame},
                               {"max_layers", o.max_layers}};
  std::vector<IndexEntry> entries;
  for (std::size_t i = 0; i < o.count; ++i) {
    std::mt19937_64 pick(detail::mix_seed(o.seed, 10, i));
    SynthConfig sc;
    sc.frame_size = o.frame;
    sc.n_layers = std::uniform_int_distribution<std::size_t>(1, o.max_layers)(pick);
    const LayerStack stack = synth_stack(detail::mix_seed(o.seed, 11, i), sc);
    const std::string id = stack_id(i);
    entries.push_back(IndexEntry{id, save_stack(stack, out / id)});
  }
  write_index(out, entries);
  write_json_file(out / "gen_config.json", echo);
  std::cout << echo.dump() << "\n" << "wrote " << o.count << " stacks to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string data;
  std::string config;
  std::string out;
  std::string resume;
  std::string log;
  std::size_t save_every = 1000;
  std::vector<std::string> overrides;  // key=value
  bool quiet = false;
};

template <typename T>
std::vector<TrainingExample<T>> load_training_set(const fs::path& dir, const ModelConfig& cfg) {
  std::vector<TrainingExample<T>> out;
  for (const auto& e : read_index(dir)) out.push_back(make_example<T>(load_stack(e.manifest), cfg));
  if (out.empty()) throw ValidationError("train: dataset " + dir.string() + " has no stacks");
  return out;
}

template <typename T>
int run_training(const TrainOptions& o, const RunConfig& run) {
  Trainer<T> trainer(run.model, run.train, load_training_set<T>(o.data, run.model));
  if (!o.resume.empty()) trainer.resume(o.resume);
  const std::string log_path = o.log.empty() ? o.out + ".csv" : o.log;
  const bool append = !o.resume.empty() && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open training log " + log_path);
  if (!append) log << "step,loss,wall_ms\n";

  const auto start = std::chrono::steady_clock::now();
  double loss = 0.0;
  const std::size_t target = run.train.steps;
  while (trainer.step() < target) {
    loss = trainer.train_step();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - start)
                        .count();
    char line[96];
    std::snprintf(line, sizeof line, "%zu,%.9g,%lld\n", trainer.step(), loss,
                  run.log_wall_ms ? static_cast<long long>(ms) : 0LL);
    log << line;
    if (!o.quiet && (trainer.step() % 100 == 0 || trainer.step() == target)) {
      std::cout << "step " << trainer.step() << " loss " << loss << "\n" << std::flush;
    }
    if (o.save_every > 0 && trainer.step() % o.save_every == 0 && trainer.step() < target) {
      trainer.save(o.out);
    }
  }
  log.flush();
  if (!log) throw IoError("failed writing training log " + log_path);
  trainer.save(o.out);
  std::cout << "final step " << trainer.step() << " loss " << loss << "\n";
  return 0;
}

int cmd_train(const TrainOptions& o) {
  KeyValueConfig kv;
  if (!o.config.empty()) kv = KeyValueConfig::load(o.config);
  for (const auto& item : o.overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
    kv.set(item.substr(0, eq), item.substr(eq + 1));
  }
  RunConfig run;
  run.apply(kv);
  const std::string echo = run.echo();
  std::cout << echo;
  const fs::path out(o.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_text_file(o.out + ".config", echo);
  return run.precision == "f64" ? run_training<double>(o, run) : run_training<float>(o, run);
}

// ---------------------------------------------------------------------------
// decompose

struct DecomposeOptions {
  std::string ckpt;
  std::string image;
  std::string boxes = "[]";
  std::string prompt;
  std::string out;
  SampleConfig sample;
  bool drop_image_uncond = false;
};

std::vector<BBox> parse_boxes(const std::string& arg, std::size_t h, std::size_t w) {
  nlohmann::json j;
  const bool is_file = !arg.empty() && arg.front() != '[' && fs::exists(arg);
  j = is_file ? read_json_file(arg) : [&] {
    try {
      return nlohmann::json::parse(arg);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("--boxes is neither a JSON file nor inline JSON: " + std::string(e.what()));
    }
  }();
  if (!j.is_array()) throw ValidationError("--boxes must be a JSON list of [x_l, y_l, x_r, y_r]");
  std::vector<BBox> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string what = "box " + std::to_string(i) + " " + j[i].dump();
    const BBox b = bbox_from_json(j[i], what);
    require_valid_bbox(b, h, w, what);
    out.push_back(b);
  }
  return out;
}

template <typename T>
int run_decompose(const DecomposeOptions& o) {
  auto [cfg, params] = load_model<T>(o.ckpt);
  SampleRequest req;
  req.image = read_png<3>(o.image);
  req.boxes = parse_boxes(o.boxes, req.image.height, req.image.width);
  req.prompt = split_words(o.prompt);
  SampleConfig sc = o.sample;
  sc.uncond_keeps_image = !o.drop_image_uncond;
  const LayerStack pred = sample(params, cfg, req, sc);

  const fs::path out(o.out);
  nlohmann::json requested = nlohmann::json::array();
  for (const auto& b : req.boxes) requested.push_back(bbox_to_json(b));
  const nlohmann::json echo = {{"command", "decompose"},
                               {"checkpoint", o.ckpt},
                               {"image", o.image},
                               {"prompt", req.prompt},
                               {"steps", sc.n_steps},
                               {"cfg", sc.cfg_scale},
                               {"seed", sc.seed},
                               {"uncond_keeps_image", sc.uncond_keeps_image}};
  save_stack(pred, out,
             {{"requested_boxes", requested}, {"recomposite", "recomposite.png"}, {"config", echo}},
             "composite_pred.png");
  write_png((out / "recomposite.png").string(), over_composite(pred));
  std::cout << echo.dump() << "\n"
            << "wrote " << pred.foregrounds.size() << " foreground layers to " << out.string()
            << "\n";
  return 0;
}

int cmd_decompose(const DecomposeOptions& o) {
  const std::string dtype = load_checkpoint(o.ckpt).header.value("dtype", "f32");
  return dtype == "f64" ? run_decompose<double>(o) : run_decompose<float>(o);
}

// ---------------------------------------------------------------------------
// eval

struct EvalCliOptions {
  std::string pred;
  std::string gt;
  std::string out;
  bool dtw = false;
  bool self_check = false;
};

fs::path find_pred_manifest(const fs::path& pred_dir, const std::map<std::string, fs::path>& pred_index,
                            const std::string& id) {
  if (const auto it = pred_index.find(id); it != pred_index.end()) return it->second;
  return pred_dir / id / "manifest.json";
}

int cmd_eval(EvalCliOptions o) {
  if (o.self_check) o.pred = o.gt;
  if (o.pred.empty()) throw ConfigError("eval: --pred is required unless --self-check is given");
  const fs::path gt_dir(o.gt), pred_dir(o.pred);
  const fs::path out = o.out.empty() ? pred_dir / "eval" : fs::path(o.out);
  ensure_dir(out / "reports");

  std::map<std::string, fs::path> pred_index;
  if (fs::exists(pred_dir / "index.json")) {
    for (const auto& e : read_index(pred_dir)) pred_index[e.id] = e.manifest;
  }
  EvalOptions opts;
  opts.dtw = o.dtw;

  std::ostringstream csv;
  csv << "id,layers,psnr,ssim,rgb_l1,alpha_soft_iou,mask_iou,f1,unified_score,recon_psnr,recon_ssim\n";
  std::vector<std::vector<double>> emb_pred, emb_gt;
  std::size_t evaluated = 0, skipped = 0;
  double sum_unified = 0, sum_mask_iou = 0, sum_recon_psnr = 0;
  for (const auto& entry : read_index(gt_dir)) {
    const fs::path pm = find_pred_manifest(pred_dir, pred_index, entry.id);
    if (!fs::exists(pm)) {
      std::cerr << "warning: no prediction for " << entry.id << " (" << pm.string()
                << "), skipped\n";
      ++skipped;
      continue;
    }
    const LayerStack gt = load_stack(entry.manifest);
    const LayerStack pred = load_stack(pm);
    const MetricReport r = evaluate_stack(pred, gt, opts);
    nlohmann::json j = r.to_json();
    j["id"] = entry.id;
    j["config"] = {{"dtw", o.dtw}, {"mask_threshold", opts.threshold}};
    write_json_file(out / "reports" / (entry.id + ".json"), j);
    char row[512];
    std::snprintf(row, sizeof row, "%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  entry.id.c_str(), r.per_layer.size(), r.mean_psnr, r.mean_ssim, r.mean_rgb_l1,
                  r.mean_alpha_soft_iou, r.mean_mask_iou, r.mean_f1, r.unified_score,
                  r.recon_psnr, r.recon_ssim);
    csv << row;
    for (std::size_t k = 0; k < pred.layer_count(); ++k) {
      emb_pred.push_back(pixel64_embedding(rgba_to_rgb(pred.layer(k))));
    }
    for (std::size_t k = 0; k < gt.layer_count(); ++k) {
      emb_gt.push_back(pixel64_embedding(rgba_to_rgb(gt.layer(k))));
    }
    sum_unified += r.unified_score;
    sum_mask_iou += r.mean_mask_iou;
    sum_recon_psnr += r.recon_psnr;
    ++evaluated;
  }
  if (evaluated == 0) {
    throw IoError("eval: no stack had a prediction counterpart (" + std::to_string(skipped) +
                  " skipped)");
  }
  write_text_file(out / "summary.csv", csv.str());
  const double n = static_cast<double>(evaluated);
  nlohmann::json agg = {{"evaluated", evaluated},
                        {"skipped", skipped},
                        {"mean_unified_score", sum_unified / n},
                        {"mean_mask_iou", sum_mask_iou / n},
                        {"mean_recon_psnr", sum_recon_psnr / n},
                        {"config", {{"pred", o.pred}, {"gt", o.gt}, {"dtw", o.dtw}}}};
  if (emb_pred.size() >= 2 && emb_gt.size() >= 2) {
    const FrechetResult f = frechet_distance(emb_pred, emb_gt);
    if (f.regularized) {
      std::cerr << "warning: singular covariance in Frechet distance, regularized with eps="
                << f.epsilon << "\n";
    }
    agg["frechet"] = {{"value", f.value},
                      {"embedding", kPixel64Embedding},
                      {"regularized", f.regularized},
                      {"epsilon", f.epsilon}};
  }
  write_json_file(out / "aggregate.json", agg);
  std::cout << agg.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Controllable layer decomposition toolkit"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic layered dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of stacks");
  gen_cmd->add_option("--seed", gen.seed, "Random seed");
  gen_cmd->add_option("--frame", gen.frame, "Frame side in pixels");
  gen_cmd->add_option("--max-layers", gen.max_layers,
                      "Maximum layers per stack, background included");

  TrainOptions train;
  std::size_t steps = 0;
  auto* train_cmd = app.add_subcommand("train", "Train the flow-matching model");
  train_cmd->add_option("--data", train.data, "Dataset directory (with index.json)")->required();
  train_cmd->add_option("--config", train.config, "key = value config file");
  train_cmd->add_option("--out", train.out, "Checkpoint path")->required();
  train_cmd->add_option("--steps", steps, "Total optimizer steps (overrides train.steps)");
  train_cmd->add_option("--resume", train.resume, "Continue from this checkpoint");
  train_cmd->add_option("--log", train.log, "Loss log CSV (default: <out>.csv)");
  train_cmd->add_option("--save-every", train.save_every, "Checkpoint interval in steps");
  train_cmd->add_option("--set", train.overrides, "Config override key=value (repeatable)");
  train_cmd->add_flag("--quiet", train.quiet, "Only print the final loss");

  DecomposeOptions dec;
  auto* dec_cmd = app.add_subcommand(
      "decompose",
      "Split an image into layers.\n"
      "--boxes takes a JSON file or inline JSON: a list of [x_l, y_l, x_r, y_r]\n"
      "pixel boxes, bottom-to-top, e.g. '[[8,8,40,40],[20,16,60,56]]'.");
  dec_cmd->add_option("--ckpt", dec.ckpt, "Checkpoint")->required();
  dec_cmd->add_option("--image", dec.image, "Input RGB PNG")->required();
  dec_cmd->add_option("--boxes", dec.boxes, "Foreground boxes (JSON file or inline JSON)");
  dec_cmd->add_option("--prompt", dec.prompt, "Prompt words");
  dec_cmd->add_option("--steps", dec.sample.n_steps, "Euler steps");
  dec_cmd->add_option("--cfg", dec.sample.cfg_scale, "Guidance scale");
  dec_cmd->add_option("--seed", dec.sample.seed, "Noise seed");
  dec_cmd->add_option("--out", dec.out, "Output directory")->required();
  dec_cmd->add_flag("--drop-image-uncond", dec.drop_image_uncond,
                    "Drop the image condition from the unconditional branch");

  EvalCliOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate predicted stacks against ground truth");
  eval_cmd->add_option("--pred", ev.pred, "Prediction directory");
  eval_cmd->add_option("--gt", ev.gt, "Ground-truth dataset directory")->required();
  eval_cmd->add_option("--out", ev.out, "Report directory (default: <pred>/eval)");
  eval_cmd->add_flag("--dtw", ev.dtw, "Align layers with DTW instead of by position");
  eval_cmd->add_flag("--self-check", ev.self_check, "Evaluate the ground truth against itself");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kValidation);
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) {
      if (steps > 0) train.overrides.insert(train.overrides.begin(), "train.steps=" + std::to_string(steps));
      return cmd_train(train);
    }
    if (*dec_cmd) return cmd_decompose(dec);
    if (*eval_cmd) return cmd_eval(ev);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kIo);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kValidation);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kIo);
  }
  return 0;
}
