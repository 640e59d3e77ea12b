// msdet: data generation, preprocessing, analysis, gradient checks, training,
// evaluation and inference for the MSDet tiny-nodule detector.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>

#include "msdet/arch.hpp"
#include "msdet/checkpoint.hpp"
#include "msdet/dataset_io.hpp"
#include "msdet/gradcheck_suite.hpp"
#include "msdet/train.hpp"

namespace fs = std::filesystem;
using namespace msdet;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Common {
  std::string config;
  std::string out = "msdet-out";
  std::string profile;
  long seed = -1;  // < 0: not given
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Config file (key = value lines; layer/tap records for analyze)");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--profile", c.profile, "Model profile")->check(CLI::IsMember({"desk", "paper-640"}));
  cmd->add_option("--seed", c.seed, "Random seed")->check(CLI::NonNegativeNumber);
}

ConfigDoc load_doc(const Common& c) {
  ConfigDoc doc = c.config.empty() ? ConfigDoc{} : load_config(c.config);
  static const char* prefixes[] = {"model.", "train.", "loss.", "eval.", "augment.", "data."};
  for (const auto& [k, v] : doc.keys) {
    bool ok = k == "profile" || k == "seed" || k == "input" || k == "channels" || k == "target";
    for (const char* p : prefixes) ok = ok || k.rfind(p, 0) == 0;
    if (!ok) throw ConfigError("unknown config key '" + k + "'");
  }
  return doc;
}

std::uint64_t resolve_seed(const Common& c, const ConfigDoc& doc) {
  if (c.seed >= 0) return static_cast<std::uint64_t>(c.seed);
  const long s = doc.get_int("seed", 0);
  if (s < 0) throw ConfigError("seed must be non-negative");
  return static_cast<std::uint64_t>(s);
}

ModelConfig resolve_model(const Common& c, const ConfigDoc& doc, std::uint64_t seed) {
  const std::string profile = !c.profile.empty() ? c.profile : doc.get_string("profile", "desk");
  ModelConfig m = ModelConfig::for_profile(profile);
  m.seed = seed;
  m.apply(doc);
  if (c.seed >= 0) m.seed = seed;
  return m;
}

// The output directory is the caller's choice, so it is elided from the
// recorded command line; the rest reproduces the run.
std::vector<std::string> recorded_args(int argc, char** argv) {
  std::vector<std::string> out;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      out.push_back(a);
      out.push_back("<out>");
      ++i;
    } else if (a.rfind("--out=", 0) == 0) {
      out.push_back("--out=<out>");
    } else {
      out.push_back(a);
    }
  }
  return out;
}

struct RunInfo {
  int argc = 0;
  char** argv = nullptr;
};
RunInfo g_run;

void write_run_manifest(const fs::path& out, const std::string& command, std::uint64_t seed,
                    const std::string& effective_config) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["args"] = recorded_args(g_run.argc, g_run.argv);
  j["seed"] = seed;
  char hash[24];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a64(effective_config)));
  j["config_hash"] = std::string("fnv1a64:") + hash;
  j["config"] = effective_config;
  j["versions"] = {{"msdet", kVersion}, {"checkpoint_format", 1}, {"compiler", __VERSION__}};
  write_file(out / "run_manifest.json", j.dump(2) + "\n");
}

void apply_scene(SceneSpec& s, const ConfigDoc& doc) {
  static const std::set<std::string> known = {
      "data.size",        "data.train",       "data.val",         "data.min_nodules",
      "data.max_nodules", "data.min_radius",  "data.max_radius",  "data.noise",
      "data.min_vessels", "data.max_vessels", "data.vessel_through_nodule", "data.train_manifest",
      "data.val_manifest"};
  for (const auto& [k, v] : doc.keys) {
    if (k.rfind("data.", 0) == 0 && !known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  auto size = [&](const char* key, std::size_t& field) {
    if (!doc.has(key)) return;
    const long v = doc.get_int(key, 0);
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    field = static_cast<std::size_t>(v);
  };
  size("data.size", s.size);
  size("data.min_nodules", s.min_nodules);
  size("data.max_nodules", s.max_nodules);
  size("data.min_vessels", s.min_vessels);
  size("data.max_vessels", s.max_vessels);
  s.min_radius = doc.get_double("data.min_radius", s.min_radius);
  s.max_radius = doc.get_double("data.max_radius", s.max_radius);
  s.noise_sigma = doc.get_double("data.noise", s.noise_sigma);
  s.vessel_through_nodule = doc.get_double("data.vessel_through_nodule", s.vessel_through_nodule);
  try {
    s.validate();
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
}

std::string scene_text(const SceneSpec& s, std::size_t train, std::size_t val) {
  std::ostringstream os;
  os << "data.size = " << s.size << "\ndata.train = " << train << "\ndata.val = " << val
     << "\ndata.min_nodules = " << s.min_nodules << "\ndata.max_nodules = " << s.max_nodules
     << "\ndata.min_radius = " << s.min_radius << "\ndata.max_radius = " << s.max_radius
     << "\ndata.noise = " << s.noise_sigma << "\ndata.min_vessels = " << s.min_vessels
     << "\ndata.max_vessels = " << s.max_vessels << "\ndata.vessel_through_nodule = " << s.vessel_through_nodule
     << "\nseed = " << s.seed << "\n";
  return os.str();
}

std::vector<fs::path> list_inputs(const fs::path& input, const std::vector<std::string>& exts) {
  std::vector<fs::path> out;
  auto ok = [&](const fs::path& p) { return std::find(exts.begin(), exts.end(), p.extension().string()) != exts.end(); };
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input)) {
      if (e.is_regular_file() && ok(e.path())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
  } else if (fs::is_regular_file(input)) {
    if (!ok(input)) throw ConfigError("unsupported input file " + input.string());
    out.push_back(input);
  } else {
    throw ConfigError("input not found: " + input.string());
  }
  if (out.empty()) throw ConfigError("no input images under " + input.string());
  return out;
}

Plane8 load_image(const fs::path& p) {
  return p.extension() == ".raw" ? preprocess(read_raw(p)) : read_pgm(p);
}

MSDetModel load_model(const std::string& checkpoint, const Common& c, const ConfigDoc& doc, std::uint64_t seed,
                      ModelConfig* resolved) {
  ConfigDoc merged = doc;
  // A training run leaves model.cfg beside its checkpoints.
  const fs::path sidecar = fs::path(checkpoint).parent_path() / "model.cfg";
  if (c.config.empty() && fs::exists(sidecar)) merged = load_config(sidecar);
  ModelConfig mc = resolve_model(c, merged, seed);
  MSDetModel model(mc);
  auto targets = model.named_tensors();
  restore_checkpoint(load_checkpoint(checkpoint), targets);
  if (resolved) *resolved = mc;
  return model;
}

std::string format_detections(const std::vector<Detection>& dets) {
  std::string out;
  char buf[128];
  for (const auto& d : dets) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f %.6f\n", d.cls, d.confidence, d.box.cx, d.box.cy, d.box.w,
                  d.box.h);
    out += buf;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  g_run = {argc, argv};
  CLI::App app{"MSDet tiny-nodule detector toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Common gen_c, pre_c, ana_c, grad_c, train_c, eval_c, infer_c;
  long gen_train = -1, gen_val = -1;
  std::string pre_input;
  bool grad_all = false, grad_list = false;
  std::vector<std::string> grad_ops;
  double grad_tol = 1e-4;
  std::string train_manifest, val_manifest;
  long epochs = -1;
  std::string eval_ckpt, eval_data, infer_ckpt, infer_input;
  double eval_threshold = -1, infer_threshold = -1, eval_nms = -1, infer_nms = -1;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic train/val scenes");
  add_common(gen, gen_c);
  gen->add_option("--train", gen_train, "Number of training scenes")->check(CLI::NonNegativeNumber);
  gen->add_option("--val", gen_val, "Number of validation scenes")->check(CLI::NonNegativeNumber);

  auto* pre = app.add_subcommand("preprocess", "HU clip, normalize and lung-mask raw planes into PGM");
  add_common(pre, pre_c);
  pre->add_option("--input", pre_input, "A .raw file or a directory of them")->required();

  auto* ana = app.add_subcommand("analyze", "Receptive-field and shape report for an architecture");
  add_common(ana, ana_c);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(grad, grad_c);
  grad->add_flag("--all", grad_all, "Run every registered check");
  grad->add_option("--op", grad_ops, "Run the named check (repeatable)");
  grad->add_flag("--list", grad_list, "List registered checks");
  grad->add_option("--tol", grad_tol, "Relative tolerance")->capture_default_str()->check(CLI::PositiveNumber);

  auto* tr = app.add_subcommand("train", "Train a detector");
  add_common(tr, train_c);
  tr->add_option("--train", train_manifest, "Training manifest");
  tr->add_option("--val", val_manifest, "Validation manifest");
  tr->add_option("--epochs", epochs, "Epoch count")->check(CLI::NonNegativeNumber);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", eval_data, "Dataset manifest")->required();
  ev->add_option("--threshold", eval_threshold, "Operating confidence for precision/recall")->check(CLI::Range(0.0, 1.0));
  ev->add_option("--iou-nms", eval_nms, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));

  auto* inf = app.add_subcommand("infer", "Write detections for images");
  add_common(inf, infer_c);
  inf->add_option("--checkpoint", infer_ckpt, "Checkpoint file")->required();
  inf->add_option("--input", infer_input, "A .pgm/.raw image or a directory of them")->required();
  inf->add_option("--threshold", infer_threshold, "Confidence threshold")->check(CLI::Range(0.0, 1.0));
  inf->add_option("--iou-nms", infer_nms, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const ConfigDoc doc = load_doc(gen_c);
      SceneSpec spec;
      apply_scene(spec, doc);
      spec.seed = resolve_seed(gen_c, doc);
      const auto n_train = static_cast<std::size_t>(gen_train >= 0 ? gen_train : doc.get_int("data.train", 240));
      const auto n_val = static_cast<std::size_t>(gen_val >= 0 ? gen_val : doc.get_int("data.val", 60));
      const fs::path out = gen_c.out;
      SceneSpec val_spec = spec;
      val_spec.seed = derive_seed(spec.seed, 0x56414c);
      write_manifest(out / "train" / "manifest.tsv", generate_dataset(out / "train", "scene", n_train, spec));
      write_manifest(out / "val" / "manifest.tsv", generate_dataset(out / "val", "scene", n_val, val_spec));
      write_run_manifest(out, "gen-data", spec.seed, scene_text(spec, n_train, n_val));
      std::cout << "wrote " << n_train << " train and " << n_val << " val scenes to " << out.string() << "\n";
      return 0;
    }

    if (*pre) {
      const ConfigDoc doc = load_doc(pre_c);
      const fs::path out = pre_c.out;
      const auto inputs = list_inputs(pre_input, {".raw"});
      for (const auto& p : inputs) write_pgm(out / p.filename().replace_extension(".pgm"), preprocess(read_raw(p)));
      write_run_manifest(out, "preprocess", resolve_seed(pre_c, doc), doc.source);
      std::cout << "preprocessed " << inputs.size() << " planes into " << out.string() << "\n";
      return 0;
    }

    if (*ana) {
      const ConfigDoc doc = load_doc(ana_c);
      ArchConfig arch;
      std::string effective;
      if (!doc.layers.empty()) {
        arch = arch_from_doc(doc);
      } else {
        const ModelConfig mc = resolve_model(ana_c, doc, resolve_seed(ana_c, doc));
        arch = arch_for_model(mc);
      }
      effective = arch_to_text(arch);
      const RFReport report = compose_rf(arch);
      const auto shapes = trace_shapes(arch);
      const std::string table = format_report_table(report), shape_table = format_shape_table(shapes);
      std::cout << table << "\n" << shape_table;
      const fs::path out = ana_c.out;
      write_file(out / "rf_report.csv", format_report_csv(report));
      write_file(out / "rf_report.txt", table);
      write_file(out / "shapes.txt", shape_table);
      write_file(out / "arch.txt", effective);
      write_run_manifest(out, "analyze", resolve_seed(ana_c, doc), effective);
      return 0;
    }

    if (*grad) {
      const ConfigDoc doc = load_doc(grad_c);
      const auto& registry = gradcheck_registry();
      if (grad_list) {
        for (const auto& c : registry) std::cout << c.name << "\n";
        return 0;
      }
      if (!grad_all && grad_ops.empty()) throw ConfigError("gradcheck needs --all, --op NAME or --list");
      std::vector<const GradcheckCase*> selected;
      for (const auto& c : registry) {
        if (grad_all || std::find(grad_ops.begin(), grad_ops.end(), c.name) != grad_ops.end()) selected.push_back(&c);
      }
      for (const auto& name : grad_ops) {
        const bool known = std::any_of(registry.begin(), registry.end(), [&](const auto& c) { return c.name == name; });
        if (!known) throw ConfigError("unknown gradcheck op '" + name + "' (see --list)");
      }
      GradcheckOptions opts;
      opts.tol = grad_tol;
      opts.seed = resolve_seed(grad_c, doc);
      bool all_ok = true;
      std::string report = "op,checked,max_rel_error,passed\n";
      for (const auto* c : selected) {
        const GradcheckReport r = c->run(opts);
        all_ok = all_ok && r.passed;
        std::printf("%-22s %s  max_rel=%.3e  checked=%zu\n", c->name.c_str(), r.passed ? "PASS" : "FAIL",
                    r.max_rel_error, r.checked);
        if (!r.passed) std::printf("  worst: %s\n", r.worst.c_str());
        char line[160];
        std::snprintf(line, sizeof line, "%s,%zu,%.6e,%d\n", c->name.c_str(), r.checked, r.max_rel_error, r.passed);
        report += line;
      }
      const fs::path out = grad_c.out;
      write_file(out / "gradcheck.csv", report);
      char cfg[64];
      std::snprintf(cfg, sizeof cfg, "tol = %.17g\n", grad_tol);
      write_run_manifest(out, "gradcheck", opts.seed, cfg);
      if (!all_ok) {
        std::cerr << "gradcheck: at least one op exceeded the tolerance\n";
        return 2;
      }
      return 0;
    }

    if (*tr) {
      const ConfigDoc doc = load_doc(train_c);
      const std::uint64_t seed = resolve_seed(train_c, doc);
      const ModelConfig mc = resolve_model(train_c, doc, seed);
      TrainConfig tc;
      tc.seed = seed;
      tc.apply(doc);
      if (train_c.seed >= 0) tc.seed = seed;
      if (epochs >= 0) tc.epochs = static_cast<std::size_t>(epochs);
      if (train_manifest.empty()) train_manifest = doc.get_string("data.train_manifest", "");
      if (val_manifest.empty()) val_manifest = doc.get_string("data.val_manifest", "");
      if (train_manifest.empty()) throw ConfigError("train needs --train MANIFEST (or data.train_manifest)");
      const Dataset train_set = load_dataset(train_manifest);
      Dataset val_set;
      if (!val_manifest.empty()) val_set = load_dataset(val_manifest);
      const fs::path out = train_c.out;
      fs::create_directories(out);
      write_file(out / "model.cfg", mc.to_text());
      MSDetModel model(mc);
      TrainHooks hooks;
      hooks.on_epoch = [](const EpochLog& e) {
        std::printf("epoch %3zu  box %.4f  obj %.4f  P %.3f  R %.3f  mAP50 %.3f\n", e.epoch, e.loss_box, e.loss_obj,
                    e.precision, e.recall, e.map50);
        std::fflush(stdout);
      };
      char tcfg[256];
      std::snprintf(tcfg, sizeof tcfg,
                    "train.lr = %.17g\ntrain.momentum = %.17g\ntrain.batch = %zu\ntrain.epochs = %zu\n"
                    "loss.lambda_box = %.17g\nloss.lambda_obj = %.17g\n",
                    tc.lr, tc.momentum, tc.batch_size, tc.epochs, tc.loss.lambda_box, tc.loss.lambda_obj);
      write_run_manifest(out, "train", seed, mc.to_text() + tcfg + "data.train_manifest = " + train_manifest +
                                             "\ndata.val_manifest = " + val_manifest + "\n");
      train(model, train_set, val_manifest.empty() ? nullptr : &val_set, tc, out, hooks);
      if (!val_manifest.empty()) {
        EvalOptions eo;
        eo.iou_thresholds = coco_thresholds();
        eo.operating_conf = tc.conf_threshold;
        PredictOptions po;
        po.nms_iou = tc.nms_iou;
        const Metrics m = evaluate_model(model, val_set, eo, po);
        write_file(out / "val_metrics.csv", format_metrics_csv(m, eo.iou_thresholds));
        std::cout << format_metrics_table(m, eo.iou_thresholds);
      }
      return 0;
    }

    if (*ev) {
      const ConfigDoc doc = load_doc(eval_c);
      const std::uint64_t seed = resolve_seed(eval_c, doc);
      TrainConfig tc;
      tc.apply(doc);
      ModelConfig mc;
      MSDetModel model = load_model(eval_ckpt, eval_c, doc, seed, &mc);
      const Dataset data = load_dataset(eval_data);
      EvalOptions eo;
      eo.iou_thresholds = coco_thresholds();
      eo.operating_conf = eval_threshold >= 0 ? eval_threshold : tc.conf_threshold;
      PredictOptions po;
      po.nms_iou = eval_nms >= 0 ? eval_nms : tc.nms_iou;
      const Metrics m = evaluate_model(model, data, eo, po);
      const fs::path out = eval_c.out;
      const std::string table = format_metrics_table(m, eo.iou_thresholds);
      std::cout << table;
      write_file(out / "metrics.csv", format_metrics_csv(m, eo.iou_thresholds));
      write_file(out / "metrics.txt", table);
      char extra[128];
      std::snprintf(extra, sizeof extra, "eval.conf = %.17g\neval.nms_iou = %.17g\n", eo.operating_conf, po.nms_iou);
      write_run_manifest(out, "eval", seed, mc.to_text() + extra + "checkpoint = " + eval_ckpt + "\ndata = " + eval_data + "\n");
      return 0;
    }

    if (*inf) {
      const ConfigDoc doc = load_doc(infer_c);
      const std::uint64_t seed = resolve_seed(infer_c, doc);
      TrainConfig tc;
      tc.apply(doc);
      ModelConfig mc;
      MSDetModel model = load_model(infer_ckpt, infer_c, doc, seed, &mc);
      const auto inputs = list_inputs(infer_input, {".pgm", ".raw"});
      std::vector<Plane8> images;
      for (const auto& p : inputs) {
        images.push_back(load_image(p));
        if (images.back().width != mc.input_size || images.back().height != mc.input_size) {
          throw ConfigError(p.string() + " is not " + std::to_string(mc.input_size) + "x" +
                            std::to_string(mc.input_size));
        }
      }
      PredictOptions po;
      po.conf_threshold = infer_threshold >= 0 ? infer_threshold : tc.conf_threshold;
      po.nms_iou = infer_nms >= 0 ? infer_nms : tc.nms_iou;
      const auto dets = predict(model, images, po);
      const fs::path out = infer_c.out;
      std::size_t total = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        write_file(out / inputs[i].filename().replace_extension(".det"), format_detections(dets[i]));
        total += dets[i].size();
      }
      char extra[128];
      std::snprintf(extra, sizeof extra, "threshold = %.17g\niou_nms = %.17g\n", po.conf_threshold, po.nms_iou);
      write_run_manifest(out, "infer", seed, mc.to_text() + extra + "checkpoint = " + infer_ckpt + "\n");
      std::cout << total << " detections over " << inputs.size() << " images\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
