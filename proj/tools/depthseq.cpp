// depthseq command-line front end.
#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "depthseq/errors.hpp"
#include "depthseq/gradcheck.hpp"
#include "depthseq/hemisplit.hpp"
#include "depthseq/pipeline.hpp"

namespace fs = std::filesystem;
using namespace depthseq;

namespace {

fs::path data_root() {
  const char* env = std::getenv("DEPTHSEQ_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path("data");
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ValidationError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("invalid JSON in " + p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + p.string());
  out << text;
}

// `stem`.json and `stem`.csv under `dir`, or the JSON on stdout when no directory is given.
void emit(const std::string& dir, const std::string& stem, const nlohmann::json& j, const std::string& csv) {
  if (dir.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  write_text(fs::path(dir) / (stem + ".json"), j.dump(2) + "\n");
  write_text(fs::path(dir) / (stem + ".csv"), csv);
}

Dims parse_dims(const std::string& s) {
  Dims d{};
  std::stringstream ss(s);
  std::string part;
  std::size_t n = 0;
  while (std::getline(ss, part, ',')) {
    if (n == 3) throw ValidationError("dims must be H,W,D");
    try {
      d[n++] = static_cast<std::size_t>(std::stoul(part));
    } catch (const std::exception&) {
      throw ValidationError("bad dims " + s);
    }
  }
  if (n != 3) throw ValidationError("dims must be H,W,D");
  return d;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(static_cast<std::size_t>(std::stoul(part)));
    } catch (const std::exception&) {
      throw ValidationError("bad integer list " + s);
    }
  }
  return out;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

struct Common {
  std::string config;
  std::string manifest;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

TrainConfig load_train_config(const Common& o) {
  TrainConfig c = o.config.empty() ? TrainConfig{} : train_config_from_json(read_json(o.config));
  if (o.seed_set) c.seed = o.seed;
  if (!o.manifest.empty()) {
    c.manifest = o.manifest;
  } else if (c.manifest.empty()) {
    c.manifest = data_root() / "manifest.json";
  }
  return c;
}

Task manifest_task(const Manifest& m) {
  if (m.task == "localization") return Task::Localization;
  if (m.task == "classification") return Task::Classification;
  throw ValidationError("unknown manifest task " + m.task);
}

std::vector<std::string> ids_of(const Dataset& ds) {
  std::vector<std::string> ids;
  for (const auto& c : ds) ids.push_back(c.case_id);
  return ids;
}

std::string curves_csv(const TrainReport& r) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,val_metric\n";
  for (std::size_t e = 0; e < r.epochs_run; ++e) {
    os << e + 1 << ',' << fmt(r.train_loss[e]) << ',' << fmt(r.val_loss[e]) << ',' << fmt(r.val_metric[e]) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

struct PhantomOpts {
  std::size_t count = 64;
  std::string dims = "32,32,24";
  std::uint64_t seed = 7;
  std::string out;
  std::string task = "localization";
  std::size_t depth_jitter = 0;
  std::vector<double> vessel_radius;
  double vessel_radius_step = 0.0;
};

int cmd_phantom(const PhantomOpts& o) {
  PhantomSpec spec;
  spec.dims = parse_dims(o.dims);
  spec.seed = o.seed;
  spec.depth_jitter = o.depth_jitter;
  if (!o.vessel_radius.empty()) {
    if (o.vessel_radius.size() != 2) throw ValidationError("--vessel-radius takes MIN,MAX");
    spec.vessel_radius_min = o.vessel_radius[0];
    spec.vessel_radius_max = o.vessel_radius[1];
  }
  if (o.vessel_radius_step > 0.0) spec.vessel_radius_step = o.vessel_radius_step;
  spec.check();
  CohortTask task;
  if (o.task == "localization") {
    task = CohortTask::Localization;
  } else if (o.task == "classification") {
    task = CohortTask::Classification;
  } else {
    throw ValidationError("task must be localization or classification");
  }
  const fs::path dir = o.out.empty() ? data_root() : fs::path(o.out);
  const fs::path manifest = write_cohort(generate_cohort(spec, o.count, task), dir, task);
  write_text(dir / "phantom_spec.json", to_json(spec).dump(2) + "\n");
  std::cout << nlohmann::json{{"manifest", manifest.generic_string()}, {"count", o.count}}.dump() << "\n";
  return 0;
}

struct SplitOpts {
  std::string volume;
  std::string left;
  std::string right;
  double hu_min = kDefaultSkullHu;
  int connectivity = 26;
  std::string out;
};

int cmd_split(const SplitOpts& o) {
  const Volume v = load_volume(o.volume);
  HemisplitOptions opts;
  opts.hu_min = o.hu_min;
  if (o.connectivity == 6) {
    opts.connectivity = Connectivity::Six;
  } else if (o.connectivity != 26) {
    throw ValidationError("connectivity must be 6 or 26");
  }
  SplitPlane plane;
  const HemisphereResult r = separate_hemispheres(v, opts, &plane);
  if (!o.left.empty()) save_mask(r.left, v.geometry, o.left);
  if (!o.right.empty()) save_mask(r.right, v.geometry, o.right);
  std::size_t nl = 0, nr = 0;
  for (auto b : r.left.bits) nl += b;
  for (auto b : r.right.bits) nr += b;
  nlohmann::json j{{"plane", {{"point", plane.point}, {"normal", plane.normal}}},
                   {"left_voxels", nl},
                   {"right_voxels", nr}};
  std::ostringstream csv;
  csv << "side,voxels\nleft," << nl << "\nright," << nr << "\n";
  emit(o.out, "hemispheres", j, csv.str());
  return 0;
}

struct TrainOpts {
  Common common;
  std::size_t fold = 0;
  bool fold_set = false;
  bool all_folds = false;
  std::size_t threads = 1;
};

int cmd_train(const TrainOpts& o) {
  TrainConfig cfg = load_train_config(o.common);
  if (o.fold_set) cfg.fold = o.fold;
  cfg.check();
  const Manifest m = load_manifest(cfg.manifest);
  cfg.task = manifest_task(m);
  const Dataset ds = load_dataset(m);
  const FoldPlan plan = make_folds(ids_of(ds), cfg.k_folds, cfg.fold_seed);
  const fs::path out = o.common.out.empty() ? fs::path("run") : fs::path(o.common.out);
  fs::create_directories(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  write_text(out / "folds.json", to_json(plan).dump(2) + "\n");

  if (o.all_folds) {
    CrossValidationResult r = cross_validate(cfg, ds, plan, o.threads);
    std::ostringstream csv;
    csv << "fold,best_epoch,epochs_run,mae,top1,top2,acc_tau1,kappa,accuracy\n";
    for (std::size_t f = 0; f < r.folds.size(); ++f) {
      auto& fo = r.folds[f];
      const std::string name = "fold" + std::to_string(f) + ".ckpt";
      save_checkpoint(fo.train.best, out / name);
      fo.train.report.checkpoint_path = name;
      write_text(out / ("fold" + std::to_string(f) + "_curves.csv"), curves_csv(fo.train.report));
      write_text(out / ("fold" + std::to_string(f) + "_eval.csv"), eval_csv(fo.eval));
      const auto& a = fo.eval.metrics.aggregate;
      csv << f << ',' << fo.train.report.best_epoch << ',' << fo.train.report.epochs_run << ',' << fmt(a.mae) << ','
          << fmt(a.top1) << ',' << fmt(a.top2) << ',' << fmt(a.acc_tau1) << ',' << fmt(a.kappa) << ','
          << fmt(fo.eval.accuracy) << '\n';
    }
    emit(out.string(), "cv_report", to_json(r), csv.str());
    return 0;
  }

  TrainResult r = train(cfg, ds, plan.folds[cfg.fold]);
  save_checkpoint(r.best, out / "best.ckpt");
  r.report.checkpoint_path = "best.ckpt";
  emit(out.string(), "train_report", to_json(r.report), curves_csv(r.report));
  return 0;
}

struct EvalOpts {
  Common common;
  std::string checkpoint;
  std::size_t fold = 0;
  bool fold_set = false;
};

int cmd_eval(const EvalOpts& o) {
  TrainConfig cfg = load_train_config(o.common);
  if (o.fold_set) cfg.fold = o.fold;
  cfg.check();
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Manifest m = load_manifest(cfg.manifest);
  const Dataset ds = load_dataset(m);
  const FoldPlan plan = make_folds(ids_of(ds), cfg.k_folds, cfg.fold_seed);
  const EvalResult r = evaluate(ck.model, manifest_task(m), ds, plan.folds[cfg.fold].test);
  std::string csv = eval_csv(r);
  if (r.task == Task::Classification) {
    std::ostringstream os;
    os << "case_id,predicted_label\n";
    for (std::size_t i = 0; i < r.case_ids.size(); ++i) os << r.case_ids[i] << ',' << r.predicted_labels[i] << '\n';
    csv = os.str();
  }
  nlohmann::json j = to_json(r);
  j["fold"] = cfg.fold;
  emit(o.common.out, "eval_report", j, csv);
  return 0;
}

struct InferOpts {
  std::string checkpoint;
  std::string volume;
  std::string out;
};

int cmd_infer(const InferOpts& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const InferenceResult r = infer(ck.model, load_volume(o.volume));
  std::ostringstream csv;
  csv << "landmark,slice,probability\n";
  for (std::size_t j = 0; j < r.probs.n; ++j) {
    for (std::size_t z = 0; z < r.probs.depth; ++z) csv << j << ',' << z << ',' << fmt(r.probs.at(j, z)) << '\n';
  }
  emit(o.out, "inference", to_json(r), csv.str());
  return 0;
}

struct AssignOpts {
  std::string volume;
  std::string calc;
  std::string landmarks;
  std::string landmarks_json;
  std::string labels_out;
  bool z_down = false;
  std::string out;
};

int cmd_assign(const AssignOpts& o) {
  const Volume v = load_volume(o.volume);
  Geometry mg;
  const BinaryMask calc = load_mask(o.calc, &mg);
  if (mg.dims != v.dims()) throw ValidationError("calcification mask dims differ from the volume");
  LandmarkSet lm;
  if (!o.landmarks.empty()) {
    lm = parse_list(o.landmarks);
  } else if (!o.landmarks_json.empty()) {
    lm = read_json(o.landmarks_json).at("landmarks").get<LandmarkSet>();
  } else {
    throw ValidationError("give --landmarks or --landmarks-json");
  }
  const HemisphereResult h = separate_hemispheres(v);
  const LabelMask labels = assign_segments(calc, lm, h, SegmentRule{!o.z_down});
  if (!o.labels_out.empty()) save_label_mask(labels, v.geometry, o.labels_out);
  const auto vols = per_segment_volume(labels, v.geometry.spacing);
  static const char* names[8] = {"left_cervical",  "left_petrous",  "left_cavernous",  "left_supraclinoid",
                                 "right_cervical", "right_petrous", "right_cavernous", "right_supraclinoid"};
  nlohmann::json seg;
  std::ostringstream csv;
  csv << "label,segment,volume_mm3\n";
  double total = 0.0;
  for (std::size_t l = 0; l < 8; ++l) {
    seg[names[l]] = vols[l];
    total += vols[l];
    csv << l + 1 << ',' << names[l] << ',' << fmt(vols[l]) << '\n';
  }
  emit(o.out, "segments", {{"landmarks", lm}, {"volumes_mm3", seg}, {"total_mm3", total}}, csv.str());
  return 0;
}

struct AblateOpts {
  Common common;
  std::string axis;
  std::string seeds = "0,1,2,3,4";
};

int cmd_ablate(const AblateOpts& o) {
  TrainConfig cfg = load_train_config(o.common);
  const Manifest m = load_manifest(cfg.manifest);
  cfg.task = manifest_task(m);
  const Dataset ds = load_dataset(m);
  const AblationAxis axis = parse_ablation_axis(o.axis);
  std::vector<std::uint64_t> seeds;
  for (auto s : parse_list(o.seeds)) seeds.push_back(s);
  const auto rows = run_ablation(cfg, axis, ds, seeds);
  std::ostringstream csv;
  csv << "seed,arm,fold,mae,acc_tau1,accuracy,best_epoch,epochs_run\n";
  for (const auto& r : rows) {
    csv << r.seed << ',' << r.arm << ',' << r.fold << ',' << fmt(r.mae) << ',' << fmt(r.acc_tau1) << ','
        << fmt(r.accuracy) << ',' << r.report.best_epoch << ',' << r.report.epochs_run << '\n';
  }
  emit(o.common.out, "ablation_" + to_string(axis), {{"axis", to_string(axis)}, {"rows", to_json(rows)}},
       csv.str());
  return 0;
}

struct FlopsOpts {
  std::string config;
  std::string dims = "32,32,24";
  std::string out;
};

int cmd_flops(const FlopsOpts& o) {
  const ModelConfig c = o.config.empty() ? ModelConfig{} : train_config_from_json(read_json(o.config)).model;
  const FlopBreakdown f = estimate_flops(c, parse_dims(o.dims));
  std::ostringstream csv;
  csv << "part,flops\nencoder," << fmt(f.encoder_flops) << "\nattention," << fmt(f.attention_flops)
      << "\nsequence," << fmt(f.sequence_flops) << "\nhead," << fmt(f.head_flops) << "\ntotal," << fmt(f.total)
      << '\n';
  emit(o.out, "flops", to_json(f), csv.str());
  return 0;
}

struct GradOpts {
  std::uint64_t seed = 0;
  std::size_t shapes = 10;
  double eps = 1e-3;
  double tolerance = 1e-3;
  std::string out;
};

int cmd_gradcheck(const GradOpts& o) {
  const auto entries = run_gradcheck_suite(o.seed, o.shapes, o.eps);
  std::ostringstream csv;
  csv << "op,shapes,max_rel_error\n";
  bool ok = true;
  for (const auto& e : entries) {
    csv << e.op << ',' << e.shapes << ',' << fmt(e.max_rel_error) << '\n';
    ok = ok && e.max_rel_error < o.tolerance;
  }
  emit(o.out, "gradcheck", {{"entries", to_json(entries)}, {"tolerance", o.tolerance}, {"pass", ok}}, csv.str());
  return ok ? 0 : 1;
}

void add_common(CLI::App* sub, Common& c, bool manifest) {
  sub->add_option("--config", c.config, "train config JSON");
  if (manifest) sub->add_option("--manifest", c.manifest, "manifest JSON (default $DEPTHSEQ_DATA_DIR/manifest.json)");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& s) { c.seed = s, c.seed_set = true; }, "overrides the config seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-sequence landmark localization toolkit"};
  app.require_subcommand(1);

  PhantomOpts po;
  auto* phantom = app.add_subcommand("phantom", "generate a synthetic cohort");
  phantom->add_option("--count", po.count);
  phantom->add_option("--dims", po.dims, "H,W,D");
  phantom->add_option("--seed", po.seed);
  phantom->add_option("--out", po.out, "output directory (default $DEPTHSEQ_DATA_DIR)");
  phantom->add_option("--task", po.task, "localization or classification");
  phantom->add_option("--depth-jitter", po.depth_jitter);
  phantom->add_option("--vessel-radius", po.vessel_radius, "MIN,MAX base radius in voxels")->delimiter(',');
  phantom->add_option("--vessel-radius-step", po.vessel_radius_step);

  SplitOpts so;
  auto* split = app.add_subcommand("split-hemispheres", "separate a head volume into left and right masks");
  split->add_option("--volume", so.volume)->required();
  split->add_option("--left", so.left, "left mask output");
  split->add_option("--right", so.right, "right mask output");
  split->add_option("--hu-min", so.hu_min);
  split->add_option("--connectivity", so.connectivity, "6 or 26");
  split->add_option("--out", so.out, "report directory");

  TrainOpts to;
  auto* trn = app.add_subcommand("train", "train on one fold, or all folds with --all-folds");
  add_common(trn, to.common, true);
  trn->add_option_function<std::size_t>("--fold", [&to](const std::size_t& f) { to.fold = f, to.fold_set = true; });
  trn->add_flag("--all-folds", to.all_folds);
  trn->add_option("--threads", to.threads, "folds trained concurrently with --all-folds");

  EvalOpts eo;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a fold's test split");
  add_common(ev, eo.common, true);
  ev->add_option("--checkpoint", eo.checkpoint)->required();
  ev->add_option_function<std::size_t>("--fold", [&eo](const std::size_t& f) { eo.fold = f, eo.fold_set = true; });

  InferOpts io;
  auto* inf = app.add_subcommand("infer", "predict landmark slices for one volume");
  inf->add_option("--checkpoint", io.checkpoint)->required();
  inf->add_option("--volume", io.volume)->required();
  inf->add_option("--out", io.out, "report directory");

  AssignOpts ao;
  auto* asg = app.add_subcommand("assign-segments", "label calcified voxels by segment");
  asg->add_option("--volume", ao.volume)->required();
  asg->add_option("--calc", ao.calc, "calcification mask")->required();
  asg->add_option("--landmarks", ao.landmarks, "six comma-separated slice indices");
  asg->add_option("--landmarks-json", ao.landmarks_json, "inference report with a landmarks array");
  asg->add_option("--labels", ao.labels_out, "label mask output");
  asg->add_flag("--z-decreases-superior", ao.z_down);
  asg->add_option("--out", ao.out, "report directory");

  AblateOpts bo;
  auto* abl = app.add_subcommand("ablate", "paired-seed ablation along one axis");
  add_common(abl, bo.common, true);
  abl->add_option("--axis", bo.axis, "wo_attention, right_padding or layers")->required();
  abl->add_option("--seeds", bo.seeds, "comma-separated seeds");

  FlopsOpts fo;
  auto* flp = app.add_subcommand("flops", "estimate FLOPs of one forward pass");
  flp->add_option("--config", fo.config);
  flp->add_option("--dims", fo.dims, "H,W,D");
  flp->add_option("--out", fo.out);

  GradOpts go;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--seed", go.seed);
  gc->add_option("--shapes", go.shapes);
  gc->add_option("--eps", go.eps);
  gc->add_option("--tolerance", go.tolerance);
  gc->add_option("--out", go.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*phantom) return cmd_phantom(po);
    if (*split) return cmd_split(so);
    if (*trn) return cmd_train(to);
    if (*ev) return cmd_eval(eo);
    if (*inf) return cmd_infer(io);
    if (*asg) return cmd_assign(ao);
    if (*abl) return cmd_ablate(bo);
    if (*flp) return cmd_flops(fo);
    if (*gc) return cmd_gradcheck(go);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
