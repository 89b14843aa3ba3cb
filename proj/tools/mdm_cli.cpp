// Command-line front end: synth | s2i | i2s | train | eval | render | selftest.
//
// Exit codes: 0 success, 1 usage error, 2 data error (bad input files,
// failed checks).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mdm/codec.hpp"
#include "mdm/eval.hpp"
#include "mdm/i2s.hpp"
#include "mdm/mdm_loop.hpp"
#include "mdm/s2i.hpp"
#include "mdm/scene.hpp"
#include "mdm/selftest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mdm;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- manifest

json config_echo(const CLI::App& sub) {
  json cfg = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    const auto& res = opt->results();
    if (opt->get_expected_max() > 1) {
      cfg[name] = res;
    } else if (!res.empty()) {
      cfg[name] = res.back();
    } else {
      cfg[name] = opt->get_default_str();
    }
  }
  return cfg;
}

class Manifest {
 public:
  Manifest(std::string subcommand, json config)
      : subcommand_(std::move(subcommand)), config_(std::move(config)) {}

  void add_input(const fs::path& p) { inputs_[p.generic_string()] = fnv_hex(read_file(p)); }
  void add_output(const std::string& name, std::span<const std::uint8_t> bytes) {
    outputs_[name] = fnv_hex(bytes);
  }

  json to_json(const json& extra = json::object()) const {
    json j = {{"tool", "mdm"},
              {"version", kVersion},
              {"subcommand", subcommand_},
              {"config", config_},
              {"inputs", inputs_},
              {"outputs", outputs_},
              {"wall_seconds", seconds()}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    return j;
  }

  void write(const fs::path& dir, const std::string& file = "manifest.json",
             const json& extra = json::object()) const {
    write_text_file(dir / file, to_json(extra).dump(2) + "\n");
  }

  static std::string fnv_hex(std::span<const std::uint8_t> bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
  }

 private:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  std::string subcommand_;
  json config_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

/// Writes bytes under dir and records their digest.
void emit(Manifest& m, const fs::path& dir, const std::string& name, const Bytes& bytes) {
  write_file(dir / name, bytes);
  m.add_output(name, bytes);
}
void emit(Manifest& m, const fs::path& dir, const std::string& name, const std::string& text) {
  emit(m, dir, name, Bytes(text.begin(), text.end()));
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error("cannot create directory " + p.string() + ": " + ec.message());
}

// ---------------------------------------------------------------- --config

/// Appends "--key value" for every config entry whose flag is absent from
/// argv, so flags on the command line take precedence.
std::vector<std::string> merge_config(std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t k = 0; k < args.size(); ++k) {
    if (args[k] == "--config" && k + 1 < args.size()) path = args[k + 1];
    if (args[k].rfind("--config=", 0) == 0) path = args[k].substr(9);
  }
  if (!path) return args;
  json cfg;
  try {
    cfg = json::parse(read_text_file(*path));
  } catch (const json::exception& e) {
    throw Error("config " + *path + ": " + e.what());
  }
  if (!cfg.is_object()) throw Error("config " + *path + ": top level must be an object");
  // A section named after the subcommand overrides the shared keys.
  json flat = json::object();
  const std::string sub = args.size() > 1 ? args[1] : "";
  for (auto it = cfg.begin(); it != cfg.end(); ++it)
    if (!it.value().is_object()) flat[it.key()] = it.value();
  if (cfg.contains(sub) && cfg[sub].is_object())
    for (auto it = cfg[sub].begin(); it != cfg[sub].end(); ++it) flat[it.key()] = it.value();

  auto on_cli = [&args](const std::string& flag) {
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  auto scalar = [](const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return std::string(v.get<bool>() ? "true" : "false");
    return v.dump();
  };
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    std::string key = it.key();
    std::replace(key.begin(), key.end(), '_', '-');
    const std::string flag = "--" + key;
    if (on_cli(flag)) continue;
    if (it.value().is_array()) {
      for (const auto& v : it.value()) {
        args.push_back(flag);
        args.push_back(scalar(v));
      }
    } else {
      args.push_back(flag);
      args.push_back(scalar(it.value()));
    }
  }
  return args;
}

// ---------------------------------------------------------------- scenes on disk

struct SceneFiles {
  Scene scene;
  LabelGrid semantic_in;
};

SceneFiles load_scene_dir(const fs::path& dir, Manifest* m) {
  auto in = [&](const char* name) {
    const fs::path p = dir / name;
    if (m) m->add_input(p);
    return p;
  };
  SceneFiles f;
  Scene& s = f.scene;
  s.gt_instances = decode_label_pgm(read_file(in("gt_instances.pgm")));
  s.gt_semantic = decode_label_pgm(read_file(in("gt_semantic.pgm")));
  f.semantic_in = decode_label_pgm(read_file(in("semantic_in.pgm")));
  s.points = decode_points_csv(read_text_file(in("points.csv")));
  s.features = channel_map_from_tensor<FeatureMap>(decode_tensor(read_file(in("features.mdmt"))));
  require_same_shape(s.gt_semantic.shape(), s.gt_instances.shape(), "gt_semantic vs gt_instances");
  require_same_shape(f.semantic_in.shape(), s.gt_instances.shape(), "semantic_in vs gt_instances");
  require_same_shape(s.features.shape(), s.gt_instances.shape(), "features vs gt_instances");
  s.points.validate(s.shape());

  const json meta = json::parse(read_text_file(in("scene.json")));
  s.seed = meta.value("seed", std::uint64_t{0});
  s.n_classes = meta.value("n_classes", 0u);
  std::uint32_t top = 0;
  for (const auto& p : s.points.points) top = std::max(top, p.class_id);
  top = std::max({top, max_label(s.gt_semantic), max_label(f.semantic_in)});
  s.n_classes = std::max(s.n_classes, top);

  s.instance_classes.assign(max_label(s.gt_instances) + 1, 0);
  for (std::size_t i = 0; i < s.gt_instances.size(); ++i)
    if (s.gt_instances[i]) s.instance_classes[s.gt_instances[i]] = s.gt_semantic[i];
  return f;
}

/// Runs fn(0..n-1) on up to `jobs` threads; exceptions are rethrown in index order.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next++) < n;) {
      try {
        fn(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const auto t = static_cast<std::size_t>(std::max(1, jobs));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < std::min(t, n); ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

json loss_json(const LossReport& r) {
  return {{"seg", r.seg},
          {"off", r.off},
          {"aff", r.aff},
          {"total", r.total},
          {"n_seg_pixels", r.n_seg_pixels},
          {"n_off_pixels", r.n_off_pixels},
          {"n_pos_pairs", r.n_pos_pairs},
          {"n_neg_pairs", r.n_neg_pairs}};
}

json metrics_json(const MatchReport& m, const ApReport& ap) {
  json per_gt = json::array();
  for (const auto& g : m.per_gt)
    per_gt.push_back({{"gt_id", g.gt_id},
                      {"iou", g.iou},
                      {"matched_pred", g.matched_pred ? json(*g.matched_pred) : json(nullptr)}});
  json per_class = json::object();
  for (const auto& [c, v] : ap.per_class)
    per_class[std::to_string(c)] = {{"ap50", v[0]}, {"ap70", v[1]}, {"ap75", v[2]}};
  return {{"counts", {{"iou50", m.counts.iou50}, {"iou70", m.counts.iou70}, {"iou90", m.counts.iou90}}},
          {"overall_iou", m.overall_iou},
          {"map50", ap.map50},
          {"map70", ap.map70},
          {"map75", ap.map75},
          {"n_gt", m.per_gt.size()},
          {"unmatched_preds", m.unmatched_preds},
          {"per_gt", per_gt},
          {"per_class_ap", per_class},
          {"flagged_classes", ap.flagged}};
}

// ---------------------------------------------------------------- options

struct SynthOpts {
  std::string out;
  std::uint64_t seed = 1;
  int count = 1;
  std::size_t height = 64, width = 64;
  int instances = 0;  // 0: 2-6 drawn per seed
  int classes = 3;
  std::string shape = "mixed";
  std::string point_mode = "centroid";
  int dilation = 2, erosion = 0;
  bool merge = true;
  double flip = 0.02;
};

struct TrainOpts {
  std::vector<std::string> scenes;
  std::string out;
  int jobs = 1;
  MdmConfig cfg;
  std::string weight_mode = "uniform";
  int connectivity = 8;
  bool verbose = false;
};

void add_mdm_options(CLI::App* app, TrainOpts& o) {
  MdmConfig& c = o.cfg;
  app->add_option("--stages", c.n_stages, "MDM stages")->capture_default_str();
  app->add_option("--warmup", c.warmup_iters, "warm-up iterations (no affinity loss)")->capture_default_str();
  app->add_option("--iters", c.iters_per_stage, "training iterations per stage")->capture_default_str();
  app->add_option("--lr", c.learning_rate, "gradient-descent step size")->capture_default_str();
  app->add_option("--embed-dim", c.embed_dim, "embedding channels")->capture_default_str();
  app->add_option("--offset-scale", c.offset_scale, "offset head gain in pixels")->capture_default_str();
  app->add_option("--seed", c.seed, "run seed")->capture_default_str();
  app->add_option("--connectivity", o.connectivity, "region connectivity (4 or 8)")
      ->check(CLI::IsMember({4, 8}))
      ->capture_default_str();
  app->add_option("--lambda-seg", c.loss_weights.lambda_seg)->capture_default_str();
  app->add_option("--lambda-off", c.loss_weights.lambda_off)->capture_default_str();
  app->add_option("--lambda-aff", c.loss_weights.lambda_aff)->capture_default_str();
  app->add_option("--hard-pixel-ratio", c.loss_weights.hard_pixel_ratio)->capture_default_str();
  app->add_option("--offset-weight-mode", o.weight_mode, "uniform | inverse_instance_size")
      ->check(CLI::IsMember({"uniform", "inverse_instance_size"}))
      ->capture_default_str();
  app->add_option("--tau", c.grouping.vote_radius_tau, "vote radius (<= 0: max(H,W)/4)")->capture_default_str();
  app->add_option("--box-side", c.grouping.pseudo_box_side, "pseudo-box side")->capture_default_str();
  app->add_option("--beta", c.i2s.beta, "Hadamard exponent")->capture_default_str();
  app->add_option("--pair-radius", c.i2s.pair_radius)->capture_default_str();
  app->add_option("--max-pairs", c.i2s.max_pairs)->capture_default_str();
  app->add_option("--balance", c.i2s.balance)->capture_default_str();
}

// ---------------------------------------------------------------- subcommands

int run_synth(const SynthOpts& o, const CLI::App& sub) {
  Manifest top("synth", config_echo(sub));
  const fs::path out(o.out);
  make_dir(out);
  SceneOptions so;
  so.point_mode = point_mode_from_string(o.point_mode);
  const ShapeKind kind = shape_kind_from_string(o.shape);
  json scenes = json::array();
  for (int k = 0; k < o.count; ++k) {
    const std::uint64_t seed = o.seed + static_cast<std::uint64_t>(k);
    const int n = o.instances > 0 ? o.instances : benchmark_instance_count(seed);
    const Scene s = generate_scene(seed, o.height, o.width, n, o.classes, kind, so);
    CorruptionConfig cc;
    cc.dilation_px = o.dilation;
    cc.erosion_px = o.erosion;
    cc.merge_adjacent = o.merge;
    cc.flip_rate = o.flip;
    cc.rng_seed = seed;
    const LabelGrid corrupted = corrupt_semantic(s, cc);

    char name[32];
    std::snprintf(name, sizeof name, "scene_%04d", k);
    const fs::path dir = out / name;
    make_dir(dir);
    Manifest m("synth", config_echo(sub));
    emit(m, dir, "gt_instances.pgm", encode_label_pgm(s.gt_instances));
    emit(m, dir, "gt_semantic.pgm", encode_label_pgm(s.gt_semantic));
    emit(m, dir, "semantic_in.pgm", encode_label_pgm(corrupted));
    emit(m, dir, "points.csv", encode_points_csv(s.points));
    emit(m, dir, "gt_classes.csv", encode_classes_csv(gt_class_table(s)));
    emit(m, dir, "features.mdmt", encode_tensor(s.features));
    m.write(dir, "scene.json",
            {{"seed", seed}, {"n_instances", n}, {"n_classes", o.classes}, {"height", o.height},
             {"width", o.width}});
    scenes.push_back(name);
  }
  top.write(out, "manifest.json", {{"scenes", scenes}});
  std::cout << "wrote " << o.count << " scene(s) to " << out.string() << "\n";
  return 0;
}

int run_s2i(const std::string& semantic_path, const std::string& points_path,
            const std::string& offsets_path, const std::string& out_dir, int connectivity,
            const GroupingConfig& grouping, const CLI::App& sub) {
  Manifest m("s2i", config_echo(sub));
  m.add_input(semantic_path);
  m.add_input(points_path);
  const LabelGrid semantic = decode_label_pgm(read_file(semantic_path));
  const PointAnnotationSet points = decode_points_csv(read_text_file(points_path));
  points.validate(semantic.shape());

  std::vector<PointNote> notes;
  const auto regions = extract_regions(semantic, connectivity_from_int(connectivity));
  LabelGrid instances = assign_points(regions, points, semantic.shape(), &notes);
  const OffsetField offsets = compute_offset_field(instances, points);
  ClassTable classes;
  if (!offsets_path.empty()) {
    // Group externally predicted offsets instead of emitting the region split.
    m.add_input(offsets_path);
    const auto pred = offset_field_from_tensor(decode_tensor(read_file(offsets_path)));
    const auto grouped = group_instances(pred, semantic, points, grouping);
    auto pseudo = finalize_pseudo_labels(grouped, semantic, points);
    instances = std::move(pseudo.instances);
    classes = std::move(pseudo.classes);
  } else {
    for (std::size_t i = 0; i < instances.size(); ++i)
      if (instances[i]) classes[instances[i]] = semantic[i];
  }

  const fs::path out(out_dir);
  make_dir(out);
  emit(m, out, "instances.pgm", encode_label_pgm(instances));
  emit(m, out, "offsets.mdmt", encode_tensor(offsets));
  emit(m, out, "classes.csv", encode_classes_csv(classes));
  json jn = json::array();
  for (const auto& n : notes)
    jn.push_back({{"instance_id", n.instance_id},
                  {"reason", n.reason == PointNote::Reason::OnBackground ? "on_background" : "class_mismatch"}});
  m.write(out, "manifest.json", {{"point_notes", jn}});
  for (const auto& n : notes)
    std::cerr << "note: point " << n.instance_id
              << (n.reason == PointNote::Reason::OnBackground ? " lies on background\n"
                                                              : " disagrees with its region's class\n");
  return 0;
}

int run_i2s(const std::string& instances_path, const std::string& classmap_path, const std::string& out_dir,
            const I2SConfig& cfg, bool dense, const CLI::App& sub) {
  Manifest m("i2s", config_echo(sub));
  m.add_input(instances_path);
  m.add_input(classmap_path);
  const LabelGrid instances = decode_label_pgm(read_file(instances_path));
  const auto classmap = channel_map_from_tensor<ClassScoreMap>(decode_tensor(read_file(classmap_path)));
  require_same_shape(instances.shape(), classmap.shape(), "instances vs class map");
  cfg.validate();
  const ClassScoreMap refreshed = dense ? refresh_semantic(dense_affinity_from_instances(instances), classmap, cfg)
                                        : refresh_semantic_windowed(instance_affinity(instances), classmap, cfg);
  const fs::path out(out_dir);
  make_dir(out);
  emit(m, out, "classmap.mdmt", encode_tensor(refreshed));
  emit(m, out, "semantic_out.pgm", encode_label_pgm(argmax_classes(refreshed)));
  m.write(out);
  return 0;
}

int run_train(TrainOpts& o, const CLI::App& sub) {
  o.cfg.connectivity = connectivity_from_int(o.connectivity);
  o.cfg.loss_weights.offset_pixel_weight_mode = offset_weight_mode_from_string(o.weight_mode);
  o.cfg.validate();
  const fs::path out(o.out);
  make_dir(out);
  const json echo = config_echo(sub);

  std::vector<std::string> names(o.scenes.size());
  for (std::size_t k = 0; k < o.scenes.size(); ++k) {
    names[k] = fs::path(o.scenes[k]).lexically_normal().filename().string();
    if (names[k].empty()) names[k] = fs::path(o.scenes[k]).lexically_normal().parent_path().filename().string();
    if (names[k].empty() || std::count(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(k), names[k]))
      names[k] = "scene_" + std::to_string(k) + "_" + names[k];
  }

  std::vector<std::string> summaries(o.scenes.size());
  parallel_for(o.scenes.size(), o.jobs, [&](std::size_t k) {
    Manifest m("train", echo);
    const auto files = load_scene_dir(o.scenes[k], &m);
    const MdmRun run = run_mdm(files.scene, files.semantic_in, o.cfg);
    const fs::path dir = out / names[k];
    make_dir(dir);
    json stage_list = json::array();
    for (const auto& st : run.stages) {
      const fs::path sd = dir / ("stage_" + std::to_string(st.index));
      make_dir(sd);
      Manifest sm("train", echo);
      emit(sm, sd, "pseudo_instances.pgm", encode_label_pgm(st.pseudo.instances));
      emit(sm, sd, "semantic_out.pgm", encode_label_pgm(st.semantic_out));
      emit(sm, sd, "classes.csv", encode_classes_csv(st.pseudo.classes));
      emit(sm, sd, "metrics.json", metrics_json(st.match, st.ap).dump(2) + "\n");
      std::string lines;
      for (const auto& r : st.losses) lines += loss_json(r).dump() + "\n";
      emit(sm, sd, "losses.jsonl", lines);
      sm.write(sd, "manifest.json", {{"scene", names[k]}, {"stage", st.index}});
      stage_list.push_back({{"stage", st.index},
                            {"overall_iou", st.match.overall_iou},
                            {"map50", st.ap.map50},
                            {"final_loss", st.losses.empty() ? json(nullptr) : loss_json(st.losses.back())}});
    }
    std::string warm;
    for (const auto& r : run.warmup_losses) warm += loss_json(r).dump() + "\n";
    emit(m, dir, "warmup_losses.jsonl", warm);
    const auto& last = run.stages.back();
    emit(m, dir, "pseudo_instances.pgm", encode_label_pgm(last.pseudo.instances));
    emit(m, dir, "classes.csv", encode_classes_csv(last.pseudo.classes));
    m.write(dir, "manifest.json",
            {{"scene", names[k]}, {"initial_overall_iou", run.initial_match.overall_iou}, {"stages", stage_list}});
    json summary = {{"scene", names[k]}, {"initial_overall_iou", run.initial_match.overall_iou}, {"stages", stage_list}};
    summaries[k] = summary.dump();
    if (o.verbose)
      for (const auto& st : run.stages)
        for (const auto& r : st.losses) std::cerr << loss_json(r).dump() << "\n";
  });
  for (const auto& s : summaries) std::cout << s << "\n";
  Manifest top("train", echo);
  top.write(out, "manifest.json", {{"scenes", names}});
  return 0;
}

struct EvalOpts {
  std::vector<std::string> pred, gt, pred_classes, gt_classes, pred_semantic, gt_semantic;
  std::string out;
  bool class_aware = false;
  bool count_unmatched = true;
  int jobs = 1;
};

int run_eval(const EvalOpts& o, const CLI::App& sub) {
  if (o.pred.size() != o.gt.size()) throw UsageError("--pred and --gt must be given the same number of times");
  auto check_len = [&](const std::vector<std::string>& v, const char* flag) {
    if (!v.empty() && v.size() != o.pred.size())
      throw UsageError(std::string(flag) + " must be given once per --pred");
  };
  check_len(o.pred_classes, "--pred-classes");
  check_len(o.gt_classes, "--gt-classes");
  check_len(o.pred_semantic, "--pred-semantic");
  check_len(o.gt_semantic, "--gt-semantic");

  Manifest m("eval", config_echo(sub));
  std::vector<json> results(o.pred.size());
  std::vector<MatchReport> matches(o.pred.size());
  std::vector<ApReport> aps(o.pred.size());
  for (std::size_t k = 0; k < o.pred.size(); ++k) {
    m.add_input(o.pred[k]);
    m.add_input(o.gt[k]);
  }
  parallel_for(o.pred.size(), o.jobs, [&](std::size_t k) {
    const LabelGrid pred = decode_label_pgm(read_file(o.pred[k]));
    const LabelGrid gt = decode_label_pgm(read_file(o.gt[k]));
    require_same_shape(pred.shape(), gt.shape(), "prediction vs ground truth");
    auto table = [](const std::vector<std::string>& csv, const std::vector<std::string>& sem, std::size_t k,
                    const LabelGrid& inst) {
      if (!csv.empty()) return decode_classes_csv(read_text_file(csv[k]));
      if (!sem.empty()) return classes_from_semantic(inst, decode_label_pgm(read_file(sem[k])));
      ClassTable t;  // class-agnostic: every instance in class 1
      for (auto v : inst)
        if (v) t[v] = 1;
      return t;
    };
    const ClassTable pc = table(o.pred_classes, o.pred_semantic, k, pred);
    const ClassTable gc = table(o.gt_classes, o.gt_semantic, k, gt);
    matches[k] = greedy_match(pred, pc, gt, gc, {o.class_aware, o.count_unmatched});
    aps[k] = evaluate_ap(pred, pc, area_scores(pred), gt, gc);
    results[k] = metrics_json(matches[k], aps[k]);
    results[k]["pred"] = o.pred[k];
    results[k]["gt"] = o.gt[k];
  });

  json metrics;
  if (results.size() == 1) {
    metrics = results[0];
  } else {
    // Counts add up; IoU and mAP are averaged over scenes.
    MatchCounts c;
    double iou = 0, m50 = 0, m70 = 0, m75 = 0;
    for (std::size_t k = 0; k < results.size(); ++k) {
      c.iou50 += matches[k].counts.iou50;
      c.iou70 += matches[k].counts.iou70;
      c.iou90 += matches[k].counts.iou90;
      iou += matches[k].overall_iou;
      m50 += aps[k].map50;
      m70 += aps[k].map70;
      m75 += aps[k].map75;
    }
    const double n = static_cast<double>(results.size());
    metrics = {{"counts", {{"iou50", c.iou50}, {"iou70", c.iou70}, {"iou90", c.iou90}}},
               {"overall_iou", iou / n},
               {"map50", m50 / n},
               {"map70", m70 / n},
               {"map75", m75 / n},
               {"per_scene", results}};
  }
  const std::string text = metrics.dump(2) + "\n";
  if (o.out.empty()) {
    std::cout << text;
  } else {
    const fs::path out(o.out);
    make_dir(out);
    emit(m, out, "metrics.json", text);
    m.write(out);
    std::cout << "overall_iou " << metrics["overall_iou"].get<double>() << "\n";
  }
  return 0;
}

int run_render(const std::string& in, const std::string& out) {
  write_file(out, render_label_ppm(decode_label_pgm(read_file(in))));
  return 0;
}

int run_selftest(bool trend, int trend_runs) {
  std::vector<std::function<CriterionResult()>> suites = {
      [] { return check_oracle_round_trip(); }, [] { return check_nearest_point_split(); },
      [] { return check_gradients(); },         [] { return check_i2s_operator(); },
      [] { return check_loss_algebra(); },      [] { return check_evaluator(); }};
  if (trend) suites.push_back([trend_runs] { return check_trend(trend_runs); });
  suites.push_back([] { return check_determinism(); });
  bool ok = true;
  for (auto& s : suites) {
    const auto r = s();
    std::cout << format_result(r) << std::endl;
    ok = ok && r.passed;
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Mutual distillation pseudo-label toolkit", "mdm"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  SynthOpts so;
  auto* synth = app.add_subcommand("synth", "generate synthetic scenes with corrupted semantic maps");
  synth->add_option("--config", "JSON file with option values (flags win)");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--seed", so.seed, "first scene seed")->capture_default_str();
  synth->add_option("--count", so.count, "number of scenes")->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--height", so.height)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--width", so.width)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--instances", so.instances, "instances per scene (0: 2-6 per seed)")->capture_default_str();
  synth->add_option("--classes", so.classes)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--shape", so.shape, "rect | ellipse | mixed")
      ->check(CLI::IsMember({"rect", "ellipse", "mixed"}))
      ->capture_default_str();
  synth->add_option("--point-mode", so.point_mode, "centroid | random_interior")
      ->check(CLI::IsMember({"centroid", "random_interior"}))
      ->capture_default_str();
  synth->add_option("--dilation", so.dilation)->check(CLI::NonNegativeNumber)->capture_default_str();
  synth->add_option("--erosion", so.erosion)->check(CLI::NonNegativeNumber)->capture_default_str();
  synth->add_option("--merge", so.merge, "bridge nearby same-class instances")->capture_default_str();
  synth->add_option("--flip", so.flip, "pixel flip rate")->check(CLI::Range(0.0, 0.999999))->capture_default_str();

  std::string s2i_sem, s2i_pts, s2i_off, s2i_out;
  int s2i_conn = 8;
  GroupingConfig s2i_group;
  auto* s2i = app.add_subcommand("s2i", "semantic map + points -> instances, offsets, classes");
  s2i->add_option("--config", "JSON file with option values (flags win)");
  s2i->add_option("--semantic", s2i_sem, "class-index PGM")->required();
  s2i->add_option("--points", s2i_pts, "points CSV")->required();
  s2i->add_option("--out", s2i_out, "output directory")->required();
  s2i->add_option("--offsets", s2i_off, "predicted offsets MDMT; when given, instances come from grouping");
  s2i->add_option("--connectivity", s2i_conn)->check(CLI::IsMember({4, 8}))->capture_default_str();
  s2i->add_option("--tau", s2i_group.vote_radius_tau, "vote radius (<= 0: max(H,W)/4)")->capture_default_str();
  s2i->add_option("--box-side", s2i_group.pseudo_box_side)->check(CLI::PositiveNumber)->capture_default_str();

  std::string i2s_inst, i2s_cls, i2s_out;
  I2SConfig i2s_cfg;
  bool i2s_dense = false;
  auto* i2s = app.add_subcommand("i2s", "refresh a class map through instance affinity");
  i2s->add_option("--config", "JSON file with option values (flags win)");
  i2s->add_option("--instances", i2s_inst, "instance PGM")->required();
  i2s->add_option("--classmap", i2s_cls, "class score MDMT (H x W x C+1)")->required();
  i2s->add_option("--out", i2s_out, "output directory")->required();
  i2s->add_option("--beta", i2s_cfg.beta)->capture_default_str();
  i2s->add_option("--pair-radius", i2s_cfg.pair_radius)->capture_default_str();
  i2s->add_flag("--dense", i2s_dense, "use the dense H*W x H*W operator (small grids only)");

  TrainOpts to;
  to.cfg.seed = 1;
  auto* train = app.add_subcommand("train", "run the staged MDM loop on scene directories");
  train->add_option("--config", "JSON file with option values (flags win)");
  train->add_option("--scene", to.scenes, "scene directory written by synth (repeatable)")->required();
  train->add_option("--out", to.out, "output directory")->required();
  train->add_option("--jobs", to.jobs, "scenes trained in parallel")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_flag("--verbose", to.verbose, "also print every loss row to stderr");
  add_mdm_options(train, to);

  EvalOpts eo;
  auto* eval = app.add_subcommand("eval", "score predicted instance maps against ground truth");
  eval->add_option("--config", "JSON file with option values (flags win)");
  eval->add_option("--pred", eo.pred, "predicted instance PGM (repeatable)")->required();
  eval->add_option("--gt", eo.gt, "ground-truth instance PGM (repeatable)")->required();
  eval->add_option("--pred-classes", eo.pred_classes, "instance_id,class_id CSV per --pred");
  eval->add_option("--gt-classes", eo.gt_classes, "instance_id,class_id CSV per --gt");
  eval->add_option("--pred-semantic", eo.pred_semantic, "class-index PGM per --pred");
  eval->add_option("--gt-semantic", eo.gt_semantic, "class-index PGM per --gt");
  eval->add_option("--out", eo.out, "output directory (metrics.json); stdout when omitted");
  eval->add_option("--class-aware", eo.class_aware, "match only within a class")->capture_default_str();
  eval->add_option("--count-unmatched", eo.count_unmatched, "unmatched predictions lower overall IoU")
      ->capture_default_str();
  eval->add_option("--jobs", eo.jobs)->check(CLI::PositiveNumber)->capture_default_str();

  std::string r_in, r_out;
  auto* render = app.add_subcommand("render", "colourise a label PGM as PPM");
  render->add_option("--config", "JSON file with option values (flags win)");
  render->add_option("--in", r_in, "label PGM")->required();
  render->add_option("--out", r_out, "output PPM file")->required();

  bool st_trend = false;
  int st_runs = 20;
  auto* selftest = app.add_subcommand("selftest", "run the oracle and gradient-check suites");
  selftest->add_option("--config", "JSON file with option values (flags win)");
  selftest->add_flag("--trend", st_trend, "also run the slow multi-seed training trend");
  selftest->add_option("--trend-runs", st_runs)->check(CLI::PositiveNumber)->capture_default_str();

  if (args.size() > 1 && !args[1].starts_with("-") && !app.get_subcommand_no_throw(args[1])) {
    std::cerr << "unknown subcommand: " << args[1] << "\n" << app.help();
    return 1;
  }
  try {
    args = merge_config(args);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*synth) return run_synth(so, *synth);
    if (*s2i) return run_s2i(s2i_sem, s2i_pts, s2i_off, s2i_out, s2i_conn, s2i_group, *s2i);
    if (*i2s) return run_i2s(i2s_inst, i2s_cls, i2s_out, i2s_cfg, i2s_dense, *i2s);
    if (*train) return run_train(to, *train);
    if (*eval) return run_eval(eo, *eval);
    if (*render) return run_render(r_in, r_out);
    if (*selftest) return run_selftest(st_trend, st_runs);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << app.help();
  return 1;
}
