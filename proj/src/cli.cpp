#include "marvis/cli.hpp"

#include <CLI11.hpp>
#include <cctype>
#include <fstream>
#include <iostream>
#include <map>

#include "marvis/bench.hpp"
#include "marvis/epipolar.hpp"
#include "marvis/errors.hpp"
#include "marvis/flow.hpp"
#include "marvis/imageio.hpp"
#include "marvis/lme.hpp"
#include "marvis/objective.hpp"
#include "marvis/toyscene.hpp"
#include "marvis/trainer.hpp"

namespace marvis {

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// First flag in args unknown to the named subcommand; CLI11 reports missing
// required options before extras, which hides typos.
std::string unknown_flag(CLI::App& app, const std::vector<std::string>& args) {
  if (args.empty()) return {};
  CLI::App* sub = app.get_subcommand_no_throw(args[0]);
  if (sub == nullptr) return {};
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--") break;
    if (a.size() < 2 || a[0] != '-' || std::isdigit(static_cast<unsigned char>(a[1])) || a[1] == '.') continue;
    const std::string name = a.substr(0, a.find('='));
    if (sub->get_option_no_throw(name) == nullptr) return name;
  }
  return {};
}

void write_json_file(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

struct Common {
  int threads = 1;
  bool deterministic = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--threads", c.threads, "Kernel threads (execution is serial; 1 is bit-reproducible)")
      ->check(CLI::PositiveNumber);
  sub->add_flag("--deterministic", c.deterministic, "Force fully serial, reproducible execution");
}

FlowField flow_for(const GrayImage& prev, const GrayImage& curr, const std::string& flow_file,
                   const FlowConfig& cfg) {
  if (!flow_file.empty()) {
    FlowField f = read_flo(flow_file);
    if (f.width() != prev.width() || f.height() != prev.height())
      throw ShapeError("flow file " + flow_file + " does not match the frames");
    return f;
  }
  return estimate_flow(prev, curr, cfg);
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"MARVIS real/virtual segmentation toolkit", "marvis"};
  app.require_subcommand(1);
  Common common;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render procedural stereo sequences and a manifest");
  std::string gen_config, gen_out;
  int gen_frames = 0, gen_sequences = 1;
  std::uint64_t gen_seed = 0;
  gen->add_option("--config", gen_config, "Scene config JSON")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--frames", gen_frames, "Frames per sequence (overrides config)");
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "Scene seed (overrides config)");
  gen->add_option("--sequences", gen_sequences, "Number of sequences; more than one randomizes each")
      ->check(CLI::PositiveNumber);
  add_common(gen, common);

  // flow
  auto* flow = app.add_subcommand("flow", "Estimate block-matching optical flow");
  std::string flow_prev, flow_curr, flow_out;
  FlowConfig flow_cfg;
  flow->add_option("--prev", flow_prev, "Earlier frame (PGM)")->required()->check(CLI::ExistingFile);
  flow->add_option("--curr", flow_curr, "Later frame (PGM)")->required()->check(CLI::ExistingFile);
  flow->add_option("--out", flow_out, "Output .flo")->required();
  flow->add_option("--block", flow_cfg.block, "Odd block side");
  flow->add_option("--radius", flow_cfg.radius, "Coarsest-level search radius");
  flow->add_option("--levels", flow_cfg.levels, "Pyramid levels");
  flow->add_option("--refine-radius", flow_cfg.refine_radius, "Finer-level search radius");
  add_common(flow, common);

  // lme
  auto* lme = app.add_subcommand("lme", "Compute a Local Motion Entropy map");
  std::string lme_prev, lme_curr, lme_flow, lme_out, lme_preview, lme_kernel = "fast";
  LmeConfig lme_cfg;
  bool lme_raw = false;
  lme->add_option("--prev", lme_prev, "Earlier frame (PGM)")->required()->check(CLI::ExistingFile);
  lme->add_option("--curr", lme_curr, "Later frame (PGM)")->required()->check(CLI::ExistingFile);
  lme->add_option("--flow", lme_flow, "Precomputed .flo instead of block matching")->check(CLI::ExistingFile);
  lme->add_option("--out", lme_out, "Output LMEF map")->required();
  lme->add_option("-k,--k,--receptive-field", lme_cfg.receptive_field, "Odd window side");
  lme->add_option("--bins", lme_cfg.bins, "Histogram bins");
  lme->add_option("--alpha", lme_cfg.alpha, "Magnitude weight");
  lme->add_option("--beta", lme_cfg.beta, "Angle weight");
  lme->add_flag("--raw", lme_raw, "Write entropy in bits instead of [0,1]");
  lme->add_option("--png-preview", lme_preview, "Also write an 8-bit PGM visualization");
  lme->add_option("--kernel", lme_kernel, "fast or brute")->check(CLI::IsMember({"fast", "brute"}));
  add_common(lme, common);

  // egc-map
  auto* egc = app.add_subcommand("egc-map", "Normalized epipolar error map of a stereo pair");
  std::string egc_left, egc_right, egc_calib, egc_out, egc_report;
  double egc_ratio = 0.7;
  std::uint64_t egc_seed = 0;
  egc->add_option("--left", egc_left, "Left image (PGM)")->required()->check(CLI::ExistingFile);
  egc->add_option("--right", egc_right, "Right image (PGM)")->required()->check(CLI::ExistingFile);
  auto* egc_calib_opt = egc->add_option("--calib", egc_calib, "Calibration JSON; without it F is fitted by RANSAC")
                            ->check(CLI::ExistingFile);
  bool egc_estimate = false;
  egc->add_flag("--estimate", egc_estimate, "Fit F by RANSAC over the matches")->excludes(egc_calib_opt);
  egc->add_option("--out", egc_out, "Output LMEF map")->required();
  egc->add_option("--ratio", egc_ratio, "Descriptor ratio test");
  egc->add_option("--report", egc_report, "Optional JSON with matches and errors");
  egc->add_option("--seed", egc_seed, "RANSAC seed");
  add_common(egc, common);

  // train
  auto* tr = app.add_subcommand("train", "Train the segmentation network");
  std::string tr_manifest, tr_config, tr_out;
  std::optional<int> tr_epochs, tr_batch;
  std::optional<std::uint64_t> tr_seed;
  std::optional<double> tr_lr;
  bool tr_estimated = false, tr_no_egc = false, tr_tiny = false;
  tr->add_option("--manifest", tr_manifest, "Dataset manifest JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--config", tr_config, "Training config JSON")->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--epochs", tr_epochs, "Epochs (overrides config)");
  tr->add_option("--batch-size", tr_batch, "Batch size (overrides config)");
  tr->add_option("--lr", tr_lr, "Initial learning rate (overrides config)");
  tr->add_option("--seed", tr_seed, "Seed (overrides config)");
  tr->add_flag("--estimated-flow", tr_estimated, "Use block matching instead of the .flo files");
  tr->add_flag("--no-egc", tr_no_egc, "Drop the epipolar term");
  tr->add_flag("--tiny", tr_tiny, "Use the [4,8,16,16,32] stage widths");
  add_common(tr, common);

  // infer
  auto* inf = app.add_subcommand("infer", "Segment a frame pair with a trained checkpoint");
  std::string inf_ckpt, inf_prev, inf_curr, inf_out, inf_prob, inf_flow;
  inf->add_option("--ckpt", inf_ckpt, "Checkpoint (.mrvs with .json sidecar)")->required()->check(CLI::ExistingFile);
  inf->add_option("--prev", inf_prev, "Earlier frame (PGM)")->required()->check(CLI::ExistingFile);
  inf->add_option("--curr", inf_curr, "Current frame (PGM)")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", inf_out, "Output mask (PGM)")->required();
  inf->add_option("--prob", inf_prob, "Optional probability map (LMEF)");
  inf->add_option("--flow", inf_flow, "Precomputed .flo instead of block matching")->check(CLI::ExistingFile);
  add_common(inf, common);

  // eval
  auto* ev = app.add_subcommand("eval", "Score predictions against ground-truth masks");
  std::string ev_pred, ev_gt, ev_report;
  double ev_threshold = 0.5;
  ev->add_option("--pred", ev_pred, "Directory of predictions (.lmef probabilities or .pgm masks)")
      ->required()->check(CLI::ExistingDirectory);
  ev->add_option("--gt", ev_gt, "Directory of ground-truth masks (.pgm)")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--threshold", ev_threshold, "Binarization threshold");
  ev->add_option("--report", ev_report, "Output report JSON")->required();

  // bench
  auto* bn = app.add_subcommand("bench", "Time the LME, flow and network kernels");
  BenchConfig bench_cfg;
  std::string bench_out = "bench.json";
  bn->add_option("--width", bench_cfg.width, "Frame width");
  bn->add_option("--height", bench_cfg.height, "Frame height");
  bn->add_option("--repeats", bench_cfg.repeats, "Timed runs per kernel");
  bn->add_option("--kernels", bench_cfg.kernels, "Subset of lme_brute lme_fast estimate_flow marvis_forward");
  bn->add_option("--model", bench_cfg.model, "tiny or default")->check(CLI::IsMember({"tiny", "default"}));
  bn->add_option("--seed", bench_cfg.seed, "Input seed");
  bn->add_option("--out", bench_out, "Report path");
  add_common(bn, common);

  std::vector<std::string> argv_store{"marvis"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) {
      const std::string bad = unknown_flag(app, args);
      if (!bad.empty()) {
        err << "unknown option " << bad << " for '" << args[0] << "'\nRun with --help for more information.\n";
        return kExitUsage;
      }
    }
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      SceneConfig cfg;
      if (!gen_config.empty()) cfg = read_json_file(gen_config).get<SceneConfig>();
      if (gen_frames > 0) cfg.frames = gen_frames;
      if (*gen_seed_opt) cfg.seed = gen_seed;
      std::vector<SceneSequence> seqs;
      for (int i = 0; i < gen_sequences; ++i) {
        const SceneConfig c =
            gen_sequences == 1 ? cfg : SceneConfig::randomized(cfg, cfg.seed * 1000003ULL + static_cast<std::uint64_t>(i));
        seqs.push_back(render_sequence(c));
      }
      const DatasetManifest m = export_dataset(seqs, gen_out, cfg.seed);
      out << "wrote " << m.entries.size() << " samples in " << seqs.size() << " sequences to "
          << (fs::path(gen_out) / "manifest.json").string() << "\n";
    } else if (flow->parsed()) {
      write_flo(estimate_flow(read_pgm(flow_prev), read_pgm(flow_curr), flow_cfg), flow_out);
    } else if (lme->parsed()) {
      lme_cfg.normalize_output = !lme_raw;
      const GrayImage prev = read_pgm(lme_prev), curr = read_pgm(lme_curr);
      const auto [m, a] = normalize_flow_channels(flow_for(prev, curr, lme_flow, FlowConfig{}));
      const EntropyMap map = lme_kernel == "brute" ? lme_brute(m, a, lme_cfg) : lme_fast(m, a, lme_cfg);
      write_floatmap(map.to_floatmap(), lme_out);
      if (!lme_preview.empty()) {
        const double top = lme_cfg.normalize_output ? 1.0 : lme_cfg.max_entropy();
        write_pgm(GrayImage(PlaneF((map.values / top).cwiseMax(0.0).cwiseMin(1.0).cast<float>())), lme_preview);
      }
    } else if (egc->parsed()) {
      const GrayImage left = read_pgm(egc_left), right = read_pgm(egc_right);
      StereoMatchConfig mcfg;
      mcfg.ratio = egc_ratio;
      FundamentalMatrix f;
      if (!egc_calib.empty()) {
        f = fundamental_from_calibration(read_calibration(egc_calib));
      } else {
        RansacConfig rc;
        rc.seed = egc_seed;
        f = estimate_fundamental(matched_pairs(left, right, mcfg), rc).f;
      }
      const StereoErrorAnalysis an = analyze_stereo(left, right, f, mcfg);
      write_floatmap(an.map, egc_out);
      if (!egc_report.empty()) {
        nlohmann::json pairs = nlohmann::json::array();
        for (std::size_t i = 0; i < an.pairs.size(); ++i)
          pairs.push_back({{"left", {an.pairs[i].left.x(), an.pairs[i].left.y()}},
                           {"right", {an.pairs[i].right.x(), an.pairs[i].right.y()}},
                           {"error_px", an.errors[i]},
                           {"normalized", an.normalized_errors[i]}});
        write_json_file({{"matches", pairs.size()}, {"pairs", pairs}}, egc_report);
      }
    } else if (tr->parsed()) {
      TrainConfig cfg;
      if (!tr_config.empty()) cfg = read_json_file(tr_config).get<TrainConfig>();
      if (tr_epochs) cfg.epochs = *tr_epochs;
      if (tr_batch) cfg.batch_size = *tr_batch;
      if (tr_lr) cfg.lr = *tr_lr;
      if (tr_seed) {
        cfg.seed = *tr_seed;
        cfg.model.seed = *tr_seed;
      }
      if (tr_estimated) cfg.estimated_flow = true;
      if (tr_no_egc) cfg.use_egc = false;
      if (tr_tiny) cfg.model.stage_channels = ModelConfig::tiny().stage_channels;
      const TrainResult r = train(read_manifest(tr_manifest), cfg, tr_out);
      const EpochLog& last = r.history.back();
      out << "trained " << r.history.size() << " epochs; best val IoU "
          << r.history[r.best_epoch - 1].val_iou << " at epoch " << r.best_epoch << "; last loss "
          << last.loss << "\n";
    } else if (inf->parsed()) {
      std::optional<FlowField> f;
      if (!inf_flow.empty()) f = read_flo(inf_flow);
      const InferResult r = infer(inf_ckpt, read_pgm(inf_prev), read_pgm(inf_curr), f);
      write_mask(r.mask, inf_out);
      if (!inf_prob.empty()) write_floatmap(r.prob, inf_prob);
    } else if (ev->parsed()) {
      std::vector<fs::path> gts;
      for (const auto& e : fs::directory_iterator(ev_gt))
        if (e.path().extension() == ".pgm") gts.push_back(e.path());
      std::sort(gts.begin(), gts.end());
      if (gts.empty()) throw IoError("no .pgm masks in " + ev_gt);
      nlohmann::json images = nlohmann::json::array();
      EvalReport micro;
      double iou = 0, f1 = 0, precision = 0, recall = 0;
      for (const auto& g : gts) {
        const BinaryMask target = read_mask(g);
        const fs::path stem = fs::path(ev_pred) / g.stem();
        FloatMap prob;
        if (fs::exists(fs::path(stem).replace_extension(".lmef"))) {
          prob = read_floatmap(fs::path(stem).replace_extension(".lmef"));
        } else if (fs::exists(fs::path(stem).replace_extension(".pgm"))) {
          prob = FloatMap(PlaneF(read_mask(fs::path(stem).replace_extension(".pgm")).labels.cast<float>()));
        } else {
          throw IoError("no prediction for " + g.filename().string() + " in " + ev_pred);
        }
        const EvalReport r = evaluate(prob, target, ev_threshold);
        nlohmann::json item = r;
        item["name"] = g.filename().string();
        images.push_back(item);
        micro += r;
        iou += r.iou;
        f1 += r.f1;
        precision += r.precision;
        recall += r.recall;
      }
      const double n = static_cast<double>(gts.size());
      nlohmann::json report{{"threshold", ev_threshold},
                            {"images", images},
                            {"macro", {{"iou", iou / n}, {"f1", f1 / n}, {"precision", precision / n}, {"recall", recall / n}}},
                            {"micro", micro}};
      write_json_file(report, ev_report);
      out << "IoU " << iou / n << " F1 " << f1 / n << " over " << gts.size() << " images\n";
    } else if (bn->parsed()) {
      const BenchReport r = run_bench(bench_cfg);
      const nlohmann::json j = bench_to_json(r);
      validate_bench_json(j);
      write_json_file(j, bench_out);
      for (const auto& [name, t] : r.kernels) out << name << " median " << t.median_ns / 1e6 << " ms\n";
      for (const auto& [name, s] : r.speedups) out << name << " speedup " << s << "\n";
      if (r.low_confidence) out << "warning: fewer than 5 repeats, timings are low-confidence\n";
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "invalid configuration: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "invalid JSON: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace marvis
