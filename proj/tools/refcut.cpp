// Command-line front end: synthetic data, training, evaluation and serving.
#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "refcut/checkpoint.hpp"
#include "refcut/data_io.hpp"
#include "refcut/robot_eval.hpp"
#include "refcut/session_service.hpp"
#include "refcut/training.hpp"

using namespace refcut;
namespace fs = std::filesystem;

namespace {

ModelConfig model_config_from(const std::string& name) {
  if (name == "desk") return ModelConfig::desk();
  if (name == "compact") return ModelConfig::compact();
  std::ifstream in(name);
  if (!in) throw std::invalid_argument("model config '" + name + "' is neither a preset nor a readable file");
  ModelConfig c = nlohmann::json::parse(in).get<ModelConfig>();
  c.validate();
  return c;
}

std::vector<GuidanceRegime> regimes_from(const std::string& s) {
  if (s == "all")
    return {GuidanceRegime::None, GuidanceRegime::PositiveOnly, GuidanceRegime::NegativeOnly,
            GuidanceRegime::Both};
  return {guidance_regime_from_string(s)};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

SessionService* g_service = nullptr;
extern "C" void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reference-guided interactive part segmentation"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic part-composite dataset");
  fs::path synth_out;
  SynthConfig sc;
  int eval_instances = 8;
  synth->add_option("--out", synth_out, "Dataset root")->required();
  synth->add_option("--categories", sc.n_categories, "Number of categories");
  synth->add_option("--instances", sc.instances_per_category, "Training instances per category");
  synth->add_option("--eval-instances", eval_instances, "Evaluation instances per category (0: none)");
  synth->add_option("--size", sc.image_size, "Image side in pixels");
  synth->add_option("--max-parts", sc.max_parts, "Parts per object, at most");
  synth->add_option("--seed", sc.seed, "Generator seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train from a dataset root");
  fs::path train_config, train_data, train_out, init_ckpt;
  std::string model_name = "desk";
  int held_out = 0;
  train_cmd->add_option("--config", train_config, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train_data, "Dataset root with a train split")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--model", model_name, "desk, compact or a model config JSON");
  train_cmd->add_option("--init", init_ckpt, "Start from this checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--held-out", held_out, "Val samples checked during training (0: off)");

  // manifest
  auto* manifest_cmd = app.add_subcommand("manifest", "Write the combination-evaluation manifest");
  fs::path manifest_data, manifest_out;
  std::string manifest_split = "val";
  manifest_cmd->add_option("--data", manifest_data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  manifest_cmd->add_option("--split", manifest_split, "Split to enumerate");
  manifest_cmd->add_option("--out", manifest_out, "Manifest path (JSON lines)")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Robot-user evaluation of a checkpoint");
  fs::path eval_ckpt, eval_data, eval_manifest, report_path, csv_path, sweep_path;
  std::string eval_split = "val", regime_arg = "all";
  EvalConfig ec;
  std::vector<int> polygon_levels;
  std::vector<double> scale_levels;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--split", eval_split, "Evaluation split");
  eval_cmd->add_option("--manifest", eval_manifest, "Evaluate exactly these samples")->check(CLI::ExistingFile);
  eval_cmd->add_option("--regime", regime_arg, "none, pos, neg, both or all");
  eval_cmd->add_option("--workers", ec.workers, "Parallel sessions");
  eval_cmd->add_option("--max-clicks", ec.session.max_clicks, "Click cap per session");
  eval_cmd->add_option("--polygon-interval", ec.polygon_interval, "Degrade reference masks to polygons");
  eval_cmd->add_option("--reference-scale", ec.reference_scale, "Down-scale the reference");
  eval_cmd->add_option("--report", report_path, "JSON report (one per regime, suffixed)");
  eval_cmd->add_option("--csv", csv_path, "Table as CSV");
  eval_cmd->add_option("--polygon-sweep", polygon_levels, "Polygon intervals to sweep")->delimiter(',');
  eval_cmd->add_option("--scale-sweep", scale_levels, "Reference scales to sweep")->delimiter(',');
  eval_cmd->add_option("--sweep-out", sweep_path, "Sweep curves (JSON)");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP session service");
  fs::path serve_ckpt;
  std::string host = "127.0.0.1";
  int port = 8080;
  ServiceConfig svc;
  serve_cmd->add_option("--checkpoint", serve_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--port", port, "Port");
  serve_cmd->add_option("--max-sessions", svc.max_sessions, "Concurrent session limit");

  CLI11_PARSE(app, argc, argv);
  if (verbose) spdlog::set_level(spdlog::level::debug);

  try {
    if (*synth) {
      sc.id_prefix = "train_";
      export_tda(generate_synthetic(sc), synth_out, "train");
      if (eval_instances > 0) {
        SynthConfig ev = sc;
        ev.instances_per_category = eval_instances;
        ev.id_prefix = "val_";
        ev.seed = sc.seed + 1000003;
        export_tda(generate_synthetic(ev), synth_out, "val");
      }
      spdlog::info("wrote {}", synth_out.string());
    } else if (*train_cmd) {
      const TrainConfig cfg = load_train_config(train_config);
      const Dataset train_set = load_part_dataset(train_data, "train");
      ModelConfig mc;
      ModelParams<float> init;
      if (!init_ckpt.empty()) {
        Checkpoint ck = load_checkpoint(init_ckpt);
        mc = ck.config;
        init = std::move(ck.params);
      } else {
        mc = model_config_from(model_name);
        init = init_params<float>(mc, cfg.seed);
      }
      Dataset val_set;
      TrainOptions opts;
      opts.out_dir = train_out;
      if (held_out > 0) {
        val_set = load_part_dataset(train_data, "val");
        auto samples = build_eval_samples(val_set);
        if (samples.size() > static_cast<std::size_t>(held_out)) samples.resize(static_cast<std::size_t>(held_out));
        opts.held_out = std::move(samples);
      }
      fs::create_directories(train_out);
      write_text(train_out / "train_config.json", nlohmann::json(cfg).dump(2) + "\n");
      train(train_set, mc, std::move(init), cfg, opts);
    } else if (*manifest_cmd) {
      Dataset d = load_part_dataset(manifest_data, manifest_split);
      const auto samples = build_eval_samples(d);
      write_eval_manifest(manifest_out, samples);
      spdlog::info("{} samples", samples.size());
    } else if (*eval_cmd) {
      const Checkpoint ck = load_checkpoint(eval_ckpt);
      const RefCutNet<float> net(ck.config, ck.params);
      const NetSessionModel model(net);
      const Dataset d = load_part_dataset(eval_data, eval_split);
      const auto samples = eval_manifest.empty() ? build_eval_samples(d) : read_eval_manifest(eval_manifest, d);

      std::string csv = NoCReport::csv_header() + "\n";
      for (GuidanceRegime regime : regimes_from(regime_arg)) {
        ec.regime = regime;
        NoCReport report = evaluate(model, samples, ec);
        report.metadata["checkpoint"] = eval_ckpt.filename().string();
        const std::string label(to_string(regime));
        csv += report.to_csv_row(label) + "\n";
        std::cout << report.to_csv_row(label) << '\n';
        if (!report_path.empty()) {
          fs::path p = report_path;
          p.replace_filename(report_path.stem().string() + "_" + label + report_path.extension().string());
          write_report(p, report);
        }
      }
      if (!csv_path.empty()) write_text(csv_path, csv);

      if (!polygon_levels.empty() || !scale_levels.empty()) {
        ec.regime = GuidanceRegime::Both;
        const auto points = degradation_sweep(model, samples, ec, polygon_levels, scale_levels);
        const auto curves = sweep_curves(points);
        std::cout << curves.dump() << '\n';
        if (!sweep_path.empty()) write_text(sweep_path, curves.dump(2) + "\n");
      }
    } else if (*serve_cmd) {
      Checkpoint ck = load_checkpoint(serve_ckpt);
      auto net = std::make_shared<const RefCutNet<float>>(ck.config, std::move(ck.params));
      SessionService service(net, svc);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      spdlog::info("listening on {}:{}", host, port);
      if (!service.listen(host, port)) {
        spdlog::error("cannot bind {}:{}", host, port);
        return 1;
      }
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
