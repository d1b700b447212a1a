// Command-line driver: dataset generation, training, the ablation matrix,
// checkpoint evaluation, and the finite-difference gradient suite.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stf/gradcheck.hpp"
#include "stf/stf.hpp"

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

int cmd_generate(const std::string& config_path, const std::string& out_dir) {
  const nlohmann::json j = read_json(config_path);
  stf::GeneratorConfig gen = j.get<stf::GeneratorConfig>();
  const int num_sequences = j.value("num_sequences", 1);
  const std::uint64_t seed = j.value("seed", std::uint64_t(0));
  for (int s = 0; s < num_sequences; ++s) {
    const std::uint64_t seq_seed = seed + static_cast<std::uint64_t>(s);
    auto [frames, annotations] = stf::generate_sequence(gen, seq_seed);
    char name[32];
    std::snprintf(name, sizeof(name), "seq%05d", s);
    stf::save_sequence(frames, annotations, (fs::path(out_dir) / name).string(), name, gen,
                       seq_seed);
  }
  std::cout << "wrote " << num_sequences << " sequence(s) to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_ckpt, std::string metrics_path,
              const std::string& resume_path) {
  stf::RunConfig cfg = stf::run_config_from_json(read_json(config_path));
  if (metrics_path.empty()) metrics_path = out_ckpt + ".metrics.jsonl";
  stf::Checkpoint<float> resume;
  const bool resuming = !resume_path.empty();
  if (resuming) resume = stf::load_checkpoint<float>(resume_path);
  stf::Checkpoint<float> ckpt =
      stf::train<float>(cfg, data_dir, metrics_path, resuming ? &resume : nullptr);
  stf::save_checkpoint(out_ckpt, ckpt);
  std::cout << "trained " << ckpt.epoch << " epoch(s); checkpoint: " << out_ckpt
            << "; metrics: " << metrics_path << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir,
               const std::string& out_table, std::string eval_dir) {
  stf::RunConfig cfg = stf::run_config_from_json(read_json(config_path));
  if (eval_dir.empty()) eval_dir = cfg.eval_data;
  if (eval_dir.empty()) throw std::runtime_error("ablate: no eval data (flag or config)");
  const std::string work_dir = fs::path(out_table).parent_path().empty()
                                   ? std::string(".")
                                   : fs::path(out_table).parent_path().string();
  auto rows = stf::ablate<float>(cfg, data_dir, eval_dir, work_dir);
  write_json(out_table, stf::ablation_table_json(rows));
  for (const auto& r : rows)
    std::cout << r.variant << ": mAP=" << r.report.map << " AP50=" << r.report.ap50 << "\n";
  std::cout << "table: " << out_table << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_report) {
  stf::Checkpoint<float> ckpt = stf::load_checkpoint<float>(ckpt_path);
  stf::EvalReport report =
      stf::evaluate_checkpoint(ckpt, data_dir, out_report + ".detections.jsonl");
  write_json(out_report, stf::to_json(report));
  std::cout << stf::to_json(report).dump(2) << "\n";
  return 0;
}

int cmd_gradcheck() {
  bool ok = true;
  for (const auto& r : stf::run_gradient_suite()) {
    const bool pass = r.max_rel_error < 1e-4;
    ok = ok && pass;
    std::cout << r.module << ": max relative error " << r.max_rel_error << " "
              << (pass ? "[ok]" : "[FAIL]") << "\n";
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-frame video object detector: data, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, metrics_path, resume_path, ckpt_path, eval_dir;

  auto* gen = app.add_subcommand("generate", "render synthetic sequences to a dataset directory");
  gen->add_option("--config", config_path, "generator config JSON")->required();
  gen->add_option("--out", out_path, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--data", data_dir, "training dataset directory")->required();
  train->add_option("--out", out_path, "output checkpoint path")->required();
  train->add_option("--metrics", metrics_path, "metrics log path (JSONL)");
  train->add_option("--resume", resume_path, "checkpoint to resume from");

  auto* ablate = app.add_subcommand("ablate", "run the module / fusion-strategy matrix");
  ablate->add_option("--config", config_path, "base run config JSON")->required();
  ablate->add_option("--data", data_dir, "training dataset directory")->required();
  ablate->add_option("--out", out_path, "output table JSON")->required();
  ablate->add_option("--eval-data", eval_dir, "evaluation dataset directory");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", data_dir, "evaluation dataset directory")->required();
  eval->add_option("--out", out_path, "output report JSON")->required();

  app.add_subcommand("gradcheck", "finite-difference gradient suite (double precision)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(config_path, out_path);
    if (train->parsed()) return cmd_train(config_path, data_dir, out_path, metrics_path, resume_path);
    if (ablate->parsed()) return cmd_ablate(config_path, data_dir, out_path, eval_dir);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, out_path);
    return cmd_gradcheck();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
