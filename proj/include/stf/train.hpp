#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stf/checkpoint.hpp"
#include "stf/config.hpp"
#include "stf/data/dataset.hpp"
#include "stf/eval.hpp"
#include "stf/model.hpp"

namespace stf {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Global L2 norm over the gradients of every unfrozen parameter; scales them
// in place so the post-clip norm is at most clip_norm. Returns the pre-clip
// norm.
template <typename T>
double clip_gradients(std::vector<Tensor<T>*>& grads, double clip_norm) {
  double sq = 0;
  for (const Tensor<T>* g : grads)
    for (std::int64_t i = 0; i < g->numel(); ++i) sq += static_cast<double>((*g)[i]) * (*g)[i];
  const double norm = std::sqrt(sq);
  if (norm > clip_norm) {
    const T scale = static_cast<T>(clip_norm / norm);
    for (Tensor<T>* g : grads)
      for (std::int64_t i = 0; i < g->numel(); ++i) (*g)[i] *= scale;
  }
  return norm;
}

// One Adam update over every unfrozen parameter. `step` is 1-based.
template <typename T>
void adam_step(ParamStore<T>& store, const std::vector<Tensor<T>*>& grads, double lr,
               std::uint64_t step, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  size_t gi = 0;
  for (auto& e : store.entries()) {
    if (e.frozen) continue;
    const Tensor<T>& g = *grads[gi++];
    if (e.adam_m.empty()) {
      e.adam_m = Tensor<T>::zeros_like(e.value);
      e.adam_v = Tensor<T>::zeros_like(e.value);
    }
    for (std::int64_t i = 0; i < e.value.numel(); ++i) {
      const double gv = static_cast<double>(g[i]);
      const double m = beta1 * e.adam_m[i] + (1 - beta1) * gv;
      const double v = beta2 * e.adam_v[i] + (1 - beta2) * gv * gv;
      e.adam_m[i] = static_cast<T>(m);
      e.adam_v[i] = static_cast<T>(v);
      e.value[i] -= static_cast<T>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
    }
  }
}

inline double learning_rate(const OptimizerConfig& opt, int epoch) {
  int decays = 0;
  for (int d : opt.decay_epochs)
    if (epoch >= d) ++decays;
  return opt.lr0 / std::pow(opt.decay_factor, decays);
}

// ---------------------------------------------------------------------------
// Dataset traversal
// ---------------------------------------------------------------------------

inline std::vector<std::string> list_sequence_dirs(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("not a dataset directory: " + root);
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DatasetError("no sequences under " + root);
  return dirs;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct StepRecord {
  int epoch = 0, step = 0;
  double loss = 0;
};
using StepCallback = std::function<void(const StepRecord&)>;

namespace train_detail {

// Stage 1 trains the plain path (backbone, fusion, head); the attention
// modules are identity-initialized and held frozen. Stage 2 releases them and
// freezes the configured backbone stages instead.
template <typename T>
void apply_stage(ParamStore<T>& store, const RunConfig& cfg, int stage) {
  for (auto& e : store.entries()) e.frozen = false;
  if (stage == 1) {
    if (cfg.model.use_mfa) store.set_frozen_prefix("mfa.", true);
    if (cfg.model.use_sfa) store.set_frozen_prefix("sfa.", true);
  } else {
    for (int s : cfg.freeze_stages) set_stage_frozen(store, s, true);
  }
}

template <typename T>
void check_finite(T v, const char* component, int epoch, int step) {
  if (std::isfinite(static_cast<double>(v))) return;
  throw std::runtime_error(std::string("non-finite ") + component + " at epoch " +
                           std::to_string(epoch) + " step " + std::to_string(step));
}

}  // namespace train_detail

template <typename T>
DetectionSet run_inference(const Model<T>& model, ParamStore<T>& store,
                           const FramePairBatch<T>& batch) {
  Tape<T> tp;
  VarMap<T> vm = VarMap<T>::bind(tp, store);
  Var past = tp.leaf(batch.past);
  Var current = tp.leaf(batch.current);
  auto fwd = model.forward(tp, vm, past, current);
  return decode(tp.val(fwd.outputs.heatmap), tp.val(fwd.outputs.offset),
                tp.val(fwd.outputs.size), model.cfg.head.top_k, model.cfg.head.score_threshold,
                batch.current.dim(3), batch.current.dim(2));
}

// Full-dataset evaluation of the current parameters.
template <typename T>
EvalReport evaluate_model(const Model<T>& model, ParamStore<T>& store, const std::string& data_root,
                          const RunConfig& cfg,
                          std::vector<std::vector<Detection>>* dets_out = nullptr) {
  std::vector<std::vector<Detection>> dets;
  std::vector<Annotation> gts;
  for (const std::string& dir : list_sequence_dirs(data_root)) {
    auto [frames, annotations] = load_sequence(dir);
    for (const auto& batch :
         make_pair_batches<T>(frames, annotations, cfg.pair_stride, cfg.batch_size)) {
      DetectionSet ds = run_inference(model, store, batch);
      for (size_t b = 0; b < ds.per_image.size(); ++b) {
        dets.push_back(std::move(ds.per_image[b]));
        gts.push_back(batch.annotations[b]);
      }
    }
  }
  EvalReport report = evaluate(dets, gts, cfg.eval);
  if (dets_out) *dets_out = std::move(dets);
  return report;
}

// Two-stage training over every sequence under data_root. Appends one JSONL
// record per epoch to metrics_path. Pass a checkpoint to resume from its
// epoch counter; shuffling is keyed on (seed, epoch), so a resumed run sees
// the same batches an uninterrupted run would.
template <typename T>
Checkpoint<T> train(const RunConfig& cfg, const std::string& data_root,
                    const std::string& metrics_path, const Checkpoint<T>* resume = nullptr,
                    const StepCallback& on_step = nullptr) {
  cfg.validate();
  const std::vector<std::string> seq_dirs = list_sequence_dirs(data_root);
  // Decoded once up front; re-reading every epoch would dominate the step time.
  std::vector<std::pair<std::vector<Frame>, std::vector<Annotation>>> sequences;
  sequences.reserve(seq_dirs.size());
  for (const std::string& dir : seq_dirs) sequences.push_back(load_sequence(dir));
  Model<T> model(cfg.model);

  Checkpoint<T> ckpt;
  ckpt.config = to_json(cfg);
  if (resume) {
    ckpt = *resume;
  } else {
    model.register_params(ckpt.params, cfg.seed);
  }

  std::ofstream metrics(metrics_path, resume ? std::ios::app : std::ios::out);
  if (!metrics) throw std::runtime_error("cannot open metrics log: " + metrics_path);

  const int stage1_epochs = static_cast<int>(std::lround(cfg.epochs * cfg.stage1_fraction));
  for (int epoch = ckpt.epoch; epoch < cfg.epochs; ++epoch) {
    const int stage = epoch < stage1_epochs ? 1 : 2;
    train_detail::apply_stage(ckpt.params, cfg, stage);
    const double lr = learning_rate(cfg.optimizer, epoch);

    double sum_heat = 0, sum_off = 0, sum_size = 0, sum_total = 0;
    int steps = 0;
    for (size_t si = 0; si < sequences.size(); ++si) {
      const auto& [frames, annotations] = sequences[si];
      const std::uint64_t shuffle_seed =
          cfg.seed ^ (static_cast<std::uint64_t>(epoch) * 0x9e3779b97f4a7c15ull + si);
      for (const auto& batch : make_pair_batches<T>(frames, annotations, cfg.pair_stride,
                                                    cfg.batch_size, true, shuffle_seed)) {
        Tape<T> tp;
        VarMap<T> vm = VarMap<T>::bind(tp, ckpt.params);
        Var past = tp.leaf(batch.past);
        Var current = tp.leaf(batch.current);
        auto fwd = model.forward(tp, vm, past, current);

        HeatmapTargets<T> tg = encode_targets<T>(batch.annotations, batch.current.dim(3),
                                                 batch.current.dim(2), cfg.model.head.num_classes);
        Var l_heat = heatmap_focal_loss(tp, fwd.outputs.heatmap, tg.heatmap, tg.num_centers,
                                        static_cast<T>(cfg.model.loss.epsilon),
                                        static_cast<T>(cfg.model.loss.zeta));
        Var l_off = offset_loss(tp, fwd.outputs.offset, tg);
        Var l_size = size_loss(tp, fwd.outputs.size, tg);
        Var l_total = total_loss(tp, l_heat, l_size, l_off, cfg.model.loss);

        train_detail::check_finite(tp.val(l_heat)[0], "heatmap loss", epoch, steps);
        train_detail::check_finite(tp.val(l_off)[0], "offset loss", epoch, steps);
        train_detail::check_finite(tp.val(l_size)[0], "size loss", epoch, steps);

        tp.backward(l_total);

        std::vector<Tensor<T>*> grads;
        std::vector<Tensor<T>> zero_grads;  // stable storage for absent gradients
        zero_grads.reserve(ckpt.params.size());
        for (auto& e : ckpt.params.entries()) {
          if (e.frozen) continue;
          Var v = vm(e.name);
          if (tp.has_grad(v)) {
            grads.push_back(&tp.grad(v));
          } else {
            zero_grads.push_back(Tensor<T>::zeros_like(e.value));
            grads.push_back(&zero_grads.back());
          }
        }
        clip_gradients(grads, cfg.optimizer.clip_norm);
        adam_step(ckpt.params, grads, lr, ++ckpt.adam_step);

        const double lt = tp.val(l_total)[0];
        sum_heat += tp.val(l_heat)[0];
        sum_off += tp.val(l_off)[0];
        sum_size += tp.val(l_size)[0];
        sum_total += lt;
        if (on_step) on_step(StepRecord{epoch, steps, lt});
        ++steps;
      }
    }

    nlohmann::json rec{{"epoch", epoch},
                       {"stage", stage},
                       {"lr", lr},
                       {"steps", steps},
                       {"loss_heatmap", sum_heat / std::max(steps, 1)},
                       {"loss_offset", sum_off / std::max(steps, 1)},
                       {"loss_size", sum_size / std::max(steps, 1)},
                       {"loss_total", sum_total / std::max(steps, 1)}};
    const bool eval_now =
        !cfg.eval_data.empty() &&
        ((cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) || epoch + 1 == cfg.epochs);
    if (eval_now) rec["eval"] = to_json(evaluate_model(model, ckpt.params, cfg.eval_data, cfg));
    metrics << rec.dump() << "\n" << std::flush;
    ckpt.epoch = epoch + 1;
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation
// ---------------------------------------------------------------------------

template <typename T>
EvalReport evaluate_checkpoint(const Checkpoint<T>& ckpt, const std::string& data_root,
                               const std::string& detections_path = "") {
  RunConfig cfg = run_config_from_json(ckpt.config);
  Model<T> model(cfg.model);
  std::vector<std::vector<Detection>> dets;
  // evaluate_model reads parameter values only; the const_cast never mutates.
  EvalReport report = evaluate_model(model, const_cast<ParamStore<T>&>(ckpt.params), data_root,
                                     cfg, detections_path.empty() ? nullptr : &dets);
  if (!detections_path.empty()) write_detections(detections_path, dets);
  return report;
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  EvalReport report;
};

// Module matrix (baseline / +SFA / +MFA / full) plus the fixed fusion
// strategies. The full dual-fusion run is reused as the "dual" row.
template <typename T>
std::vector<AblationRow> ablate(const RunConfig& base, const std::string& train_root,
                                const std::string& eval_root, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<AblationRow> rows;

  auto run = [&](const std::string& name, RunConfig cfg) {
    cfg.eval_data = eval_root;
    const std::string prefix = (fs::path(out_dir) / name).string();
    Checkpoint<T> ckpt = train<T>(cfg, train_root, prefix + ".metrics.jsonl");
    save_checkpoint(prefix + ".ckpt", ckpt);
    Model<T> model(cfg.model);
    rows.push_back({name, evaluate_model(model, ckpt.params, eval_root, cfg)});
  };

  {
    RunConfig c = base;
    c.model.use_mfa = false;
    c.model.use_sfa = false;
    run("baseline", c);
  }
  {
    RunConfig c = base;
    c.model.use_mfa = false;
    c.model.use_sfa = true;
    run("sfa", c);
  }
  {
    RunConfig c = base;
    c.model.use_mfa = true;
    c.model.use_sfa = false;
    run("mfa", c);
  }
  {
    RunConfig c = base;
    c.model.use_mfa = true;
    c.model.use_sfa = true;
    c.model.fusion.strategy = FusionStrategy::kDual;
    run("full", c);
  }
  for (FusionStrategy s : {FusionStrategy::kConcat, FusionStrategy::kMedian, FusionStrategy::kMean,
                           FusionStrategy::kMax}) {
    RunConfig c = base;
    c.model.use_mfa = true;
    c.model.use_sfa = true;
    c.model.fusion.strategy = s;
    run("fusion_" + to_string(s), c);
  }
  return rows;
}

inline nlohmann::json ablation_table_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const AblationRow& r : rows) {
    nlohmann::json j = to_json(r.report);
    j["variant"] = r.variant;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace stf
