#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stf/eval.hpp"
#include "stf/model.hpp"

namespace stf {

struct OptimizerConfig {
  double lr0 = 1e-4;
  std::vector<int> decay_epochs = {25, 32};
  double decay_factor = 10.0;
  double clip_norm = 5.0;
};

// Full experiment description. Serialized as JSON with dotted keys
// ("mfa.reduction_ratio"); nested objects are accepted on input too.
struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  EvalConfig eval;
  int epochs = 40;
  double stage1_fraction = 0.5;  // share of epochs before the attention stage
  std::vector<int> freeze_stages = {0, 2};  // backbone stages frozen in stage 2
  int batch_size = 8;
  int pair_stride = 1;
  int eval_every = 0;  // 0: only at the end
  std::uint64_t seed = 0;
  std::string train_data, eval_data;  // optional; CLI flags take precedence

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (pair_stride < 1) throw std::invalid_argument("config: pair_stride must be >= 1");
    if (optimizer.clip_norm <= 0) throw std::invalid_argument("config: clip norm must be > 0");
    if (stage1_fraction < 0 || stage1_fraction > 1)
      throw std::invalid_argument("config: stage1_fraction must lie in [0,1]");
    for (size_t i = 0; i < optimizer.decay_epochs.size(); ++i) {
      const int d = optimizer.decay_epochs[i];
      if (d >= epochs) throw std::invalid_argument("config: decay epoch past total epochs");
      if (i > 0 && d <= optimizer.decay_epochs[i - 1])
        throw std::invalid_argument("config: decay epochs must be strictly increasing");
    }
    for (int s : freeze_stages)
      if (s < 0 || s > 3) throw std::invalid_argument("config: freeze stage out of range");
  }
};

namespace config_detail {

// Dotted-key lookup: prefers the literal flat key, then the nested path.
inline const nlohmann::json* find(const nlohmann::json& j, const std::string& key) {
  if (auto it = j.find(key); it != j.end()) return &*it;
  const nlohmann::json* cur = &j;
  size_t pos = 0;
  while (pos < key.size()) {
    const size_t dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    auto it = cur->find(part);
    if (it == cur->end() || (dot != std::string::npos && !it->is_object())) return nullptr;
    cur = &*it;
    if (dot == std::string::npos) return cur;
    pos = dot + 1;
  }
  return nullptr;
}

template <typename V>
void get(const nlohmann::json& j, const std::string& key, V& out) {
  if (const nlohmann::json* v = find(j, key)) out = v->template get<V>();
}

}  // namespace config_detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["use_mfa"] = c.model.use_mfa;
  j["use_sfa"] = c.model.use_sfa;
  j["backbone_channels"] = c.model.backbone_channels;
  j["fusion_strategy"] = to_string(c.model.fusion.strategy);
  j["mfa.reduction_ratio"] = c.model.mfa.reduction_ratio;
  j["mfa.literal_eq3"] = c.model.mfa.literal_eq3;
  j["mfa.kernel_size"] = c.model.mfa.kernel_size;
  j["sfa.reduction_ratio"] = c.model.sfa.reduction_ratio;
  j["sfa.literal_eq5"] = c.model.sfa.literal_eq5;
  j["fusion.channels"] = c.model.fusion.channels;
  j["fusion.num_sweeps"] = c.model.fusion.num_sweeps;
  j["fusion.deform_groups"] = c.model.fusion.deform_groups;
  j["head.num_classes"] = c.model.head.num_classes;
  j["head.hidden_channels"] = c.model.head.hidden_channels;
  j["head.top_k"] = c.model.head.top_k;
  j["head.score_threshold"] = c.model.head.score_threshold;
  j["loss.epsilon"] = c.model.loss.epsilon;
  j["loss.zeta"] = c.model.loss.zeta;
  j["loss.lambda_dim"] = c.model.loss.lambda_dim;
  j["loss.lambda_pos"] = c.model.loss.lambda_pos;
  j["eval.occlusion_threshold"] = c.eval.occlusion_threshold;
  j["eval.blur_threshold"] = c.eval.blur_threshold;
  j["optimizer.lr0"] = c.optimizer.lr0;
  j["optimizer.decay_epochs"] = c.optimizer.decay_epochs;
  j["optimizer.decay_factor"] = c.optimizer.decay_factor;
  j["optimizer.clip_norm"] = c.optimizer.clip_norm;
  j["epochs"] = c.epochs;
  j["stage1_fraction"] = c.stage1_fraction;
  j["freeze_stages"] = c.freeze_stages;
  j["batch_size"] = c.batch_size;
  j["pair_stride"] = c.pair_stride;
  j["eval_every"] = c.eval_every;
  j["seed"] = c.seed;
  if (!c.train_data.empty()) j["train_data"] = c.train_data;
  if (!c.eval_data.empty()) j["eval_data"] = c.eval_data;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using config_detail::get;
  RunConfig c;
  get(j, "use_mfa", c.model.use_mfa);
  get(j, "use_sfa", c.model.use_sfa);
  get(j, "backbone_channels", c.model.backbone_channels);
  if (const nlohmann::json* v = config_detail::find(j, "fusion_strategy"))
    c.model.fusion.strategy = fusion_strategy_from_string(v->get<std::string>());
  get(j, "mfa.reduction_ratio", c.model.mfa.reduction_ratio);
  get(j, "mfa.literal_eq3", c.model.mfa.literal_eq3);
  get(j, "mfa.kernel_size", c.model.mfa.kernel_size);
  get(j, "sfa.reduction_ratio", c.model.sfa.reduction_ratio);
  get(j, "sfa.literal_eq5", c.model.sfa.literal_eq5);
  get(j, "fusion.channels", c.model.fusion.channels);
  get(j, "fusion.num_sweeps", c.model.fusion.num_sweeps);
  get(j, "fusion.deform_groups", c.model.fusion.deform_groups);
  get(j, "head.num_classes", c.model.head.num_classes);
  get(j, "head.hidden_channels", c.model.head.hidden_channels);
  get(j, "head.top_k", c.model.head.top_k);
  get(j, "head.score_threshold", c.model.head.score_threshold);
  get(j, "loss.epsilon", c.model.loss.epsilon);
  get(j, "loss.zeta", c.model.loss.zeta);
  get(j, "loss.lambda_dim", c.model.loss.lambda_dim);
  get(j, "loss.lambda_pos", c.model.loss.lambda_pos);
  get(j, "eval.occlusion_threshold", c.eval.occlusion_threshold);
  get(j, "eval.blur_threshold", c.eval.blur_threshold);
  get(j, "optimizer.lr0", c.optimizer.lr0);
  get(j, "optimizer.decay_epochs", c.optimizer.decay_epochs);
  get(j, "optimizer.decay_factor", c.optimizer.decay_factor);
  get(j, "optimizer.clip_norm", c.optimizer.clip_norm);
  get(j, "epochs", c.epochs);
  get(j, "stage1_fraction", c.stage1_fraction);
  get(j, "freeze_stages", c.freeze_stages);
  get(j, "batch_size", c.batch_size);
  get(j, "pair_stride", c.pair_stride);
  get(j, "eval_every", c.eval_every);
  get(j, "seed", c.seed);
  get(j, "train_data", c.train_data);
  get(j, "eval_data", c.eval_data);
  c.validate();
  return c;
}

}  // namespace stf
