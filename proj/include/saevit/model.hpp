#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "saevit/attention.hpp"
#include "saevit/blocks.hpp"

namespace saevit {

// Four-stage pyramid: conv stem (or 4x4 patchify), then per stage a patch
// embedding and depth x (LFE -> attention -> FFN) blocks, then norm, global
// average pooling and a linear classifier.

struct StageConfig {
  std::int64_t channels = 0;
  int heads = 1;
  int sr = 1;
  int depth = 1;
};

enum class AttnKind { kSaa, kSra };
const char* attn_kind_name(AttnKind k);
AttnKind attn_kind_from_name(const std::string& name);

struct ModelToggles {
  bool use_stem = true;
  bool use_lfe = true;
  AttnKind attn = AttnKind::kSaa;
  FfnKind ffn = FfnKind::kCiFfn;
};

struct ModelConfig {
  std::string name = "custom";
  std::int64_t stem_channels = 24;
  std::array<StageConfig, 4> stages{};
  double expansion_ratio = 4.125;
  int num_classes = 1000;
  ModelToggles toggles;
};

/// Known presets: "t", "xs" (the two published variants) and "tiny"
/// (training-smoke scale, 32x32 inputs).
ModelConfig make_variant(const std::string& name);
void validate_config(const ModelConfig& cfg);
std::int64_t expanded_channels(const ModelConfig& cfg, std::int64_t c);

ModelConfig model_config_from_json_text(const std::string& text);
ModelConfig load_model_config(const std::string& path);
std::string model_config_to_json_text(const ModelConfig& cfg);

template <typename T>
struct SaeBlockParamsT {
  bool use_lfe = true;
  LfeParamsT<T> lfe;
  AttnKind attn_kind = AttnKind::kSaa;
  SaaParamsT<T> saa;  // populated iff attn_kind == kSaa
  SraParamsT<T> sra;  // populated iff attn_kind == kSra
  FfnParamsT<T> ffn;
};

template <typename T>
struct ModelParamsT {
  ModelConfig cfg;
  ConvStemParamsT<T> stem;  // populated iff cfg.toggles.use_stem
  std::array<PatchEmbedParamsT<T>, 4> embed;
  std::array<std::vector<SaeBlockParamsT<T>>, 4> stages;
  LayerNormParamsT<T> head_norm;
  TensorT<T> fc_w, fc_b;
};

using ModelParams = ModelParamsT<float>;

template <typename T>
ModelParamsT<T> build_model(const ModelConfig& cfg, RngState& rng);

struct ForwardTrace {
  Shape stem_out;
  std::array<Shape, 4> stage_out;
  std::array<std::int64_t, 4> attn_tokens{};  // token count inside each stage's attention
};

/// capture_stage in 1..4 copies that stage's final activation into *capture
/// without touching the forward result; 0 disables capture.
template <typename T>
TensorT<T> model_forward(const TensorT<T>& x, const ModelParamsT<T>& p,
                         ForwardTrace* trace = nullptr, int capture_stage = 0,
                         TensorT<T>* capture = nullptr);

template <typename T>
TensorT<T> capture_activations(const TensorT<T>& x, const ModelParamsT<T>& p, int stage = 3);

template <typename T>
struct SaeBlockCacheT {
  LfeCacheT<T> lfe;
  SaaCacheT<T> saa;
  SraCacheT<T> sra;
  FfnCacheT<T> ffn;
};

template <typename T>
struct ModelCacheT {
  TensorT<T> x;
  ConvStemCacheT<T> stem;
  std::array<PatchEmbedCacheT<T>, 4> embed;
  std::array<std::vector<SaeBlockCacheT<T>>, 4> blocks;
  TensorT<T> stage4_out;  // input to the head norm
  TensorT<T> normed;      // input to global average pooling
  TensorT<T> pooled;      // (N,C) input to the classifier
};

template <typename T>
TensorT<T> model_forward_cached(const TensorT<T>& x, const ModelParamsT<T>& p,
                                ModelCacheT<T>& cache);
template <typename T>
void model_backward(const TensorT<T>& dlogits, const ModelCacheT<T>& cache,
                    const ModelParamsT<T>& p, ModelParamsT<T>& grads);

template <typename T>
ModelParamsT<T> zeros_like(const ModelParamsT<T>& p);

// ---- parameter accounting ----
struct ParamCount {
  std::int64_t total = 0;
  std::vector<std::pair<std::string, std::int64_t>> per_tensor;
};
template <typename T>
ParamCount count_params(ModelParamsT<T>& p);
/// Sums per-tensor counts by the first `depth` dot-separated name components.
std::map<std::string, std::int64_t> rollup(const ParamCount& count, int depth);

// ---- optimizer ----
template <typename T>
struct SgdStateT {
  std::vector<std::vector<T>> velocity;  // aligned with collect order
};
/// Momentum SGD, in place: v = mu*v + g; p -= lr*v.
template <typename T>
void sgd_step(ModelParamsT<T>& params, ModelParamsT<T>& grads, SgdStateT<T>& state, T lr,
              T momentum);

// ---- training smoke ----
template <typename T>
struct SmokeDatasetT {
  TensorT<T> x;  // (n, 3, hw, hw)
  std::vector<int> labels;
};
template <typename T>
SmokeDatasetT<T> make_smoke_dataset(std::int64_t n, int num_classes, std::int64_t hw,
                                    RngState& rng);
/// Full-batch forward/backward/sgd loop; returns the per-step loss (taken
/// before each update). Throws TrainingError naming the step on NaN loss.
template <typename T>
std::vector<T> train_smoke(ModelParamsT<T>& params, const SmokeDatasetT<T>& data, int steps, T lr,
                           T momentum);

// ---- checkpoints (manifest.json + one .sat file per tensor) ----
void save_checkpoint(ModelParams& params, const std::string& dir);
ModelParams load_checkpoint(const std::string& dir);

// ---- visitation ----
template <typename T, typename Fn>
void visit_params(SaeBlockParamsT<T>& p, const std::string& prefix, Fn&& fn) {
  if (p.use_lfe) visit_params(p.lfe, prefix + ".lfe", fn);
  if (p.attn_kind == AttnKind::kSaa) {
    visit_params(p.saa, prefix + ".attn", fn);
  } else {
    visit_params(p.sra, prefix + ".attn", fn);
  }
  visit_params(p.ffn, prefix + ".ffn", fn);
}

template <typename T, typename Fn>
void visit_params(ModelParamsT<T>& p, Fn&& fn) {
  if (p.cfg.toggles.use_stem) visit_params(p.stem, "stem", fn);
  for (int s = 0; s < 4; ++s) {
    const std::string sp = "stage" + std::to_string(s + 1);
    visit_params(p.embed[static_cast<std::size_t>(s)], sp + ".embed", fn);
    auto& blocks = p.stages[static_cast<std::size_t>(s)];
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      visit_params(blocks[b], sp + ".block" + std::to_string(b), fn);
    }
  }
  visit_params(p.head_norm, "head.norm", fn);
  fn(std::string("head.fc.w"), p.fc_w);
  fn(std::string("head.fc.b"), p.fc_b);
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>*>> collect_params(ModelParamsT<T>& p) {
  std::vector<std::pair<std::string, TensorT<T>*>> out;
  visit_params(p, [&](const std::string& name, TensorT<T>& t) { out.emplace_back(name, &t); });
  return out;
}

}  // namespace saevit
