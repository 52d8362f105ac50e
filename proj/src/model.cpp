#include "saevit/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace saevit {

using nlohmann::json;

const char* attn_kind_name(AttnKind k) { return k == AttnKind::kSaa ? "saa" : "sra"; }

AttnKind attn_kind_from_name(const std::string& name) {
  if (name == "saa") return AttnKind::kSaa;
  if (name == "sra") return AttnKind::kSra;
  throw ConfigError("unknown attention kind '" + name + "' (expected saa|sra)");
}

ModelConfig make_variant(const std::string& name) {
  ModelConfig cfg;
  cfg.name = name;
  if (name == "t") {
    cfg.stem_channels = 24;
    cfg.stages = {StageConfig{48, 2, 8, 1}, StageConfig{96, 4, 4, 1}, StageConfig{192, 8, 2, 3},
                  StageConfig{384, 16, 1, 2}};
  } else if (name == "xs") {
    cfg.stem_channels = 24;
    cfg.stages = {StageConfig{48, 2, 8, 1}, StageConfig{96, 4, 4, 2}, StageConfig{192, 8, 2, 5},
                  StageConfig{384, 16, 1, 3}};
  } else if (name == "tiny") {
    // training-smoke scale: 32x32 inputs, stage maps 8,4,2,1
    cfg.stem_channels = 8;
    cfg.stages = {StageConfig{16, 2, 2, 1}, StageConfig{32, 2, 2, 1}, StageConfig{64, 4, 1, 1},
                  StageConfig{128, 4, 1, 1}};
    cfg.expansion_ratio = 2.0;
    cfg.num_classes = 4;
  } else {
    throw ConfigError("unknown variant '" + name + "' (expected t|xs|tiny)");
  }
  validate_config(cfg);
  return cfg;
}

std::int64_t expanded_channels(const ModelConfig& cfg, std::int64_t c) {
  const double ce = cfg.expansion_ratio * static_cast<double>(c);
  const std::int64_t rounded = static_cast<std::int64_t>(std::llround(ce));
  if (std::abs(ce - static_cast<double>(rounded)) > 1e-9 || rounded < 1) {
    throw ConfigError("expansion_ratio " + std::to_string(cfg.expansion_ratio) +
                      " does not give integral channels for C=" + std::to_string(c));
  }
  return rounded;
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.stem_channels < 1) throw ConfigError("stem_channels must be positive");
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be at least 2");
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[static_cast<std::size_t>(s)];
    const std::string where = "stage " + std::to_string(s + 1);
    if (st.channels < 1) throw ConfigError(where + ": channels must be positive");
    if (st.depth < 1) throw ConfigError(where + ": depth must be at least 1");
    if (st.heads < 1 || st.channels % st.heads != 0) {
      throw ConfigError(where + ": channels " + std::to_string(st.channels) +
                        " not divisible by heads " + std::to_string(st.heads));
    }
    if (st.sr < 1) throw ConfigError(where + ": sr must be positive");
    expanded_channels(cfg, st.channels);  // throws if fractional
  }
}

// --------------------------------------------------------------- config io

namespace {

StageConfig stage_from_json(const json& j, int idx) {
  const std::string where = "stages[" + std::to_string(idx) + "]";
  for (const char* key : {"channels", "heads", "sr", "depth"}) {
    if (!j.contains(key)) throw ConfigError("config missing key '" + where + "." + key + "'");
  }
  StageConfig st;
  st.channels = j.at("channels").get<std::int64_t>();
  st.heads = j.at("heads").get<int>();
  st.sr = j.at("sr").get<int>();
  st.depth = j.at("depth").get<int>();
  return st;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  if (j.contains("variant")) {
    cfg = make_variant(j.at("variant").get<std::string>());
  } else {
    if (!j.contains("stages")) throw ConfigError("config missing key 'stages' (or 'variant')");
    if (!j.contains("stem_channels")) throw ConfigError("config missing key 'stem_channels'");
    const auto& stages = j.at("stages");
    if (!stages.is_array() || stages.size() != 4) {
      throw ConfigError("config key 'stages' must be an array of exactly 4 stages");
    }
    for (int s = 0; s < 4; ++s) {
      cfg.stages[static_cast<std::size_t>(s)] = stage_from_json(stages.at(static_cast<std::size_t>(s)), s);
    }
    cfg.stem_channels = j.at("stem_channels").get<std::int64_t>();
    cfg.name = j.value("name", std::string("custom"));
  }
  if (j.contains("expansion_ratio")) cfg.expansion_ratio = j.at("expansion_ratio").get<double>();
  if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int>();
  if (j.contains("toggles")) {
    const auto& t = j.at("toggles");
    cfg.toggles.use_stem = t.value("use_stem", cfg.toggles.use_stem);
    cfg.toggles.use_lfe = t.value("use_lfe", cfg.toggles.use_lfe);
    if (t.contains("attn")) cfg.toggles.attn = attn_kind_from_name(t.at("attn").get<std::string>());
    if (t.contains("ffn")) cfg.toggles.ffn = ffn_kind_from_name(t.at("ffn").get<std::string>());
  }
  validate_config(cfg);
  return cfg;
}

json config_to_json(const ModelConfig& cfg) {
  json stages = json::array();
  for (const auto& st : cfg.stages) {
    stages.push_back({{"channels", st.channels},
                      {"heads", st.heads},
                      {"sr", st.sr},
                      {"depth", st.depth}});
  }
  return json{{"name", cfg.name},
              {"stem_channels", cfg.stem_channels},
              {"stages", stages},
              {"expansion_ratio", cfg.expansion_ratio},
              {"num_classes", cfg.num_classes},
              {"toggles",
               {{"use_stem", cfg.toggles.use_stem},
                {"use_lfe", cfg.toggles.use_lfe},
                {"attn", attn_kind_name(cfg.toggles.attn)},
                {"ffn", ffn_kind_name(cfg.toggles.ffn)}}}};
}

}  // namespace

ModelConfig model_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return model_config_from_json_text(text);
}

std::string model_config_to_json_text(const ModelConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

// ------------------------------------------------------------------ build

template <typename T>
ModelParamsT<T> build_model(const ModelConfig& cfg, RngState& rng) {
  validate_config(cfg);
  ModelParamsT<T> p;
  p.cfg = cfg;
  std::int64_t cin = 3;
  if (cfg.toggles.use_stem) {
    p.stem = make_conv_stem<T>(cfg.stem_channels, rng);
    cin = cfg.stem_channels;
  }
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[static_cast<std::size_t>(s)];
    const std::int64_t ce = expanded_channels(cfg, st.channels);
    // Stemless models patchify 4x4 directly into stage 1 so the stage
    // geometry matches the stem+embed pipeline.
    if (s == 0 && !cfg.toggles.use_stem) {
      p.embed[0] = make_patch_embed<T>(3, st.channels, 4, 4, 0, rng);
    } else {
      p.embed[static_cast<std::size_t>(s)] = make_patch_embed<T>(cin, st.channels, 3, 2, 1, rng);
    }
    auto& blocks = p.stages[static_cast<std::size_t>(s)];
    blocks.resize(static_cast<std::size_t>(st.depth));
    for (auto& blk : blocks) {
      blk.use_lfe = cfg.toggles.use_lfe;
      if (blk.use_lfe) blk.lfe = make_lfe<T>(st.channels, rng);
      blk.attn_kind = cfg.toggles.attn;
      if (blk.attn_kind == AttnKind::kSaa) {
        blk.saa = make_saa<T>(st.channels, st.heads, st.sr, rng);
      } else {
        blk.sra = make_sra<T>(st.channels, st.heads, st.sr, rng);
      }
      blk.ffn = make_ffn<T>(cfg.toggles.ffn, st.channels, ce, rng);
    }
    cin = st.channels;
  }
  p.head_norm = make_layer_norm<T>(cin);
  p.fc_w = TensorT<T>({cin, cfg.num_classes});
  fill_trunc_normal(p.fc_w, rng, 0.02);
  p.fc_b = TensorT<T>({cfg.num_classes});
  return p;
}

// ---------------------------------------------------------------- forward

namespace {

template <typename T>
void check_model_input(const TensorT<T>& x) {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw DimensionError("model input must be (N,3,H,W), got " + shape_str(x.shape()));
  }
}

void check_stage_geometry(int stage_idx, std::int64_t h, std::int64_t w, int sr) {
  if (h % sr != 0 || w % sr != 0) {
    throw DimensionError("stage " + std::to_string(stage_idx + 1) + ": feature map " +
                         std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by sr=" + std::to_string(sr));
  }
}

}  // namespace

template <typename T>
TensorT<T> model_forward(const TensorT<T>& x, const ModelParamsT<T>& p, ForwardTrace* trace,
                         int capture_stage, TensorT<T>* capture) {
  check_model_input(x);
  if (capture && (capture_stage < 1 || capture_stage > 4)) {
    throw ConfigError("capture stage must be in 1..4, got " + std::to_string(capture_stage));
  }
  TensorT<T> h = p.cfg.toggles.use_stem ? conv_stem_forward(x, p.stem) : x;
  if (trace) trace->stem_out = h.shape();
  for (int s = 0; s < 4; ++s) {
    const auto& st = p.cfg.stages[static_cast<std::size_t>(s)];
    h = patch_embed_forward(h, p.embed[static_cast<std::size_t>(s)]);
    check_stage_geometry(s, h.dim(2), h.dim(3), st.sr);
    if (trace) {
      trace->attn_tokens[static_cast<std::size_t>(s)] = (h.dim(2) / st.sr) * (h.dim(3) / st.sr);
    }
    for (const auto& blk : p.stages[static_cast<std::size_t>(s)]) {
      if (blk.use_lfe) h = lfe_forward(h, blk.lfe);
      h = blk.attn_kind == AttnKind::kSaa ? saa_forward(h, blk.saa) : sra_forward(h, blk.sra);
      h = ffn_forward(h, blk.ffn);
    }
    if (trace) trace->stage_out[static_cast<std::size_t>(s)] = h.shape();
    if (capture && capture_stage == s + 1) *capture = h;
  }
  h = layer_norm(h, p.head_norm.gamma, p.head_norm.beta, T(kLayerNormEps));
  TensorT<T> pooled = global_avg_pool(h);
  return linear(pooled, p.fc_w, &p.fc_b);
}

template <typename T>
TensorT<T> capture_activations(const TensorT<T>& x, const ModelParamsT<T>& p, int stage) {
  TensorT<T> captured;
  model_forward(x, p, nullptr, stage, &captured);
  return captured;
}

template <typename T>
TensorT<T> model_forward_cached(const TensorT<T>& x, const ModelParamsT<T>& p,
                                ModelCacheT<T>& cache) {
  check_model_input(x);
  cache.x = x;
  TensorT<T> h = p.cfg.toggles.use_stem ? conv_stem_forward_cached(x, p.stem, cache.stem) : x;
  for (int s = 0; s < 4; ++s) {
    const auto& st = p.cfg.stages[static_cast<std::size_t>(s)];
    h = patch_embed_forward_cached(h, p.embed[static_cast<std::size_t>(s)],
                                   cache.embed[static_cast<std::size_t>(s)]);
    check_stage_geometry(s, h.dim(2), h.dim(3), st.sr);
    auto& blocks = p.stages[static_cast<std::size_t>(s)];
    auto& bcaches = cache.blocks[static_cast<std::size_t>(s)];
    bcaches.resize(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& blk = blocks[b];
      auto& bc = bcaches[b];
      if (blk.use_lfe) h = lfe_forward_cached(h, blk.lfe, bc.lfe);
      h = blk.attn_kind == AttnKind::kSaa ? saa_forward_cached(h, blk.saa, bc.saa)
                                          : sra_forward_cached(h, blk.sra, bc.sra);
      h = ffn_forward_cached(h, blk.ffn, bc.ffn);
    }
  }
  cache.stage4_out = h;
  cache.normed = layer_norm(h, p.head_norm.gamma, p.head_norm.beta, T(kLayerNormEps));
  cache.pooled = global_avg_pool(cache.normed);
  return linear(cache.pooled, p.fc_w, &p.fc_b);
}

template <typename T>
void model_backward(const TensorT<T>& dlogits, const ModelCacheT<T>& cache,
                    const ModelParamsT<T>& p, ModelParamsT<T>& grads) {
  TensorT<T> dpooled = zeros_like(cache.pooled);
  linear_backward(cache.pooled, p.fc_w, dlogits, &dpooled, &grads.fc_w, &grads.fc_b);
  TensorT<T> dnormed = global_avg_pool_backward(dpooled, cache.normed.shape());
  TensorT<T> dh = zeros_like(cache.stage4_out);
  layer_norm_backward(cache.stage4_out, p.head_norm.gamma, T(kLayerNormEps), dnormed, &dh,
                      &grads.head_norm.gamma, &grads.head_norm.beta);
  for (int s = 3; s >= 0; --s) {
    const auto& blocks = p.stages[static_cast<std::size_t>(s)];
    const auto& bcaches = cache.blocks[static_cast<std::size_t>(s)];
    auto& bgrads = grads.stages[static_cast<std::size_t>(s)];
    for (std::size_t bi = blocks.size(); bi-- > 0;) {
      const auto& blk = blocks[bi];
      const auto& bc = bcaches[bi];
      auto& bg = bgrads[bi];
      dh = ffn_backward(dh, bc.ffn, blk.ffn, bg.ffn);
      dh = blk.attn_kind == AttnKind::kSaa ? saa_backward(dh, bc.saa, blk.saa, bg.saa)
                                           : sra_backward(dh, bc.sra, blk.sra, bg.sra);
      if (blk.use_lfe) dh = lfe_backward(dh, bc.lfe, blk.lfe, bg.lfe);
    }
    dh = patch_embed_backward(dh, cache.embed[static_cast<std::size_t>(s)],
                              p.embed[static_cast<std::size_t>(s)],
                              grads.embed[static_cast<std::size_t>(s)]);
  }
  if (p.cfg.toggles.use_stem) {
    conv_stem_backward(dh, cache.stem, p.stem, grads.stem);
  }
}

template <typename T>
SaeBlockParamsT<T> zeros_like(const SaeBlockParamsT<T>& p) {
  SaeBlockParamsT<T> g;
  g.use_lfe = p.use_lfe;
  g.lfe = zeros_like(p.lfe);
  g.attn_kind = p.attn_kind;
  g.saa = zeros_like(p.saa);
  g.sra = zeros_like(p.sra);
  g.ffn = zeros_like(p.ffn);
  return g;
}

template <typename T>
ModelParamsT<T> zeros_like(const ModelParamsT<T>& p) {
  ModelParamsT<T> g;
  g.cfg = p.cfg;
  g.stem = zeros_like(p.stem);
  for (int s = 0; s < 4; ++s) {
    g.embed[static_cast<std::size_t>(s)] = zeros_like(p.embed[static_cast<std::size_t>(s)]);
    const auto& blocks = p.stages[static_cast<std::size_t>(s)];
    auto& gb = g.stages[static_cast<std::size_t>(s)];
    gb.reserve(blocks.size());
    for (const auto& blk : blocks) gb.push_back(zeros_like(blk));
  }
  g.head_norm = zeros_like(p.head_norm);
  g.fc_w = zeros_like(p.fc_w);
  g.fc_b = zeros_like(p.fc_b);
  return g;
}

// ------------------------------------------------------------- accounting

template <typename T>
ParamCount count_params(ModelParamsT<T>& p) {
  ParamCount out;
  visit_params(p, [&](const std::string& name, TensorT<T>& t) {
    out.per_tensor.emplace_back(name, t.numel());
    out.total += t.numel();
  });
  return out;
}

std::map<std::string, std::int64_t> rollup(const ParamCount& count, int depth) {
  std::map<std::string, std::int64_t> out;
  for (const auto& [name, n] : count.per_tensor) {
    std::string key = name;
    int dots = 0;
    for (std::size_t i = 0; i < name.size(); ++i) {
      if (name[i] == '.' && ++dots == depth) {
        key = name.substr(0, i);
        break;
      }
    }
    out[key] += n;
  }
  return out;
}

// --------------------------------------------------------------- optimizer

template <typename T>
void sgd_step(ModelParamsT<T>& params, ModelParamsT<T>& grads, SgdStateT<T>& state, T lr,
              T momentum) {
  auto ps = collect_params(params);
  auto gs = collect_params(grads);
  if (ps.size() != gs.size()) {
    throw StateError("sgd_step: gradient bundle does not match parameters");
  }
  if (state.velocity.empty()) {
    state.velocity.resize(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      state.velocity[i].assign(static_cast<std::size_t>(ps[i].second->numel()), T(0));
    }
  }
  if (state.velocity.size() != ps.size()) {
    throw StateError("sgd_step: optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    TensorT<T>& pv = *ps[i].second;
    TensorT<T>& gv = *gs[i].second;
    if (!gv.defined() || !same_shape(gv.shape(), pv.shape())) {
      throw StateError("sgd_step: missing or mismatched gradient for " + ps[i].first);
    }
    auto& vel = state.velocity[i];
    for (std::int64_t j = 0; j < pv.numel(); ++j) {
      vel[static_cast<std::size_t>(j)] = momentum * vel[static_cast<std::size_t>(j)] + gv[j];
      pv[j] -= lr * vel[static_cast<std::size_t>(j)];
    }
  }
}

// ------------------------------------------------------------ smoke train

template <typename T>
SmokeDatasetT<T> make_smoke_dataset(std::int64_t n, int num_classes, std::int64_t hw,
                                    RngState& rng) {
  SmokeDatasetT<T> data;
  data.x = TensorT<T>({n, 3, hw, hw});
  data.labels.resize(static_cast<std::size_t>(n));
  // Class-dependent channel means, Gaussian noise around them.
  std::vector<double> means(static_cast<std::size_t>(num_classes) * 3);
  for (auto& m : means) m = rng.normal();
  const std::int64_t plane = hw * hw;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % num_classes);
    data.labels[static_cast<std::size_t>(i)] = label;
    for (std::int64_t c = 0; c < 3; ++c) {
      const double mu = means[static_cast<std::size_t>(label * 3 + c)];
      T* xp = data.x.ptr() + (i * 3 + c) * plane;
      for (std::int64_t j = 0; j < plane; ++j) {
        xp[j] = static_cast<T>(mu + 0.5 * rng.normal());
      }
    }
  }
  return data;
}

template <typename T>
std::vector<T> train_smoke(ModelParamsT<T>& params, const SmokeDatasetT<T>& data, int steps, T lr,
                           T momentum) {
  std::vector<T> losses;
  losses.reserve(static_cast<std::size_t>(steps));
  SgdStateT<T> state;
  for (int step = 0; step < steps; ++step) {
    ModelCacheT<T> cache;
    TensorT<T> logits = model_forward_cached(data.x, params, cache);
    const T loss = cross_entropy(logits, data.labels);
    if (!std::isfinite(static_cast<double>(loss))) {
      throw TrainingError("training diverged (non-finite loss) at step " + std::to_string(step));
    }
    losses.push_back(loss);
    TensorT<T> dlogits = cross_entropy_backward(logits, data.labels);
    ModelParamsT<T> grads = zeros_like(params);
    model_backward(dlogits, cache, params, grads);
    sgd_step(params, grads, state, lr, momentum);
  }
  return losses;
}

// ------------------------------------------------------------- checkpoints

void save_checkpoint(ModelParams& params, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint dir: " + dir);
  json manifest;
  manifest["config"] = json::parse(model_config_to_json_text(params.cfg));
  json tensors = json::array();
  visit_params(params, [&](const std::string& name, Tensor& t) {
    const std::string file = name + ".sat";
    save_sat(t, (fs::path(dir) / file).string());
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  });
  manifest["tensors"] = tensors;
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

ModelParams load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("cannot open checkpoint manifest in " + dir);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& e) {
    throw IoError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (!manifest.contains("config")) throw IoError("checkpoint manifest missing 'config'");
  const ModelConfig cfg = model_config_from_json_text(manifest.at("config").dump());
  RngState rng(0);
  ModelParams params = build_model<float>(cfg, rng);
  std::map<std::string, json> listed;
  for (const auto& t : manifest.at("tensors")) {
    listed[t.at("name").get<std::string>()] = t;
  }
  visit_params(params, [&](const std::string& name, Tensor& t) {
    auto it = listed.find(name);
    if (it == listed.end()) throw IoError("checkpoint missing tensor " + name);
    Tensor loaded = load_sat((fs::path(dir) / it->second.at("file").get<std::string>()).string());
    if (!same_shape(loaded.shape(), t.shape())) {
      throw IoError("checkpoint tensor " + name + " has shape " + shape_str(loaded.shape()) +
                    ", expected " + shape_str(t.shape()));
    }
    t = std::move(loaded);
  });
  return params;
}

#define SAEVIT_INSTANTIATE_MODEL(T)                                                              \
  template ModelParamsT<T> build_model<T>(const ModelConfig&, RngState&);                        \
  template TensorT<T> model_forward<T>(const TensorT<T>&, const ModelParamsT<T>&,                \
                                       ForwardTrace*, int, TensorT<T>*);                         \
  template TensorT<T> capture_activations<T>(const TensorT<T>&, const ModelParamsT<T>&, int);    \
  template TensorT<T> model_forward_cached<T>(const TensorT<T>&, const ModelParamsT<T>&,         \
                                              ModelCacheT<T>&);                                  \
  template void model_backward<T>(const TensorT<T>&, const ModelCacheT<T>&,                      \
                                  const ModelParamsT<T>&, ModelParamsT<T>&);                     \
  template SaeBlockParamsT<T> zeros_like<T>(const SaeBlockParamsT<T>&);                          \
  template ModelParamsT<T> zeros_like<T>(const ModelParamsT<T>&);                                \
  template ParamCount count_params<T>(ModelParamsT<T>&);                                         \
  template void sgd_step<T>(ModelParamsT<T>&, ModelParamsT<T>&, SgdStateT<T>&, T, T);            \
  template SmokeDatasetT<T> make_smoke_dataset<T>(std::int64_t, int, std::int64_t, RngState&);   \
  template std::vector<T> train_smoke<T>(ModelParamsT<T>&, const SmokeDatasetT<T>&, int, T, T);

SAEVIT_INSTANTIATE_MODEL(float)
SAEVIT_INSTANTIATE_MODEL(double)

}  // namespace saevit
