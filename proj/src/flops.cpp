#include "saevit/flops.hpp"

#include <sstream>

#include "json.hpp"

namespace saevit {

using nlohmann::json;

namespace {

const char* kConvention =
    "1 FLOP = 1 MAC for conv/linear/attention matmuls; norm(4/elem), "
    "GELU(8/elem), softmax(4/score), pooling(in+out), bias and residual(1/elem) "
    "tallied separately as elementwise ops";

struct Geom {
  std::int64_t n, c, h, w;
};

FlopLine conv_norm_act(const std::string& name, std::int64_t n, std::int64_t cin,
                       std::int64_t cout, std::int64_t hout, std::int64_t wout, std::int64_t k) {
  FlopLine line{name, 0, 0};
  const std::int64_t out = n * cout * hout * wout;
  line.macs = flops_conv2d(n, cout, hout, wout, cin, k, k);
  line.elementwise = out /*bias*/ + kEwLayerNorm * out + kEwGelu * out;
  return line;
}

// Attention core over pre-projected tokens: scores + aggregation matmuls,
// scale, softmax.
FlopLine attn_core_line(const std::string& name, std::int64_t n, int heads, std::int64_t lq,
                        std::int64_t lk, std::int64_t c) {
  FlopLine line{name, 0, 0};
  line.macs = flops_attention_core(n, lq, lk, c);
  const std::int64_t scores = n * heads * lq * lk;
  line.elementwise = scores /*scale*/ + kEwSoftmax * scores;
  return line;
}

// q/k/v/o projections given the token counts each projection runs on.
FlopLine attn_proj_line(const std::string& name, std::int64_t n, std::int64_t c, std::int64_t lq,
                        std::int64_t lkv) {
  FlopLine line{name, 0, 0};
  line.macs = flops_linear(n * lq, c, c) /*q*/ + 2 * flops_linear(n * lkv, c, c) /*k,v*/ +
              flops_linear(n * lq, c, c) /*o*/;
  line.elementwise = n * lq * c + 2 * n * lkv * c + n * lq * c;  // biases
  return line;
}

std::int64_t pool_ew(std::int64_t n, std::int64_t c, std::int64_t hin, std::int64_t win, int sr) {
  return n * c * (hin * win + (hin / sr) * (win / sr));
}

FlopLine lfe_line(const std::string& name, const Geom& g) {
  FlopLine line{name, 0, 0};
  const std::int64_t out = g.n * g.c * g.h * g.w;
  line.macs = flops_conv2d(g.n, g.c, g.h, g.w, 1, 3, 3);
  line.elementwise = out /*bias*/ + kEwGelu * out + out /*residual*/;
  return line;
}

FlopLine saa_line(const std::string& name, const Geom& g, int heads, int sr) {
  FlopLine line{name, 0, 0};
  const std::int64_t elems = g.n * g.c * g.h * g.w;
  const std::int64_t lp = (g.h / sr) * (g.w / sr);
  line.elementwise += kEwLayerNorm * elems;
  if (sr > 1) line.elementwise += pool_ew(g.n, g.c, g.h, g.w, sr);
  FlopLine proj = attn_proj_line("", g.n, g.c, lp, lp);
  FlopLine core = attn_core_line("", g.n, heads, lp, lp, g.c);
  line.macs += proj.macs + core.macs;
  line.elementwise += proj.elementwise + core.elementwise;
  if (sr > 1) {
    line.macs += flops_transposed_conv2d(g.n, g.c, g.h / sr, g.w / sr, 1, sr, sr);
    line.elementwise += elems;  // deconv bias
  }
  line.elementwise += elems;  // residual
  return line;
}

FlopLine sra_line(const std::string& name, const Geom& g, int heads, int sr) {
  FlopLine line{name, 0, 0};
  const std::int64_t elems = g.n * g.c * g.h * g.w;
  const std::int64_t l = g.h * g.w;
  const std::int64_t lk = (g.h / sr) * (g.w / sr);
  line.elementwise += kEwLayerNorm * elems;
  // K/V are projected at full resolution, then the projected maps are pooled.
  FlopLine proj = attn_proj_line("", g.n, g.c, l, l);
  FlopLine core = attn_core_line("", g.n, heads, l, lk, g.c);
  line.macs += proj.macs + core.macs;
  line.elementwise += proj.elementwise + core.elementwise;
  if (sr > 1) line.elementwise += 2 * pool_ew(g.n, g.c, g.h, g.w, sr);
  line.elementwise += elems;  // residual
  return line;
}

FlopLine window_line(const std::string& name, const Geom& g, int heads, int win) {
  FlopLine line{name, 0, 0};
  const std::int64_t elems = g.n * g.c * g.h * g.w;
  const std::int64_t l = g.h * g.w;
  const std::int64_t nwin = (g.h / win) * (g.w / win);
  const std::int64_t lw = std::int64_t(win) * win;
  line.elementwise += kEwLayerNorm * elems;
  FlopLine proj = attn_proj_line("", g.n, g.c, l, l);
  FlopLine core = attn_core_line("", g.n * nwin, heads, lw, lw, g.c);
  line.macs += proj.macs + core.macs;
  line.elementwise += proj.elementwise + core.elementwise;
  line.elementwise += elems;  // residual
  return line;
}

FlopLine mhsa_line(const std::string& name, const Geom& g, int heads) {
  return saa_line(name, g, heads, 1);  // structurally identical at sr == 1
}

FlopLine ffn_line(const std::string& name, const Geom& g, FfnKind kind, std::int64_t ce) {
  FlopLine line{name, 0, 0};
  const std::int64_t l = g.h * g.w;
  const std::int64_t elems = g.n * g.c * l;
  const std::int64_t eelems = g.n * ce * l;
  line.elementwise += kEwLayerNorm * elems;
  line.macs += flops_linear(g.n * l, g.c, ce);  // conv1 1x1
  line.elementwise += eelems;                  // conv1 bias
  if (kind != FfnKind::kFfn) {
    line.macs += flops_conv2d(g.n, ce, g.h, g.w, 1, 3, 3);  // depthwise
    line.elementwise += eelems;
  }
  line.elementwise += kEwGelu * eelems;
  if (kind == FfnKind::kCiFfn) {
    // FD: depthwise conv + y_c*(x+conv(x)) + x
    line.macs += flops_conv2d(g.n, ce, g.h, g.w, 1, 3, 3);
    line.elementwise += eelems /*bias*/ + 3 * eelems /*add, scale, add*/;
  }
  line.macs += flops_linear(g.n * l, ce, g.c);  // conv2 1x1
  line.elementwise += elems;                   // conv2 bias
  line.elementwise += elems;                   // residual
  return line;
}

}  // namespace

std::int64_t flops_conv2d(std::int64_t n, std::int64_t cout, std::int64_t hout, std::int64_t wout,
                          std::int64_t cin_per_group, std::int64_t kh, std::int64_t kw) {
  return n * cout * hout * wout * cin_per_group * kh * kw;
}

// Every input tap lands on (kh*kw)/group-share outputs; with k == stride the
// taps tile the output exactly.
std::int64_t flops_transposed_conv2d(std::int64_t n, std::int64_t cin, std::int64_t hin,
                                     std::int64_t win, std::int64_t cout_per_group,
                                     std::int64_t kh, std::int64_t kw) {
  return n * cin * hin * win * cout_per_group * kh * kw;
}

std::int64_t flops_linear(std::int64_t rows, std::int64_t cin, std::int64_t cout) {
  return rows * cin * cout;
}

// scores (lq x lk per head) plus value aggregation, summed over heads.
std::int64_t flops_attention_core(std::int64_t n, std::int64_t lq, std::int64_t lk,
                                  std::int64_t c) {
  return 2 * n * lq * lk * c;
}

void FlopReport::add(const FlopLine& line) {
  lines.push_back(line);
  total_macs += line.macs;
  total_elementwise += line.elementwise;
}

std::string FlopReport::to_text() const {
  std::ostringstream os;
  os << "flop report: " << config << "\n";
  os << "convention: " << convention << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-28s %16s %16s\n", "module", "macs", "elementwise");
  os << buf;
  for (const auto& line : lines) {
    std::snprintf(buf, sizeof(buf), "%-28s %16lld %16lld\n", line.name.c_str(),
                  static_cast<long long>(line.macs), static_cast<long long>(line.elementwise));
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-28s %16lld %16lld\n", "total",
                static_cast<long long>(total_macs), static_cast<long long>(total_elementwise));
  os << buf;
  std::snprintf(buf, sizeof(buf), "total (macs+elementwise): %lld\n",
                static_cast<long long>(total()));
  os << buf;
  return os.str();
}

std::string FlopReport::to_json_text() const {
  json lines_json = json::array();
  for (const auto& line : lines) {
    lines_json.push_back(
        {{"name", line.name}, {"macs", line.macs}, {"elementwise", line.elementwise}});
  }
  json j{{"config", config},
         {"convention", convention},
         {"lines", lines_json},
         {"total_macs", total_macs},
         {"total_elementwise", total_elementwise},
         {"total", total()}};
  return j.dump(2) + "\n";
}

FlopReport count_flops_model(const ModelConfig& cfg, std::int64_t n, std::int64_t h,
                             std::int64_t w) {
  validate_config(cfg);
  if (n < 1 || h < 4 || w < 4) throw DimensionError("count_flops_model: bad input shape");
  FlopReport report;
  report.convention = kConvention;
  report.config = "model " + cfg.name + " input (" + std::to_string(n) + ",3," +
                  std::to_string(h) + "," + std::to_string(w) + ")";

  std::int64_t ch = h, cw = w;
  if (cfg.toggles.use_stem) {
    const std::int64_t c1 = cfg.stem_channels;
    ch /= 2;
    cw /= 2;
    report.add(conv_norm_act("stem.conv0", n, 3, c1, ch, cw, 3));
    report.add(conv_norm_act("stem.conv1", n, c1, c1, ch, cw, 3));
    report.add(conv_norm_act("stem.conv2", n, c1, c1, ch, cw, 3));
  }
  std::int64_t cin = cfg.toggles.use_stem ? cfg.stem_channels : 3;
  for (int s = 0; s < 4; ++s) {
    const auto& st = cfg.stages[static_cast<std::size_t>(s)];
    const std::string sp = "stage" + std::to_string(s + 1);
    std::int64_t k = 3;
    if (s == 0 && !cfg.toggles.use_stem) {
      ch /= 4;
      cw /= 4;
      k = 4;
    } else {
      ch /= 2;
      cw /= 2;
    }
    {
      FlopLine embed{sp + ".embed", 0, 0};
      const std::int64_t out = n * st.channels * ch * cw;
      embed.macs = flops_conv2d(n, st.channels, ch, cw, cin, k, k);
      embed.elementwise = out /*bias*/ + kEwLayerNorm * out;
      report.add(embed);
    }
    const Geom g{n, st.channels, ch, cw};
    const std::int64_t ce = expanded_channels(cfg, st.channels);
    for (int b = 0; b < st.depth; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      if (cfg.toggles.use_lfe) report.add(lfe_line(bp + ".lfe", g));
      report.add(cfg.toggles.attn == AttnKind::kSaa ? saa_line(bp + ".attn", g, st.heads, st.sr)
                                                    : sra_line(bp + ".attn", g, st.heads, st.sr));
      report.add(ffn_line(bp + ".ffn", g, cfg.toggles.ffn, ce));
    }
    cin = st.channels;
  }
  {
    FlopLine head{"head", 0, 0};
    const std::int64_t elems = n * cin * ch * cw;
    head.elementwise = kEwLayerNorm * elems + elems /*gap*/ + n * cfg.num_classes /*bias*/;
    head.macs = flops_linear(n, cin, cfg.num_classes);
    report.add(head);
  }
  return report;
}

const char* attn_module_name(AttnModuleKind k) {
  switch (k) {
    case AttnModuleKind::kMhsa:
      return "mhsa";
    case AttnModuleKind::kSaa:
      return "saa";
    case AttnModuleKind::kSra:
      return "sra";
    case AttnModuleKind::kWindow:
      return "window";
  }
  return "?";
}

AttnModuleKind attn_module_from_name(const std::string& name) {
  if (name == "mhsa") return AttnModuleKind::kMhsa;
  if (name == "saa") return AttnModuleKind::kSaa;
  if (name == "sra") return AttnModuleKind::kSra;
  if (name == "window") return AttnModuleKind::kWindow;
  throw ConfigError("unknown attention module '" + name + "' (expected mhsa|saa|sra|window)");
}

FlopReport count_flops_attention(AttnModuleKind kind, const AttnGeometry& g) {
  if (g.c % g.heads != 0) {
    throw ConfigError("channels " + std::to_string(g.c) + " not divisible by heads " +
                      std::to_string(g.heads));
  }
  FlopReport report;
  report.convention = kConvention;
  const Geom geom{g.n, g.c, g.h, g.w};
  std::ostringstream cfg;
  cfg << attn_module_name(kind) << " input (" << g.n << "," << g.c << "," << g.h << "," << g.w
      << ") heads=" << g.heads;
  switch (kind) {
    case AttnModuleKind::kMhsa:
      report.add(mhsa_line("mhsa", geom, g.heads));
      break;
    case AttnModuleKind::kSaa:
      if (g.h % g.sr != 0 || g.w % g.sr != 0) {
        throw DimensionError("saa: H,W not divisible by sr=" + std::to_string(g.sr));
      }
      cfg << " sr=" << g.sr;
      report.add(saa_line("saa", geom, g.heads, g.sr));
      break;
    case AttnModuleKind::kSra:
      if (g.h % g.sr != 0 || g.w % g.sr != 0) {
        throw DimensionError("sra: H,W not divisible by sr=" + std::to_string(g.sr));
      }
      cfg << " sr=" << g.sr;
      report.add(sra_line("sra", geom, g.heads, g.sr));
      break;
    case AttnModuleKind::kWindow:
      if (g.h % g.win != 0 || g.w % g.win != 0) {
        throw DimensionError("window: H,W not divisible by win=" + std::to_string(g.win));
      }
      cfg << " win=" << g.win;
      report.add(window_line("window", geom, g.heads, g.win));
      break;
  }
  report.config = cfg.str();
  return report;
}

}  // namespace saevit
