#pragma once

#include <cgf/assembly.hpp>

#include <cstdint>
#include <string>
#include <vector>

// Analytic multiply-add counts (one MAC = 2 FLOPs). Convolutions and the
// attention core are counted; normalization and activations are not.

namespace cgf {

struct FlopLine {
  std::string name;
  std::int64_t flops = 0;
};

struct FlopReport {
  std::vector<FlopLine> lines;

  std::int64_t total() const {
    std::int64_t t = 0;
    for (const auto& l : lines) t += l.flops;
    return t;
  }
};

inline std::int64_t conv_flops(int k, int c_in, int c_out, int groups, int h_out, int w_out) {
  return 2LL * k * k * (c_in / groups) * c_out * h_out * w_out;
}

/// 2*N^2*d for the logits plus 2*N^2*d for the weighted aggregation.
inline std::int64_t attention_core_flops(int n_tokens, int d) {
  return 4LL * n_tokens * n_tokens * d;
}

namespace detail {

inline void add_xfa_unit_flops(FlopReport& rep, const std::string& prefix, const XFAConfig& cfg,
                               int c_in, int c_out, int h, int w) {
  const int cs = cfg.csp_hidden;
  rep.lines.push_back({prefix + ".stem", conv_flops(1, c_in, 2 * cs, 1, h, w)});
  const int hidden = cfg.block_config().ffn_hidden();
  for (int b = 0; b < cfg.n_blocks; ++b) {
    const std::string bp = prefix + ".block" + std::to_string(b);
    rep.lines.push_back({bp + ".attn_dw", conv_flops(3, cs, cs, cfg.heads, h, w)});
    rep.lines.push_back({bp + ".attn_v", conv_flops(1, cs, cs, 1, h, w)});
    rep.lines.push_back({bp + ".attn_out", conv_flops(1, cs, cs, 1, h, w)});
    rep.lines.push_back({bp + ".ffn_in", conv_flops(1, cs, hidden, 1, h, w)});
    rep.lines.push_back({bp + ".ffn_out", conv_flops(1, hidden, cs, 1, h, w)});
  }
  rep.lines.push_back({prefix + ".merge", conv_flops(1, (2 + cfg.n_blocks) * cs, c_out, 1, h, w)});
}

inline void add_spga_flops(FlopReport& rep, const std::string& prefix, int channels, int d,
                           int h, int w) {
  const int c4 = channels / 4;
  const int n_tokens = h * w;
  rep.lines.push_back({prefix + ".gate", conv_flops(1, channels, 1, 1, 1, 1)});
  rep.lines.push_back({prefix + ".q_proj", conv_flops(1, c4, d, 1, h, w)});
  rep.lines.push_back({prefix + ".k_proj", conv_flops(1, c4, d, 1, h, w)});
  rep.lines.push_back({prefix + ".v_proj", conv_flops(1, c4, d, 1, h, w)});
  rep.lines.push_back({prefix + ".attention", attention_core_flops(n_tokens, d)});
  rep.lines.push_back({prefix + ".out_proj", conv_flops(1, d + (channels - c4), channels, 1, h, w)});
}

}  // namespace detail

/// Per-branch transform cost of one GCFC3 unit (excluding the shared fuse).
inline void add_gcfc3_flops(FlopReport& rep, const std::string& prefix, int c_transform,
                            int c_out, const std::vector<BranchKind>& kinds, bool fused, int h,
                            int w) {
  if (fused) {
    rep.lines.push_back({prefix + ".fused3x3", conv_flops(3, c_transform, c_transform, 1, h, w)});
  } else {
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      const std::string bp = prefix + ".branch" + std::to_string(i);
      switch (kinds[i]) {
        case BranchKind::Conv1x1BN:
          rep.lines.push_back({bp + ".conv0", conv_flops(1, c_transform, c_transform, 1, h, w)});
          break;
        case BranchKind::Conv3x3BN:
          rep.lines.push_back({bp + ".conv0", conv_flops(3, c_transform, c_transform, 1, h, w)});
          break;
        case BranchKind::Conv3x3BN1x1BN:
          rep.lines.push_back({bp + ".conv0", conv_flops(3, c_transform, c_transform, 1, h, w)});
          rep.lines.push_back({bp + ".conv1", conv_flops(1, c_transform, c_transform, 1, h, w)});
          break;
      }
    }
  }
  rep.lines.push_back({prefix + ".fuse", conv_flops(1, 2 * c_transform, c_out, 1, h, w)});
}

/// Whole-assembly analytic count; `fused` switches the GCFC3 lines to the
/// deploy form (the only part that differs).
inline FlopReport count_flops(const AssemblyConfig& cfg, bool fused = false) {
  cfg.validate();
  FlopReport rep;
  const int h4 = cfg.input_h / 4, w4 = cfg.input_w / 4;
  const int h8 = cfg.input_h / 8, w8 = cfg.input_w / 8;
  const int h16 = cfg.input_h / 16, w16 = cfg.input_w / 16;

  rep.lines.push_back({"stem", conv_flops(3, cfg.input_c, cfg.c2, 1, h4, w4)});
  detail::add_xfa_unit_flops(rep, "xfa.2", cfg.stage_config(2), cfg.c2, cfg.c2, h4, w4);
  rep.lines.push_back({"down3", conv_flops(3, cfg.c2, cfg.c3, 1, h8, w8)});
  detail::add_xfa_unit_flops(rep, "xfa.3", cfg.stage_config(3), cfg.c3, cfg.c3, h8, w8);
  rep.lines.push_back({"down4", conv_flops(3, cfg.c3, cfg.c4, 1, h16, w16)});
  detail::add_xfa_unit_flops(rep, "xfa.4", cfg.stage_config(4), cfg.c4, cfg.c4, h16, w16);
  detail::add_spga_flops(rep, "spga", cfg.c4, cfg.resolved_spga_dim(), h16, w16);
  add_gcfc3_flops(rep, "gcfc3.0", cfg.neck_in() / 2, cfg.neck_out,
                  default_branch_kinds(cfg.gcfc3_branches), fused, h8, w8);
  return rep;
}

}  // namespace cgf
