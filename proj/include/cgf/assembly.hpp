#pragma once

#include <cgf/gcfc3.hpp>
#include <cgf/init.hpp>
#include <cgf/spga.hpp>
#include <cgf/tensor.hpp>
#include <cgf/xfa.hpp>

#include <optional>
#include <stdexcept>
#include <utility>

namespace cgf {

/// Toy feature-extractor sizing: strided stem into three XFA stages, SPGA on
/// the deepest map, one GCFC3 unit in the two-scale neck.
struct AssemblyConfig {
  int input_c = 3;
  int input_h = 256;
  int input_w = 256;
  int c2 = 64;
  int c3 = 128;
  int c4 = 256;
  int blocks2 = 1;
  int blocks3 = 1;
  int blocks4 = 1;
  int heads = 4;
  double ffn_ratio = 2.0;
  int spga_groups = 1;
  int spga_dim = 0;  // 0 selects c4/4
  int gcfc3_branches = 2;
  int neck_out = 128;

  int csp_hidden(int stage_channels) const { return stage_channels / 2; }
  int resolved_spga_dim() const { return spga_dim > 0 ? spga_dim : c4 / 4; }
  int neck_in() const { return c3 + c4; }

  XFAConfig stage_config(int stage) const {
    XFAConfig cfg;
    cfg.heads = heads;
    cfg.ffn_ratio = ffn_ratio;
    switch (stage) {
      case 2: cfg.channels = c2; cfg.n_blocks = blocks2; break;
      case 3: cfg.channels = c3; cfg.n_blocks = blocks3; break;
      case 4: cfg.channels = c4; cfg.n_blocks = blocks4; break;
      default: throw std::invalid_argument("stage_config: stage must be 2, 3 or 4");
    }
    cfg.csp_hidden = csp_hidden(cfg.channels);
    return cfg;
  }

  void validate() const {
    if (input_c < 1 || input_h < 16 || input_w < 16 || input_h % 16 != 0 || input_w % 16 != 0) {
      throw std::invalid_argument("AssemblyConfig: input h/w must be positive multiples of 16");
    }
    if (c2 % 2 != 0 || c3 % 2 != 0 || c4 % 2 != 0) {
      throw std::invalid_argument("AssemblyConfig: stage channels must be even for the CSP split");
    }
    if (c4 % 4 != 0) {
      throw std::invalid_argument("AssemblyConfig: c4 must divide by 4 for SPGA");
    }
    for (int s = 2; s <= 4; ++s) stage_config(s).validate();
    if (spga_groups < 1 || (c4 / 4) % spga_groups != 0) {
      throw std::invalid_argument("AssemblyConfig: spga_groups must divide c4/4");
    }
    if (gcfc3_branches < 1) {
      throw std::invalid_argument("AssemblyConfig: gcfc3_branches must be >= 1");
    }
    if (neck_in() % 2 != 0) {
      throw std::invalid_argument("AssemblyConfig: c3 + c4 must be even for the neck split");
    }
    if (neck_out < 1) throw std::invalid_argument("AssemblyConfig: neck_out must be positive");
  }
};

template <typename Scalar>
struct AssemblyParams {
  ConvParams<Scalar> stem;   // 3x3 stride-4: input_c -> c2
  XFAUnitParams<Scalar> unit2;
  ConvParams<Scalar> down3;  // 3x3 stride-2: c2 -> c3
  XFAUnitParams<Scalar> unit3;
  ConvParams<Scalar> down4;  // 3x3 stride-2: c3 -> c4
  XFAUnitParams<Scalar> unit4;
  SPGAParams<Scalar> spga;
  GCFC3Params<Scalar> neck;                 // (c3+c4) -> neck_out
  std::optional<FusedGCFC3<Scalar>> neck_fused;
};

template <typename Scalar>
AssemblyParams<Scalar> init_assembly_params(const AssemblyConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  AssemblyParams<Scalar> p;
  p.stem = fanin_conv<Scalar>(rng, cfg.c2, cfg.input_c, 3, 4, 1);
  p.unit2 = make_xfa_unit<Scalar>(rng, cfg.stage_config(2), cfg.c2, cfg.c2);
  p.down3 = fanin_conv<Scalar>(rng, cfg.c3, cfg.c2, 3, 2, 1);
  p.unit3 = make_xfa_unit<Scalar>(rng, cfg.stage_config(3), cfg.c3, cfg.c3);
  p.down4 = fanin_conv<Scalar>(rng, cfg.c4, cfg.c3, 3, 2, 1);
  p.unit4 = make_xfa_unit<Scalar>(rng, cfg.stage_config(4), cfg.c4, cfg.c4);
  p.spga = make_spga<Scalar>(rng, cfg.c4, cfg.spga_groups, cfg.resolved_spga_dim());
  const int nc = cfg.neck_in();
  p.neck = fanin_gcfc3<Scalar>(rng, nc / 2, nc / 2, cfg.gcfc3_branches, cfg.neck_out);
  return p;
}

template <typename Scalar>
Tensor4<Scalar> upsample_nearest2x(const Tensor4<Scalar>& x) {
  Tensor4<Scalar> y(x.n, x.c, 2 * x.h, 2 * x.w);
  for (int i = 0; i < x.n; ++i) {
    for (int j = 0; j < x.c; ++j) {
      for (int yy = 0; yy < x.h; ++yy) {
        for (int xx = 0; xx < x.w; ++xx) {
          const Scalar v = x(i, j, yy, xx);
          y(i, j, 2 * yy, 2 * xx) = v;
          y(i, j, 2 * yy, 2 * xx + 1) = v;
          y(i, j, 2 * yy + 1, 2 * xx) = v;
          y(i, j, 2 * yy + 1, 2 * xx + 1) = v;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
struct AssemblyOutputs {
  Tensor4<Scalar> p3;
  Tensor4<Scalar> p4;
};

/// stem /4 -> XFA stage 2 -> down /8 -> XFA stage 3 -> down /16 -> XFA stage 4
/// -> SPGA -> P4; neck: upsample(P4) ++ stage-3 map -> GCFC3 -> P3.
template <typename Scalar>
AssemblyOutputs<Scalar> assembly_forward(const Tensor4<Scalar>& img, const AssemblyConfig& cfg,
                                         const AssemblyParams<Scalar>& params,
                                         bool fused = false,
                                         SPGATrace<Scalar>* trace = nullptr) {
  cfg.validate();
  if (img.c != cfg.input_c || img.h != cfg.input_h || img.w != cfg.input_w) {
    throw std::invalid_argument("assembly_forward: input " + img.shape_str() +
                                " does not match the configured (" +
                                std::to_string(cfg.input_c) + "," + std::to_string(cfg.input_h) +
                                "," + std::to_string(cfg.input_w) + ")");
  }
  if (fused && !params.neck_fused.has_value()) {
    throw std::invalid_argument("assembly_forward: fused run requested but no fused neck present");
  }

  Tensor4<Scalar> s1 = conv2d(img, params.stem);
  Tensor4<Scalar> s2 = xfa_unit_forward(s1, params.unit2, cfg.stage_config(2));
  Tensor4<Scalar> s3 = xfa_unit_forward(conv2d(s2, params.down3), params.unit3,
                                        cfg.stage_config(3));
  Tensor4<Scalar> s4 = xfa_unit_forward(conv2d(s3, params.down4), params.unit4,
                                        cfg.stage_config(4));
  Tensor4<Scalar> p4 = spga_forward(s4, params.spga, trace);

  Tensor4<Scalar> neck_in = channel_concat<Scalar>({s3, upsample_nearest2x(p4)});
  Tensor4<Scalar> p3 = fused ? gcfc3_forward_deploy(neck_in, *params.neck_fused)
                             : gcfc3_forward_train(neck_in, params.neck);
  return {std::move(p3), std::move(p4)};
}

}  // namespace cgf
