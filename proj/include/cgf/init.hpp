#pragma once

#include <cgf/gcfc3.hpp>
#include <cgf/random.hpp>
#include <cgf/spga.hpp>
#include <cgf/tensor.hpp>
#include <cgf/xfa.hpp>

#include <cmath>
#include <vector>

namespace cgf {

/// Fan-in-scaled uniform kernel (variance 1/fan_in), zero bias.
template <typename Scalar>
ConvParams<Scalar> fanin_conv(Rng& rng, int c_out, int c_in, int k, int stride, int padding,
                              int groups = 1, bool bias = true) {
  ConvParams<Scalar> p;
  p.c_out = c_out;
  p.c_in = c_in;
  p.k_h = k;
  p.k_w = k;
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  const double fan_in = static_cast<double>(c_in / groups) * k * k;
  const double bound = std::sqrt(3.0 / fan_in);
  p.kernel.resize(static_cast<Eigen::Index>(c_out) * (c_in / groups) * k * k);
  rng.fill_uniform(p.kernel, -bound, bound);
  if (bias) p.bias = VecX<Scalar>::Zero(c_out);
  return p;
}

/// Uniform [-hi, hi] kernel and bias, for randomized property checks.
template <typename Scalar>
ConvParams<Scalar> random_conv(Rng& rng, int c_out, int c_in, int k, int stride, int padding,
                               int groups = 1, bool bias = true, double hi = 1.0) {
  ConvParams<Scalar> p;
  p.c_out = c_out;
  p.c_in = c_in;
  p.k_h = k;
  p.k_w = k;
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  p.kernel.resize(static_cast<Eigen::Index>(c_out) * (c_in / groups) * k * k);
  rng.fill_uniform(p.kernel, -hi, hi);
  if (bias) {
    p.bias.resize(c_out);
    rng.fill_uniform(p.bias, -hi, hi);
  }
  return p;
}

/// 1x1 conv carrying the identity matrix, zero bias.
template <typename Scalar>
ConvParams<Scalar> identity_conv1x1(int c) {
  ConvParams<Scalar> p;
  p.c_out = c;
  p.c_in = c;
  p.kernel = VecX<Scalar>::Zero(static_cast<Eigen::Index>(c) * c);
  for (int j = 0; j < c; ++j) p.kernel[static_cast<Eigen::Index>(j) * c + j] = Scalar(1);
  p.bias = VecX<Scalar>::Zero(c);
  return p;
}

template <typename Scalar>
BNParams<Scalar> identity_bn(int c, Scalar eps = static_cast<Scalar>(1e-5)) {
  BNParams<Scalar> p;
  p.gamma = VecX<Scalar>::Ones(c);
  p.beta = VecX<Scalar>::Zero(c);
  p.running_mean = VecX<Scalar>::Zero(c);
  p.running_var = VecX<Scalar>::Constant(c, Scalar(1) - eps);
  p.eps = eps;
  return p;
}

/// Broad random statistics with the variance floored at 1e-3 so folding stays
/// well-conditioned in randomized trials.
template <typename Scalar>
BNParams<Scalar> random_bn(Rng& rng, int c) {
  BNParams<Scalar> p;
  p.gamma.resize(c);
  p.beta.resize(c);
  p.running_mean.resize(c);
  p.running_var.resize(c);
  rng.fill_uniform(p.gamma, -1.5, 1.5);
  rng.fill_uniform(p.beta, -1.0, 1.0);
  rng.fill_uniform(p.running_mean, -1.0, 1.0);
  rng.fill_uniform(p.running_var, 1e-3, 2.5);
  p.eps = static_cast<Scalar>(1e-5);
  return p;
}

template <typename Scalar>
XFABlockParams<Scalar> make_xfa_block(Rng& rng, const XFAConfig& cfg) {
  cfg.validate();
  XFABlockParams<Scalar> p;
  const int c = cfg.channels;
  p.attn_dw = fanin_conv<Scalar>(rng, c, c, 3, 1, 1, cfg.heads);
  p.attn_v = fanin_conv<Scalar>(rng, c, c, 1, 1, 0);
  p.attn_out = fanin_conv<Scalar>(rng, c, c, 1, 1, 0);
  p.ffn_in = fanin_conv<Scalar>(rng, cfg.ffn_hidden(), c, 1, 1, 0);
  p.ffn_out = fanin_conv<Scalar>(rng, c, cfg.ffn_hidden(), 1, 1, 0);
  return p;
}

template <typename Scalar>
XFAUnitParams<Scalar> make_xfa_unit(Rng& rng, const XFAConfig& cfg, int c_in, int c_out) {
  XFAUnitParams<Scalar> p;
  p.stem = fanin_conv<Scalar>(rng, 2 * cfg.csp_hidden, c_in, 1, 1, 0);
  const XFAConfig bcfg = cfg.block_config();
  for (int b = 0; b < cfg.n_blocks; ++b) {
    p.blocks.push_back(make_xfa_block<Scalar>(rng, bcfg));
  }
  p.merge = fanin_conv<Scalar>(rng, c_out, (2 + cfg.n_blocks) * cfg.csp_hidden, 1, 1, 0);
  return p;
}

template <typename Scalar>
SPGAParams<Scalar> make_spga(Rng& rng, int channels, int num_groups = 1, int attn_dim = 0) {
  SPGAParams<Scalar> p;
  p.channels = channels;
  p.num_groups = num_groups;
  const int c4 = channels / 4;
  const int d = attn_dim > 0 ? attn_dim : c4;
  p.gn_gamma = VecX<Scalar>::Ones(c4);
  p.gn_beta = VecX<Scalar>::Zero(c4);
  p.q_proj = fanin_conv<Scalar>(rng, d, c4, 1, 1, 0);
  p.k_proj = fanin_conv<Scalar>(rng, d, c4, 1, 1, 0);
  p.v_proj = fanin_conv<Scalar>(rng, d, c4, 1, 1, 0);
  p.gate_proj = fanin_conv<Scalar>(rng, 1, channels, 1, 1, 0);
  p.out_proj = fanin_conv<Scalar>(rng, channels, d + (channels - c4), 1, 1, 0);
  return p;
}

inline std::vector<BranchKind> default_branch_kinds(int m) {
  // The two kinds the training graph names come first; extras cycle.
  static const BranchKind cycle[4] = {BranchKind::Conv1x1BN, BranchKind::Conv3x3BN1x1BN,
                                      BranchKind::Conv3x3BN, BranchKind::Conv3x3BN1x1BN};
  std::vector<BranchKind> kinds;
  for (int i = 0; i < m; ++i) kinds.push_back(cycle[i % 4]);
  return kinds;
}

template <typename Scalar>
BranchSpec<Scalar> random_branch(Rng& rng, BranchKind kind, int c, double hi = 1.0) {
  BranchSpec<Scalar> br;
  br.kind = kind;
  switch (kind) {
    case BranchKind::Conv1x1BN:
      br.conv0 = random_conv<Scalar>(rng, c, c, 1, 1, 0, 1, true, hi);
      br.bn0 = random_bn<Scalar>(rng, c);
      break;
    case BranchKind::Conv3x3BN:
      br.conv0 = random_conv<Scalar>(rng, c, c, 3, 1, 1, 1, true, hi);
      br.bn0 = random_bn<Scalar>(rng, c);
      break;
    case BranchKind::Conv3x3BN1x1BN:
      br.conv0 = random_conv<Scalar>(rng, c, c, 3, 1, 1, 1, true, hi);
      br.bn0 = random_bn<Scalar>(rng, c);
      br.conv1 = random_conv<Scalar>(rng, c, c, 1, 1, 0, 1, true, hi);
      br.bn1 = random_bn<Scalar>(rng, c);
      break;
  }
  return br;
}

template <typename Scalar>
GCFC3Params<Scalar> random_gcfc3(Rng& rng, int c_transform, int c_bypass, int m, int c_out,
                                 double hi = 1.0) {
  GCFC3Params<Scalar> p;
  p.c_transform = c_transform;
  p.c_bypass = c_bypass;
  for (BranchKind kind : default_branch_kinds(m)) {
    p.branches.push_back(random_branch<Scalar>(rng, kind, c_transform, hi));
  }
  p.fuse = random_conv<Scalar>(rng, c_out, c_transform + c_bypass, 1, 1, 0, 1, true, hi);
  return p;
}

/// Fan-in initialized GCFC3 with identity BN statistics (deployable as-is).
template <typename Scalar>
GCFC3Params<Scalar> fanin_gcfc3(Rng& rng, int c_transform, int c_bypass, int m, int c_out) {
  GCFC3Params<Scalar> p;
  p.c_transform = c_transform;
  p.c_bypass = c_bypass;
  for (BranchKind kind : default_branch_kinds(m)) {
    BranchSpec<Scalar> br;
    br.kind = kind;
    const int c = c_transform;
    switch (kind) {
      case BranchKind::Conv1x1BN:
        br.conv0 = fanin_conv<Scalar>(rng, c, c, 1, 1, 0);
        br.bn0 = identity_bn<Scalar>(c);
        break;
      case BranchKind::Conv3x3BN:
        br.conv0 = fanin_conv<Scalar>(rng, c, c, 3, 1, 1);
        br.bn0 = identity_bn<Scalar>(c);
        break;
      case BranchKind::Conv3x3BN1x1BN:
        br.conv0 = fanin_conv<Scalar>(rng, c, c, 3, 1, 1);
        br.bn0 = identity_bn<Scalar>(c);
        br.conv1 = fanin_conv<Scalar>(rng, c, c, 1, 1, 0);
        br.bn1 = identity_bn<Scalar>(c);
        break;
    }
    p.branches.push_back(std::move(br));
  }
  p.fuse = fanin_conv<Scalar>(rng, c_out, c_transform + c_bypass, 1, 1, 0);
  return p;
}

}  // namespace cgf
