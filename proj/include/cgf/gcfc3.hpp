#pragma once

#include <cgf/backward.hpp>
#include <cgf/ops.hpp>
#include <cgf/tensor.hpp>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgf {

enum class BranchKind {
  Conv1x1BN,        // 1x1 conv + BN
  Conv3x3BN1x1BN,   // 3x3 conv + BN, then 1x1 conv + BN
  Conv3x3BN,        // 3x3 conv + BN
};

inline const char* branch_kind_name(BranchKind k) {
  switch (k) {
    case BranchKind::Conv1x1BN: return "conv1x1_bn";
    case BranchKind::Conv3x3BN1x1BN: return "conv3x3_bn_then_conv1x1_bn";
    case BranchKind::Conv3x3BN: return "conv3x3_bn";
  }
  return "unknown";
}

/// One parallel transform path. conv1/bn1 are used only by the cascaded kind.
template <typename Scalar>
struct BranchSpec {
  BranchKind kind = BranchKind::Conv1x1BN;
  ConvParams<Scalar> conv0;
  BNParams<Scalar> bn0;
  ConvParams<Scalar> conv1;
  BNParams<Scalar> bn1;

  bool has_tail() const { return kind == BranchKind::Conv3x3BN1x1BN; }

  int stage_count() const { return has_tail() ? 2 : 1; }
};

template <typename Scalar>
struct GCFC3Params {
  int c_transform = 0;
  int c_bypass = 0;
  std::vector<BranchSpec<Scalar>> branches;
  ConvParams<Scalar> fuse;  // 1x1: c_transform + c_bypass -> C_out

  void validate() const {
    if (c_transform < 1 || c_bypass < 1) {
      throw std::invalid_argument("GCFC3: split sizes must be positive");
    }
    if (branches.empty()) throw std::invalid_argument("GCFC3: at least one branch required");
    for (std::size_t i = 0; i < branches.size(); ++i) {
      const auto& br = branches[i];
      const std::string tag = "GCFC3 branch " + std::to_string(i) + " (" +
                              branch_kind_name(br.kind) + ")";
      auto expect = [&](const ConvParams<Scalar>& cp, int k, int pad, int cin, int cout) {
        cp.validate();
        if (cp.k_h != k || cp.k_w != k || cp.padding != pad || cp.stride != 1 ||
            cp.groups != 1 || cp.c_in != cin || cp.c_out != cout) {
          throw std::invalid_argument(tag + ": conv must be " + std::to_string(k) + "x" +
                                      std::to_string(k) + " pad " + std::to_string(pad) +
                                      " stride 1, " + std::to_string(cin) + " -> " +
                                      std::to_string(cout));
        }
      };
      switch (br.kind) {
        case BranchKind::Conv1x1BN:
          expect(br.conv0, 1, 0, c_transform, c_transform);
          break;
        case BranchKind::Conv3x3BN:
          expect(br.conv0, 3, 1, c_transform, c_transform);
          break;
        case BranchKind::Conv3x3BN1x1BN:
          expect(br.conv0, 3, 1, c_transform, br.conv0.c_out);
          expect(br.conv1, 1, 0, br.conv0.c_out, c_transform);
          if (br.bn1.channels() != c_transform) {
            throw std::invalid_argument(tag + ": bn1 must cover " +
                                        std::to_string(c_transform) + " channels");
          }
          break;
      }
      if (br.bn0.channels() != br.conv0.c_out) {
        throw std::invalid_argument(tag + ": bn0 must cover the conv output channels");
      }
    }
    fuse.validate();
    if (fuse.c_in != c_transform + c_bypass || fuse.k_h != 1 || fuse.k_w != 1 ||
        fuse.stride != 1 || fuse.padding != 0) {
      throw std::invalid_argument("GCFC3: fuse must be a 1x1 conv over " +
                                  std::to_string(c_transform + c_bypass) + " channels");
    }
  }
};

/// Deploy form: one 3x3 conv replaces the whole transform-branch set.
template <typename Scalar>
struct FusedGCFC3 {
  int c_transform = 0;
  int c_bypass = 0;
  ConvParams<Scalar> fused3x3;  // 3x3 pad 1, c_transform -> c_transform, with bias
  ConvParams<Scalar> fuse;      // copied unchanged
};

template <typename Scalar>
Tensor4<Scalar> branch_forward(const Tensor4<Scalar>& xc, const BranchSpec<Scalar>& br) {
  Tensor4<Scalar> y = batchnorm_infer(conv2d(xc, br.conv0), br.bn0);
  if (br.has_tail()) {
    y = batchnorm_infer(conv2d(y, br.conv1), br.bn1);
  }
  return y;
}

/// Training graph: split -> sum of parallel branches -> concat bypass ->
/// pointwise mix -> SiLU.
template <typename Scalar>
Tensor4<Scalar> gcfc3_forward_train(const Tensor4<Scalar>& x, const GCFC3Params<Scalar>& p) {
  p.validate();
  if (x.c != p.c_transform + p.c_bypass) {
    throw std::invalid_argument("gcfc3_forward_train: input has " + std::to_string(x.c) +
                                " channels, split wants " +
                                std::to_string(p.c_transform + p.c_bypass));
  }
  auto parts = channel_split(x, {p.c_transform, p.c_bypass});
  Tensor4<Scalar> t = branch_forward(parts[0], p.branches[0]);
  for (std::size_t i = 1; i < p.branches.size(); ++i) {
    t.data += branch_forward(parts[0], p.branches[i]).data;
  }
  Tensor4<Scalar> cat = channel_concat<Scalar>({t, parts[1]});
  return silu(conv2d(cat, p.fuse));
}

// --------------------------------------------------------------------------
// Re-parameterization algebra.

/// Absorbs inference batch norm into the preceding conv:
///   W' = (gamma / sqrt(var+eps)) . W,  b' = beta - gamma*mean/sqrt(var+eps) + scale*b.
template <typename Scalar>
ConvParams<Scalar> fold_bn(const ConvParams<Scalar>& conv, const BNParams<Scalar>& bn) {
  conv.validate();
  if (bn.channels() != conv.c_out) {
    throw std::invalid_argument("fold_bn: bn covers " + std::to_string(bn.channels()) +
                                " channels, conv produces " + std::to_string(conv.c_out));
  }
  ConvParams<Scalar> out = conv;
  out.bias = VecX<Scalar>::Zero(conv.c_out);
  const Eigen::Index per_out = conv.kernel.size() / conv.c_out;
  for (int oc = 0; oc < conv.c_out; ++oc) {
    const Scalar denom = bn.running_var[oc] + bn.eps;
    if (!(denom > Scalar(0))) {
      throw std::invalid_argument("fold_bn: var + eps <= 0 at channel " + std::to_string(oc));
    }
    const Scalar scale = bn.gamma[oc] / std::sqrt(denom);
    out.kernel.segment(oc * per_out, per_out) *= scale;
    out.bias[oc] = bn.beta[oc] - bn.gamma[oc] * bn.running_mean[oc] / std::sqrt(denom) +
                   scale * (conv.has_bias() ? conv.bias[oc] : Scalar(0));
  }
  return out;
}

/// Places a 1x1 kernel at the center tap of a zero 3x3 kernel; padding moves
/// to 1 so the forward map is unchanged on every input.
template <typename Scalar>
ConvParams<Scalar> embed_1x1_as_3x3(const ConvParams<Scalar>& conv) {
  conv.validate();
  if (conv.k_h != 1 || conv.k_w != 1 || conv.stride != 1 || conv.groups != 1) {
    throw std::invalid_argument("embed_1x1_as_3x3: expects an ungrouped 1x1 stride-1 conv");
  }
  ConvParams<Scalar> out = conv;
  out.k_h = 3;
  out.k_w = 3;
  out.padding = 1;
  out.kernel = VecX<Scalar>::Zero(static_cast<Eigen::Index>(conv.c_out) * conv.c_in * 9);
  for (int oc = 0; oc < conv.c_out; ++oc) {
    for (int ic = 0; ic < conv.c_in; ++ic) {
      out.kernel[((static_cast<Eigen::Index>(oc) * conv.c_in + ic) * 3 + 1) * 3 + 1] =
          conv.kernel[static_cast<Eigen::Index>(oc) * conv.c_in + ic];
    }
  }
  return out;
}

/// Collapses conv1x1(conv3x3(x)) into a single 3x3 conv:
///   W[o,i,.,.] = sum_m W2[o,m] * W1[m,i,.,.],  b = W2*b1 + b2.
/// Biases are spatially uniform, so the collapse holds on padded borders too.
template <typename Scalar>
ConvParams<Scalar> compose_3x3_then_1x1(const ConvParams<Scalar>& c1,
                                        const ConvParams<Scalar>& c2) {
  c1.validate();
  c2.validate();
  if (c1.k_h != 3 || c1.k_w != 3 || c1.padding != 1 || c1.stride != 1 || c1.groups != 1) {
    throw std::invalid_argument("compose_3x3_then_1x1: head must be 3x3 pad-1 stride-1");
  }
  if (c2.k_h != 1 || c2.k_w != 1 || c2.stride != 1 || c2.padding != 0 || c2.groups != 1) {
    throw std::invalid_argument("compose_3x3_then_1x1: tail must be a plain 1x1 conv");
  }
  if (c1.c_out != c2.c_in) {
    throw std::invalid_argument("compose_3x3_then_1x1: channel mismatch, head produces " +
                                std::to_string(c1.c_out) + ", tail consumes " +
                                std::to_string(c2.c_in));
  }
  ConvParams<Scalar> out;
  out.c_out = c2.c_out;
  out.c_in = c1.c_in;
  out.k_h = 3;
  out.k_w = 3;
  out.stride = 1;
  out.padding = 1;
  out.groups = 1;
  out.kernel.resize(static_cast<Eigen::Index>(c2.c_out) * c1.c_in * 9);

  CMapMat<Scalar> w1(c1.kernel.data(), c1.c_out, static_cast<Eigen::Index>(c1.c_in) * 9);
  CMapMat<Scalar> w2(c2.kernel.data(), c2.c_out, c2.c_in);
  MapMat<Scalar>(out.kernel.data(), c2.c_out, static_cast<Eigen::Index>(c1.c_in) * 9)
      .noalias() = w2 * w1;

  out.bias = VecX<Scalar>::Zero(c2.c_out);
  if (c1.has_bias()) out.bias = w2 * c1.bias;
  if (c2.has_bias()) out.bias += c2.bias;
  return out;
}

/// Eq-for-eq rewrite of the training branches into one 3x3 conv: fold each
/// BN, lift every path to 3x3 form, then sum kernels and biases.
template <typename Scalar>
FusedGCFC3<Scalar> fuse_branches(const GCFC3Params<Scalar>& p) {
  p.validate();
  FusedGCFC3<Scalar> fused;
  fused.c_transform = p.c_transform;
  fused.c_bypass = p.c_bypass;
  fused.fuse = p.fuse;

  bool first = true;
  for (const auto& br : p.branches) {
    ConvParams<Scalar> as3x3;
    switch (br.kind) {
      case BranchKind::Conv1x1BN:
        as3x3 = embed_1x1_as_3x3(fold_bn(br.conv0, br.bn0));
        break;
      case BranchKind::Conv3x3BN:
        as3x3 = fold_bn(br.conv0, br.bn0);
        break;
      case BranchKind::Conv3x3BN1x1BN:
        as3x3 = compose_3x3_then_1x1(fold_bn(br.conv0, br.bn0), fold_bn(br.conv1, br.bn1));
        break;
      default:
        throw std::invalid_argument("fuse_branches: unsupported branch kind");
    }
    if (first) {
      fused.fused3x3 = as3x3;
      first = false;
    } else {
      fused.fused3x3.kernel += as3x3.kernel;
      fused.fused3x3.bias += as3x3.bias;
    }
  }
  return fused;
}

/// Deploy graph: split -> single fused 3x3 -> concat bypass -> pointwise mix
/// -> SiLU. Exactly one transform convolution executes.
template <typename Scalar>
Tensor4<Scalar> gcfc3_forward_deploy(const Tensor4<Scalar>& x, const FusedGCFC3<Scalar>& f) {
  if (x.c != f.c_transform + f.c_bypass) {
    throw std::invalid_argument("gcfc3_forward_deploy: input has " + std::to_string(x.c) +
                                " channels, split wants " +
                                std::to_string(f.c_transform + f.c_bypass));
  }
  auto parts = channel_split(x, {f.c_transform, f.c_bypass});
  Tensor4<Scalar> t = conv2d(parts[0], f.fused3x3);
  Tensor4<Scalar> cat = channel_concat<Scalar>({t, parts[1]});
  return silu(conv2d(cat, f.fuse));
}

// --------------------------------------------------------------------------
// Analytic backward for the training graph (frozen BN statistics).

template <typename Scalar>
struct BranchGrads {
  ConvGrads<Scalar> conv0;
  BNGrads<Scalar> bn0;
  ConvGrads<Scalar> conv1;
  BNGrads<Scalar> bn1;
};

template <typename Scalar>
struct GCFC3Grads {
  std::vector<BranchGrads<Scalar>> branches;
  ConvGrads<Scalar> fuse;
  Tensor4<Scalar> dx;
};

template <typename Scalar>
GCFC3Grads<Scalar> gcfc3_train_backward(const Tensor4<Scalar>& x, const GCFC3Params<Scalar>& p,
                                        const Tensor4<Scalar>& gy) {
  p.validate();
  auto parts = channel_split(x, {p.c_transform, p.c_bypass});
  const Tensor4<Scalar>& xc = parts[0];

  // Forward intermediates per branch.
  struct Mid {
    Tensor4<Scalar> a0, b0, a1;
  };
  std::vector<Mid> mids;
  mids.reserve(p.branches.size());
  Tensor4<Scalar> t;
  for (std::size_t i = 0; i < p.branches.size(); ++i) {
    const auto& br = p.branches[i];
    Mid m;
    m.a0 = conv2d(xc, br.conv0);
    m.b0 = batchnorm_infer(m.a0, br.bn0);
    Tensor4<Scalar> out = m.b0;
    if (br.has_tail()) {
      m.a1 = conv2d(m.b0, br.conv1);
      out = batchnorm_infer(m.a1, br.bn1);
    }
    if (i == 0) {
      t = out;
    } else {
      t.data += out.data;
    }
    mids.push_back(std::move(m));
  }
  Tensor4<Scalar> cat = channel_concat<Scalar>({t, parts[1]});
  Tensor4<Scalar> z = conv2d(cat, p.fuse);

  GCFC3Grads<Scalar> g;
  Tensor4<Scalar> g_z = silu_backward(z, gy);
  g.fuse = conv2d_backward(cat, p.fuse, g_z);

  Tensor4<Scalar> g_t(x.n, p.c_transform, x.h, x.w);
  Tensor4<Scalar> g_xr(x.n, p.c_bypass, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    g_t.item(i) = g.fuse.dx.item(i).topRows(p.c_transform);
    g_xr.item(i) = g.fuse.dx.item(i).bottomRows(p.c_bypass);
  }

  Tensor4<Scalar> g_xc(x.n, p.c_transform, x.h, x.w);
  g.branches.resize(p.branches.size());
  for (std::size_t i = 0; i < p.branches.size(); ++i) {
    const auto& br = p.branches[i];
    auto& bg = g.branches[i];
    Tensor4<Scalar> g_out = g_t;  // branch outputs enter through a plain sum
    if (br.has_tail()) {
      bg.bn1 = batchnorm_infer_backward(mids[i].a1, br.bn1, g_out);
      bg.conv1 = conv2d_backward(mids[i].b0, br.conv1, bg.bn1.dx);
      g_out = bg.conv1.dx;
    }
    bg.bn0 = batchnorm_infer_backward(mids[i].a0, br.bn0, g_out);
    bg.conv0 = conv2d_backward(xc, br.conv0, bg.bn0.dx);
    g_xc.data += bg.conv0.dx.data;
  }
  g.dx = channel_concat<Scalar>({g_xc, g_xr});
  return g;
}

}  // namespace cgf
