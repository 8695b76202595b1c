#pragma once

#include <cgf/backward.hpp>
#include <cgf/ops.hpp>
#include <cgf/tensor.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace cgf {

/// Split-Path Gated Attention weights. The attention branch runs on the C/4
/// narrow slice; the gate consumes the full input and yields one scalar ratio
/// per batch item.
template <typename Scalar>
struct SPGAParams {
  int channels = 0;   // C
  int num_groups = 1;
  Scalar gn_eps = static_cast<Scalar>(1e-5);
  VecX<Scalar> gn_gamma, gn_beta;       // C/4
  ConvParams<Scalar> q_proj, k_proj, v_proj;  // 1x1: C/4 -> d
  ConvParams<Scalar> gate_proj;         // 1x1 on pooled features: C -> 1
  ConvParams<Scalar> out_proj;          // 1x1: d + 3C/4 -> C

  int narrow() const { return channels / 4; }
  int wide() const { return channels - channels / 4; }
  int attn_dim() const { return q_proj.c_out; }

  void validate() const {
    if (channels < 4 || channels % 4 != 0) {
      throw std::invalid_argument("SPGA: channel count " + std::to_string(channels) +
                                  " is not divisible by 4; the C/4 split needs it");
    }
    const int c4 = narrow();
    if (num_groups < 1 || c4 % num_groups != 0) {
      throw std::invalid_argument("SPGA: num_groups=" + std::to_string(num_groups) +
                                  " must divide C/4=" + std::to_string(c4));
    }
    if (gn_gamma.size() != c4 || gn_beta.size() != c4) {
      throw std::invalid_argument("SPGA: group-norm affine arrays must have length C/4");
    }
    auto pointwise = [](const ConvParams<Scalar>& p, const char* name) {
      p.validate();
      if (p.k_h != 1 || p.k_w != 1 || p.stride != 1 || p.padding != 0) {
        throw std::invalid_argument(std::string("SPGA: ") + name + " must be a plain 1x1 conv");
      }
    };
    pointwise(q_proj, "q_proj");
    pointwise(k_proj, "k_proj");
    pointwise(v_proj, "v_proj");
    pointwise(gate_proj, "gate_proj");
    pointwise(out_proj, "out_proj");
    const int d = attn_dim();
    if (q_proj.c_in != c4 || k_proj.c_in != c4 || v_proj.c_in != c4 || k_proj.c_out != d ||
        v_proj.c_out != d) {
      throw std::invalid_argument("SPGA: q/k/v projections must map C/4 -> d");
    }
    if (gate_proj.c_in != channels || gate_proj.c_out != 1) {
      throw std::invalid_argument("SPGA: gate_proj must map C -> 1");
    }
    if (out_proj.c_in != d + wide() || out_proj.c_out != channels) {
      throw std::invalid_argument("SPGA: out_proj must map d + 3C/4 -> C");
    }
  }
};

/// Per-call inspection record: gate ratio and k per batch item, row supports,
/// and optionally the full attention matrices.
template <typename Scalar>
struct SPGATrace {
  std::vector<Scalar> ratio;
  std::vector<int> k;
  std::vector<std::vector<std::vector<int>>> supports;  // [item][row] -> kept indices
  std::vector<MatX<Scalar>> attn_weights;               // filled only on request
};

// --------------------------------------------------------------------------
// Group normalization over the narrow branch.

template <typename Scalar>
struct GroupNormCache {
  MatX<Scalar> mean;     // (n, groups)
  MatX<Scalar> inv_std;  // (n, groups)
};

template <typename Scalar>
Tensor4<Scalar> group_norm(const Tensor4<Scalar>& x, const VecX<Scalar>& gamma,
                           const VecX<Scalar>& beta, int groups, Scalar eps,
                           GroupNormCache<Scalar>* cache = nullptr) {
  if (gamma.size() != x.c || beta.size() != x.c) {
    throw std::invalid_argument("group_norm: affine arrays must match channel count");
  }
  if (groups < 1 || x.c % groups != 0) {
    throw std::invalid_argument("group_norm: groups must divide channels");
  }
  const int cs = x.c / groups;
  const Eigen::Index m = static_cast<Eigen::Index>(cs) * x.h * x.w;
  Tensor4<Scalar> y(x.n, x.c, x.h, x.w);
  if (cache != nullptr) {
    cache->mean.resize(x.n, groups);
    cache->inv_std.resize(x.n, groups);
  }
  for (int i = 0; i < x.n; ++i) {
    for (int g = 0; g < groups; ++g) {
      auto block = x.item(i).middleRows(g * cs, cs);
      const Scalar mean = block.mean();
      const Scalar var = (block.array() - mean).square().sum() / static_cast<Scalar>(m);
      const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);
      if (cache != nullptr) {
        cache->mean(i, g) = mean;
        cache->inv_std(i, g) = inv_std;
      }
      for (int jc = 0; jc < cs; ++jc) {
        const int j = g * cs + jc;
        y.item(i).row(j).array() =
            (block.row(jc).array() - mean) * inv_std * gamma[j] + beta[j];
      }
    }
  }
  return y;
}

template <typename Scalar>
struct GroupNormGrads {
  VecX<Scalar> d_gamma;
  VecX<Scalar> d_beta;
  Tensor4<Scalar> dx;
};

template <typename Scalar>
GroupNormGrads<Scalar> group_norm_backward(const Tensor4<Scalar>& x, const VecX<Scalar>& gamma,
                                           int groups, Scalar eps, const Tensor4<Scalar>& gy) {
  const int cs = x.c / groups;
  const Eigen::Index m = static_cast<Eigen::Index>(cs) * x.h * x.w;
  GroupNormGrads<Scalar> g;
  g.d_gamma = VecX<Scalar>::Zero(x.c);
  g.d_beta = VecX<Scalar>::Zero(x.c);
  g.dx = Tensor4<Scalar>(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    for (int gr = 0; gr < groups; ++gr) {
      auto xb = x.item(i).middleRows(gr * cs, cs);
      auto gb = gy.item(i).middleRows(gr * cs, cs);
      const Scalar mean = xb.mean();
      const Scalar var = (xb.array() - mean).square().sum() / static_cast<Scalar>(m);
      const Scalar inv_std = Scalar(1) / std::sqrt(var + eps);

      // d_xhat = gy * gamma_c; reduce the group's mean/var contributions.
      MatX<Scalar> xhat = (xb.array() - mean) * inv_std;
      MatX<Scalar> d_xhat(cs, xb.cols());
      for (int jc = 0; jc < cs; ++jc) {
        const int j = gr * cs + jc;
        g.d_gamma[j] += (gb.row(jc).array() * xhat.row(jc).array()).sum();
        g.d_beta[j] += gb.row(jc).sum();
        d_xhat.row(jc) = gb.row(jc) * gamma[j];
      }
      const Scalar sum_dxhat = d_xhat.sum();
      const Scalar sum_dxhat_xhat = (d_xhat.array() * xhat.array()).sum();
      g.dx.item(i).middleRows(gr * cs, cs).array() =
          inv_std * (d_xhat.array() - sum_dxhat / static_cast<Scalar>(m) -
                     xhat.array() * (sum_dxhat_xhat / static_cast<Scalar>(m)));
    }
  }
  return g;
}

// --------------------------------------------------------------------------
// Gate.

/// ratio = sigmoid(gate_proj(global_avg_pool(x))), one scalar per batch item.
template <typename Scalar>
VecX<Scalar> gate_ratio(const Tensor4<Scalar>& x, const SPGAParams<Scalar>& p) {
  p.validate();
  if (x.c != p.channels) {
    throw std::invalid_argument("gate_ratio: input has " + std::to_string(x.c) +
                                " channels, SPGA expects " + std::to_string(p.channels));
  }
  Tensor4<Scalar> pooled = global_avg_pool(x);
  Tensor4<Scalar> z = conv2d(pooled, p.gate_proj);
  VecX<Scalar> r(x.n);
  for (int i = 0; i < x.n; ++i) r[i] = sigmoid_value(z(i, 0, 0, 0));
  return r;
}

/// k = max(1, min(N, floor(N * ratio))). The lower clamp keeps every softmax
/// row non-empty.
inline int sparsity_k(double ratio, int n_tokens) {
  const int k = static_cast<int>(std::floor(static_cast<double>(n_tokens) * ratio));
  return std::max(1, std::min(n_tokens, k));
}

// --------------------------------------------------------------------------
// Single-head attention over flattened tokens (one batch item).

template <typename Scalar>
struct ShsaTokenCache {
  MatX<Scalar> q, k, v;   // (d, N), tokens as columns
  MatX<Scalar> alpha;     // (N, N)
  MaskMat mask;           // (N, N)
};

namespace detail {

template <typename Scalar>
CMapMat<Scalar> pointwise_weight(const ConvParams<Scalar>& p) {
  return CMapMat<Scalar>(p.kernel.data(), p.c_out, p.c_in);
}

template <typename Scalar>
MatX<Scalar> project_tokens(const CMapMat<Scalar>& x, const ConvParams<Scalar>& p) {
  MatX<Scalar> out = pointwise_weight(p) * x;
  if (p.has_bias()) out.colwise() += p.bias;
  return out;
}

// Y_a = sum_b alpha_ab v_b with the given row mask.
template <typename Scalar>
MatX<Scalar> shsa_masked(const CMapMat<Scalar>& x_tokens, const SPGAParams<Scalar>& p,
                         const MaskMat& mask, ShsaTokenCache<Scalar>* cache) {
  const MatX<Scalar> q = project_tokens(x_tokens, p.q_proj);
  const MatX<Scalar> k = project_tokens(x_tokens, p.k_proj);
  const MatX<Scalar> v = project_tokens(x_tokens, p.v_proj);
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(p.attn_dim()));
  MatX<Scalar> logits = (q.transpose() * k) * scale;
  MatX<Scalar> alpha = softmax_masked_rows(logits, mask);
  MatX<Scalar> y = v * alpha.transpose();
  if (cache != nullptr) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->alpha = alpha;
    cache->mask = mask;
  }
  return y;
}

inline MaskMat mask_from_supports(const std::vector<std::vector<int>>& supports, int n_tokens) {
  MaskMat mask = MaskMat::Constant(n_tokens, n_tokens, false);
  for (std::size_t a = 0; a < supports.size(); ++a) {
    for (int b : supports[a]) mask(static_cast<Eigen::Index>(a), b) = true;
  }
  return mask;
}

}  // namespace detail

/// Instance-sparse single-head attention over the normalized narrow branch.
/// Keeps the top-k logits per query row (ties to the lowest index), masks the
/// rest, softmax, then aggregates the value projection.
template <typename Scalar>
Tensor4<Scalar> sparse_shsa(const Tensor4<Scalar>& x1_normed, const SPGAParams<Scalar>& p, int k,
                            SPGATrace<Scalar>* trace = nullptr, bool keep_attn = false) {
  p.validate();
  if (x1_normed.c != p.narrow()) {
    throw std::invalid_argument("sparse_shsa: input must carry C/4=" +
                                std::to_string(p.narrow()) + " channels, got " +
                                std::to_string(x1_normed.c));
  }
  const int n_tokens = x1_normed.h * x1_normed.w;
  if (k < 1 || k > n_tokens) {
    throw std::invalid_argument("sparse_shsa: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(n_tokens) + "]");
  }
  const int d = p.attn_dim();
  Tensor4<Scalar> out(x1_normed.n, d, x1_normed.h, x1_normed.w);
  for (int i = 0; i < x1_normed.n; ++i) {
    CMapMat<Scalar> x_tokens = x1_normed.item(i);
    const MatX<Scalar> q = detail::project_tokens(x_tokens, p.q_proj);
    const MatX<Scalar> kk = detail::project_tokens(x_tokens, p.k_proj);
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
    MatX<Scalar> logits = (q.transpose() * kk) * scale;

    MaskMat mask = MaskMat::Constant(n_tokens, n_tokens, false);
    std::vector<std::vector<int>> supports(static_cast<std::size_t>(n_tokens));
    for (int a = 0; a < n_tokens; ++a) {
      VecX<Scalar> row = logits.row(a);
      supports[static_cast<std::size_t>(a)] = top_k_indices(row, k);
      for (int b : supports[static_cast<std::size_t>(a)]) mask(a, b) = true;
    }

    ShsaTokenCache<Scalar> cache;
    MatX<Scalar> y = detail::shsa_masked(x_tokens, p, mask, &cache);
    out.item(i) = y;
    if (trace != nullptr) {
      trace->supports.push_back(std::move(supports));
      if (keep_attn) trace->attn_weights.push_back(cache.alpha);
    }
  }
  return out;
}

/// Full SPGA: C/4-3C/4 split, group norm, instance-adaptive sparse attention
/// on the narrow path, bypass concat, SiLU-activated output projection.
template <typename Scalar>
Tensor4<Scalar> spga_forward(const Tensor4<Scalar>& x, const SPGAParams<Scalar>& p,
                             SPGATrace<Scalar>* trace = nullptr, bool keep_attn = false) {
  p.validate();
  if (x.c != p.channels) {
    throw std::invalid_argument("spga_forward: input has " + std::to_string(x.c) +
                                " channels, params expect " + std::to_string(p.channels));
  }
  const int n_tokens = x.h * x.w;
  auto parts = channel_split(x, {p.narrow(), p.wide()});
  Tensor4<Scalar> x1n = group_norm(parts[0], p.gn_gamma, p.gn_beta, p.num_groups, p.gn_eps);
  VecX<Scalar> ratios = gate_ratio(x, p);

  Tensor4<Scalar> attended(x.n, p.attn_dim(), x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    const int k = sparsity_k(static_cast<double>(ratios[i]), n_tokens);
    Tensor4<Scalar> xi(1, x1n.c, x1n.h, x1n.w);
    xi.item(0) = x1n.item(i);
    Tensor4<Scalar> yi = sparse_shsa(xi, p, k, trace, keep_attn);
    attended.item(i) = yi.item(0);
    if (trace != nullptr) {
      trace->ratio.push_back(ratios[i]);
      trace->k.push_back(k);
    }
  }
  Tensor4<Scalar> cat = channel_concat<Scalar>({attended, parts[1]});
  return silu(conv2d(cat, p.out_proj));
}

/// Deterministic variant used for gradient verification: the per-item, per-row
/// attention supports are supplied by the caller so the discrete selection
/// cannot move while parameters are perturbed.
template <typename Scalar>
Tensor4<Scalar> spga_forward_fixed_support(
    const Tensor4<Scalar>& x, const SPGAParams<Scalar>& p,
    const std::vector<std::vector<std::vector<int>>>& supports) {
  p.validate();
  if (static_cast<int>(supports.size()) != x.n) {
    throw std::invalid_argument("spga_forward_fixed_support: one support set per item required");
  }
  const int n_tokens = x.h * x.w;
  auto parts = channel_split(x, {p.narrow(), p.wide()});
  Tensor4<Scalar> x1n = group_norm(parts[0], p.gn_gamma, p.gn_beta, p.num_groups, p.gn_eps);
  Tensor4<Scalar> attended(x.n, p.attn_dim(), x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    const MaskMat mask = detail::mask_from_supports(supports[static_cast<std::size_t>(i)],
                                                    n_tokens);
    attended.item(i) = detail::shsa_masked(CMapMat<Scalar>(x1n.item(i)), p, mask,
                                           static_cast<ShsaTokenCache<Scalar>*>(nullptr));
  }
  Tensor4<Scalar> cat = channel_concat<Scalar>({attended, parts[1]});
  return silu(conv2d(cat, p.out_proj));
}

// --------------------------------------------------------------------------
// Analytic backward with the attention supports held fixed. No gradient is
// produced for gate_proj: k enters only through the frozen selection.

template <typename Scalar>
struct ProjGrads {
  VecX<Scalar> d_kernel;
  VecX<Scalar> d_bias;
};

template <typename Scalar>
struct ShsaTokenGrads {
  ProjGrads<Scalar> q, k, v;
  MatX<Scalar> d_logits;   // exactly zero off-support
  MatX<Scalar> dx_tokens;  // (C/4, N)
};

template <typename Scalar>
ShsaTokenGrads<Scalar> shsa_tokens_backward(const CMapMat<Scalar>& x_tokens,
                                            const SPGAParams<Scalar>& p,
                                            const ShsaTokenCache<Scalar>& cache,
                                            const MatX<Scalar>& gy) {
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(p.attn_dim()));
  ShsaTokenGrads<Scalar> g;

  // Y = V * alpha^T
  MatX<Scalar> g_alpha = gy.transpose() * cache.v;
  MatX<Scalar> g_v = gy * cache.alpha;
  g.d_logits = softmax_masked_rows_backward(cache.alpha, g_alpha, cache.mask);
  MatX<Scalar> g_q = cache.k * g.d_logits.transpose() * scale;
  MatX<Scalar> g_k = cache.q * g.d_logits * scale;

  auto proj_back = [&](const ConvParams<Scalar>& proj, const MatX<Scalar>& g_out,
                       ProjGrads<Scalar>& slot, MatX<Scalar>& gx) {
    slot.d_kernel = VecX<Scalar>::Zero(proj.kernel.size());
    MapMat<Scalar>(slot.d_kernel.data(), proj.c_out, proj.c_in) = g_out * x_tokens.transpose();
    if (proj.has_bias()) slot.d_bias = g_out.rowwise().sum();
    gx.noalias() += detail::pointwise_weight(proj).transpose() * g_out;
  };

  g.dx_tokens = MatX<Scalar>::Zero(x_tokens.rows(), x_tokens.cols());
  proj_back(p.q_proj, g_q, g.q, g.dx_tokens);
  proj_back(p.k_proj, g_k, g.k, g.dx_tokens);
  proj_back(p.v_proj, g_v, g.v, g.dx_tokens);
  return g;
}

template <typename Scalar>
struct SPGAGrads {
  VecX<Scalar> d_gn_gamma, d_gn_beta;
  ProjGrads<Scalar> q, k, v;
  ConvGrads<Scalar> out;
  Tensor4<Scalar> dx;  // gate path excluded (frozen selection)
};

template <typename Scalar>
SPGAGrads<Scalar> spga_backward_fixed_support(
    const Tensor4<Scalar>& x, const SPGAParams<Scalar>& p,
    const std::vector<std::vector<std::vector<int>>>& supports, const Tensor4<Scalar>& gy) {
  p.validate();
  const int n_tokens = x.h * x.w;
  const int d = p.attn_dim();

  // Recompute the forward pieces.
  auto parts = channel_split(x, {p.narrow(), p.wide()});
  Tensor4<Scalar> x1n = group_norm(parts[0], p.gn_gamma, p.gn_beta, p.num_groups, p.gn_eps);
  std::vector<ShsaTokenCache<Scalar>> caches(static_cast<std::size_t>(x.n));
  Tensor4<Scalar> attended(x.n, d, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    const MaskMat mask = detail::mask_from_supports(supports[static_cast<std::size_t>(i)],
                                                    n_tokens);
    attended.item(i) = detail::shsa_masked(CMapMat<Scalar>(x1n.item(i)), p, mask,
                                           &caches[static_cast<std::size_t>(i)]);
  }
  Tensor4<Scalar> cat = channel_concat<Scalar>({attended, parts[1]});
  Tensor4<Scalar> z = conv2d(cat, p.out_proj);

  SPGAGrads<Scalar> g;
  Tensor4<Scalar> g_z = silu_backward(z, gy);
  g.out = conv2d_backward(cat, p.out_proj, g_z);

  // Slice the concat gradient.
  Tensor4<Scalar> g_att(x.n, d, x.h, x.w);
  Tensor4<Scalar> g_x2(x.n, p.wide(), x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    g_att.item(i) = g.out.dx.item(i).topRows(d);
    g_x2.item(i) = g.out.dx.item(i).bottomRows(p.wide());
  }

  Tensor4<Scalar> g_x1n(x.n, p.narrow(), x.h, x.w);
  auto zero_proj = [](const ConvParams<Scalar>& proj, ProjGrads<Scalar>& slot) {
    slot.d_kernel = VecX<Scalar>::Zero(proj.kernel.size());
    slot.d_bias = VecX<Scalar>::Zero(proj.has_bias() ? proj.c_out : 0);
  };
  zero_proj(p.q_proj, g.q);
  zero_proj(p.k_proj, g.k);
  zero_proj(p.v_proj, g.v);
  for (int i = 0; i < x.n; ++i) {
    ShsaTokenGrads<Scalar> ti = shsa_tokens_backward(CMapMat<Scalar>(x1n.item(i)), p,
                                                     caches[static_cast<std::size_t>(i)],
                                                     MatX<Scalar>(g_att.item(i)));
    g.q.d_kernel += ti.q.d_kernel;
    g.k.d_kernel += ti.k.d_kernel;
    g.v.d_kernel += ti.v.d_kernel;
    if (p.q_proj.has_bias()) g.q.d_bias += ti.q.d_bias;
    if (p.k_proj.has_bias()) g.k.d_bias += ti.k.d_bias;
    if (p.v_proj.has_bias()) g.v.d_bias += ti.v.d_bias;
    g_x1n.item(i) = ti.dx_tokens;
  }

  GroupNormGrads<Scalar> gn = group_norm_backward(parts[0], p.gn_gamma, p.num_groups, p.gn_eps,
                                                  g_x1n);
  g.d_gn_gamma = gn.d_gamma;
  g.d_gn_beta = gn.d_beta;
  g.dx = channel_concat<Scalar>({gn.dx, g_x2});
  return g;
}

}  // namespace cgf
