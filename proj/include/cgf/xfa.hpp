#pragma once

#include <cgf/backward.hpp>
#include <cgf/ops.hpp>
#include <cgf/random.hpp>
#include <cgf/tensor.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace cgf {

/// Shared sizing for XFABlocks and the CSP-structured XFAUnit around them.
/// `channels` is the width the named tensor carries; inside a unit the blocks
/// run at `csp_hidden`, see block_config().
struct XFAConfig {
  int channels = 0;
  int heads = 4;
  double ffn_ratio = 2.0;
  double drop_path_rate = 0.0;
  int n_blocks = 1;
  int csp_hidden = 0;

  int ffn_hidden() const { return static_cast<int>(std::lround(channels * ffn_ratio)); }

  XFAConfig block_config() const {
    XFAConfig b = *this;
    b.channels = csp_hidden;
    return b;
  }

  void validate() const {
    if (channels < 1 || heads < 1 || channels % heads != 0) {
      throw std::invalid_argument("XFAConfig: channels=" + std::to_string(channels) +
                                  " must be positive and divisible by heads=" +
                                  std::to_string(heads));
    }
    if (n_blocks < 1) throw std::invalid_argument("XFAConfig: n_blocks must be >= 1");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) {
      throw std::invalid_argument("XFAConfig: drop_path_rate must lie in [0,1)");
    }
    if (ffn_hidden() < 1) throw std::invalid_argument("XFAConfig: ffn hidden width collapses");
  }
};

/// attn_dw is a 3x3 conv grouped by heads (depthwise within each head group);
/// everything else is pointwise.
template <typename Scalar>
struct XFABlockParams {
  ConvParams<Scalar> attn_dw;
  ConvParams<Scalar> attn_v;
  ConvParams<Scalar> attn_out;
  ConvParams<Scalar> ffn_in;
  ConvParams<Scalar> ffn_out;
};

template <typename Scalar>
struct XFAUnitParams {
  ConvParams<Scalar> stem;   // 1x1, C_in -> 2*csp_hidden
  std::vector<XFABlockParams<Scalar>> blocks;
  ConvParams<Scalar> merge;  // 1x1, (2+n_blocks)*csp_hidden -> C_out
};

namespace detail {

template <typename Scalar>
void check_block_shapes(const Tensor4<Scalar>& x, const XFABlockParams<Scalar>& p,
                        const XFAConfig& cfg) {
  cfg.validate();
  if (x.c != cfg.channels) {
    throw std::invalid_argument("xfa: input has " + std::to_string(x.c) +
                                " channels, config says " + std::to_string(cfg.channels));
  }
  if (p.attn_dw.groups != cfg.heads || p.attn_dw.c_in != cfg.channels ||
      p.attn_dw.c_out != cfg.channels || p.attn_dw.k_h != 3 || p.attn_dw.k_w != 3) {
    throw std::invalid_argument("xfa: attn_dw must be a 3x3 conv over " +
                                std::to_string(cfg.channels) + " channels grouped by heads=" +
                                std::to_string(cfg.heads));
  }
}

}  // namespace detail

/// gate = sigmoid(grouped 3x3 logits), out = 1x1(gate .* 1x1(x)).
template <typename Scalar>
Tensor4<Scalar> conv_attention(const Tensor4<Scalar>& x, const XFABlockParams<Scalar>& p,
                               const XFAConfig& cfg) {
  detail::check_block_shapes(x, p, cfg);
  Tensor4<Scalar> gate = sigmoid(conv2d(x, p.attn_dw));
  Tensor4<Scalar> value = conv2d(x, p.attn_v);
  return conv2d(hadamard(gate, value), p.attn_out);
}

/// X'  = X  + DropPath(ConvAttention(X))
/// X'' = X' + DropPath(FFN(X')), FFN = 1x1 expand -> SiLU -> 1x1 project.
/// DropPath is the identity when not training or the rate is zero; otherwise
/// per-sample stochastic depth with survival scaling 1/(1-rate).
template <typename Scalar>
Tensor4<Scalar> xfa_block_forward(const Tensor4<Scalar>& x, const XFABlockParams<Scalar>& p,
                                  const XFAConfig& cfg, bool training = false,
                                  Rng* rng = nullptr) {
  const bool stochastic = training && cfg.drop_path_rate > 0.0;
  if (stochastic && rng == nullptr) {
    throw std::invalid_argument("xfa_block_forward: training with drop_path_rate > 0 needs an rng");
  }

  auto add_branch = [&](Tensor4<Scalar>& acc, const Tensor4<Scalar>& branch) {
    if (!stochastic) {
      acc.data += branch.data;
      return;
    }
    const Scalar scale = Scalar(1.0 / (1.0 - cfg.drop_path_rate));
    for (int i = 0; i < acc.n; ++i) {
      if (rng->uniform() < cfg.drop_path_rate) continue;  // branch dropped for this sample
      acc.item(i) += branch.item(i) * scale;
    }
  };

  Tensor4<Scalar> x1 = x;
  add_branch(x1, conv_attention(x, p, cfg));

  Tensor4<Scalar> hidden = silu(conv2d(x1, p.ffn_in));
  Tensor4<Scalar> x2 = x1;
  add_branch(x2, conv2d(hidden, p.ffn_out));
  return x2;
}

/// stem 1x1 -> split in two csp_hidden paths -> chain XFABlocks on the second
/// path -> concat every intermediate -> merge 1x1.
template <typename Scalar>
Tensor4<Scalar> xfa_unit_forward(const Tensor4<Scalar>& x, const XFAUnitParams<Scalar>& p,
                                 const XFAConfig& cfg, bool training = false,
                                 Rng* rng = nullptr) {
  if (static_cast<int>(p.blocks.size()) != cfg.n_blocks) {
    throw std::invalid_argument("xfa_unit_forward: expected " + std::to_string(cfg.n_blocks) +
                                " blocks, got " + std::to_string(p.blocks.size()));
  }
  const XFAConfig bcfg = cfg.block_config();
  Tensor4<Scalar> stem = conv2d(x, p.stem);
  std::vector<Tensor4<Scalar>> ys = channel_split(stem, {cfg.csp_hidden, cfg.csp_hidden});
  for (int b = 0; b < cfg.n_blocks; ++b) {
    ys.push_back(xfa_block_forward(ys.back(), p.blocks[b], bcfg, training, rng));
  }
  return conv2d(channel_concat(ys), p.merge);
}

// ---------------------------------------------------------------------------
// Analytic backward (inference graph: DropPath identity).

template <typename Scalar>
struct XFABlockGrads {
  ConvGrads<Scalar> attn_dw, attn_v, attn_out, ffn_in, ffn_out;
  Tensor4<Scalar> dx;
};

template <typename Scalar>
XFABlockGrads<Scalar> xfa_block_backward(const Tensor4<Scalar>& x,
                                         const XFABlockParams<Scalar>& p, const XFAConfig& cfg,
                                         const Tensor4<Scalar>& gy) {
  detail::check_block_shapes(x, p, cfg);

  // Recompute forward intermediates.
  Tensor4<Scalar> dw_logits = conv2d(x, p.attn_dw);
  Tensor4<Scalar> gate = sigmoid(dw_logits);
  Tensor4<Scalar> value = conv2d(x, p.attn_v);
  Tensor4<Scalar> gated = hadamard(gate, value);
  Tensor4<Scalar> x1 = x;
  x1.data += conv2d(gated, p.attn_out).data;
  Tensor4<Scalar> pre_act = conv2d(x1, p.ffn_in);
  Tensor4<Scalar> hidden = silu(pre_act);

  XFABlockGrads<Scalar> g;

  // x2 = x1 + ffn_out(silu(ffn_in(x1)))
  g.ffn_out = conv2d_backward(hidden, p.ffn_out, gy);
  Tensor4<Scalar> g_pre = silu_backward(pre_act, g.ffn_out.dx);
  g.ffn_in = conv2d_backward(x1, p.ffn_in, g_pre);
  Tensor4<Scalar> g_x1 = gy;
  g_x1.data += g.ffn_in.dx.data;

  // x1 = x + attn_out(gate .* value)
  g.attn_out = conv2d_backward(gated, p.attn_out, g_x1);
  Tensor4<Scalar> g_gate = hadamard(g.attn_out.dx, value);
  Tensor4<Scalar> g_value = hadamard(g.attn_out.dx, gate);
  Tensor4<Scalar> g_logits = sigmoid_backward(dw_logits, g_gate);
  g.attn_dw = conv2d_backward(x, p.attn_dw, g_logits);
  g.attn_v = conv2d_backward(x, p.attn_v, g_value);

  g.dx = g_x1;
  g.dx.data += g.attn_dw.dx.data;
  g.dx.data += g.attn_v.dx.data;
  return g;
}

template <typename Scalar>
struct XFAUnitGrads {
  ConvGrads<Scalar> stem;
  std::vector<XFABlockGrads<Scalar>> blocks;
  ConvGrads<Scalar> merge;
  Tensor4<Scalar> dx;
};

template <typename Scalar>
XFAUnitGrads<Scalar> xfa_unit_backward(const Tensor4<Scalar>& x, const XFAUnitParams<Scalar>& p,
                                       const XFAConfig& cfg, const Tensor4<Scalar>& gy) {
  const XFAConfig bcfg = cfg.block_config();
  Tensor4<Scalar> stem = conv2d(x, p.stem);
  std::vector<Tensor4<Scalar>> ys = channel_split(stem, {cfg.csp_hidden, cfg.csp_hidden});
  for (int b = 0; b < cfg.n_blocks; ++b) {
    ys.push_back(xfa_block_forward(ys.back(), p.blocks[b], bcfg));
  }
  Tensor4<Scalar> cat = channel_concat(ys);

  XFAUnitGrads<Scalar> g;
  g.merge = conv2d_backward(cat, p.merge, gy);

  // Slice the concat gradient back onto each intermediate.
  std::vector<Tensor4<Scalar>> g_ys;
  g_ys.reserve(ys.size());
  for (std::size_t t = 0; t < ys.size(); ++t) {
    Tensor4<Scalar> part(x.n, cfg.csp_hidden, ys[0].h, ys[0].w);
    for (int i = 0; i < x.n; ++i) {
      part.item(i) = g.merge.dx.item(i).middleRows(static_cast<int>(t) * cfg.csp_hidden,
                                                   cfg.csp_hidden);
    }
    g_ys.push_back(std::move(part));
  }

  // Walk the chain backwards; ys[1+b] feeds block b.
  g.blocks.resize(cfg.n_blocks);
  for (int b = cfg.n_blocks - 1; b >= 0; --b) {
    g.blocks[b] = xfa_block_backward(ys[static_cast<std::size_t>(b) + 1], p.blocks[b], bcfg,
                                     g_ys[static_cast<std::size_t>(b) + 2]);
    g_ys[static_cast<std::size_t>(b) + 1].data += g.blocks[b].dx.data;
  }

  Tensor4<Scalar> g_stem = channel_concat<Scalar>({g_ys[0], g_ys[1]});
  g.stem = conv2d_backward(x, p.stem, g_stem);
  g.dx = g.stem.dx;
  return g;
}

}  // namespace cgf
