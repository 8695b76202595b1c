#pragma once

#include <cgf/archive.hpp>
#include <cgf/assembly.hpp>
#include <cgf/gcfc3.hpp>
#include <cgf/random.hpp>

#include <string>
#include <utility>
#include <vector>

// Archive naming:
//   stem.{weight|bias}, down3.*, down4.*
//   xfa.{unit}.{stem|merge}.{weight|bias}
//   xfa.{unit}.block{i}.{attn_dw|attn_v|attn_out|ffn_in|ffn_out}.{weight|bias}
//   spga.{gn|q_proj|k_proj|v_proj|gate_proj|out_proj}.{weight|bias}
//   gcfc3.{n}.branch{i}.{conv|bn}{j}.{weight|bias|gamma|beta|mean|var}
//   gcfc3.{n}.fuse.{weight|bias}   (the pointwise mix, kept across fusion)
//   gcfc3.{n}.fused.{weight|bias}  (deploy form written by `fuse`)
// BN eps is not archived; readers assume the library default 1e-5.

namespace cgf {

template <typename Scalar>
void add_conv(WeightArchive& a, const std::string& prefix, const ConvParams<Scalar>& p) {
  a.add(prefix + ".weight", {p.c_out, p.c_in_per_group(), p.k_h, p.k_w}, p.kernel);
  if (p.has_bias()) a.add(prefix + ".bias", {p.c_out}, p.bias);
}

template <typename Scalar>
ConvParams<Scalar> get_conv(const WeightArchive& a, const std::string& prefix, int stride,
                            int padding, int groups = 1) {
  const TensorEntry* e = a.find(prefix + ".weight");
  if (e == nullptr) throw std::runtime_error("archive: missing tensor '" + prefix + ".weight'");
  if (e->shape.size() != 4 || e->shape[2] != e->shape[3]) {
    throw std::runtime_error("archive: '" + prefix + ".weight' is not a conv kernel");
  }
  ConvParams<Scalar> p;
  p.c_out = static_cast<int>(e->shape[0]);
  p.c_in = static_cast<int>(e->shape[1]) * groups;
  p.k_h = static_cast<int>(e->shape[2]);
  p.k_w = static_cast<int>(e->shape[3]);
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  p.kernel = a.get<Scalar>(prefix + ".weight");
  if (a.has(prefix + ".bias")) p.bias = a.get<Scalar>(prefix + ".bias");
  p.validate();
  return p;
}

template <typename Scalar>
void add_bn(WeightArchive& a, const std::string& prefix, const BNParams<Scalar>& p) {
  const std::int64_t c = p.channels();
  a.add(prefix + ".gamma", {c}, p.gamma);
  a.add(prefix + ".beta", {c}, p.beta);
  a.add(prefix + ".mean", {c}, p.running_mean);
  a.add(prefix + ".var", {c}, p.running_var);
}

template <typename Scalar>
BNParams<Scalar> get_bn(const WeightArchive& a, const std::string& prefix) {
  BNParams<Scalar> p;
  p.gamma = a.get<Scalar>(prefix + ".gamma");
  p.beta = a.get<Scalar>(prefix + ".beta");
  p.running_mean = a.get<Scalar>(prefix + ".mean");
  p.running_var = a.get<Scalar>(prefix + ".var");
  p.validate();
  return p;
}

// --------------------------------------------------------------------------
// XFA unit.

template <typename Scalar>
void add_xfa_unit(WeightArchive& a, const std::string& prefix,
                  const XFAUnitParams<Scalar>& p) {
  add_conv(a, prefix + ".stem", p.stem);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string bp = prefix + ".block" + std::to_string(i);
    add_conv(a, bp + ".attn_dw", p.blocks[i].attn_dw);
    add_conv(a, bp + ".attn_v", p.blocks[i].attn_v);
    add_conv(a, bp + ".attn_out", p.blocks[i].attn_out);
    add_conv(a, bp + ".ffn_in", p.blocks[i].ffn_in);
    add_conv(a, bp + ".ffn_out", p.blocks[i].ffn_out);
  }
  add_conv(a, prefix + ".merge", p.merge);
}

template <typename Scalar>
XFAUnitParams<Scalar> get_xfa_unit(const WeightArchive& a, const std::string& prefix,
                                   const XFAConfig& cfg) {
  XFAUnitParams<Scalar> p;
  p.stem = get_conv<Scalar>(a, prefix + ".stem", 1, 0);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    const std::string bp = prefix + ".block" + std::to_string(i);
    XFABlockParams<Scalar> b;
    b.attn_dw = get_conv<Scalar>(a, bp + ".attn_dw", 1, 1, cfg.heads);
    b.attn_v = get_conv<Scalar>(a, bp + ".attn_v", 1, 0);
    b.attn_out = get_conv<Scalar>(a, bp + ".attn_out", 1, 0);
    b.ffn_in = get_conv<Scalar>(a, bp + ".ffn_in", 1, 0);
    b.ffn_out = get_conv<Scalar>(a, bp + ".ffn_out", 1, 0);
    p.blocks.push_back(std::move(b));
  }
  p.merge = get_conv<Scalar>(a, prefix + ".merge", 1, 0);
  return p;
}

// --------------------------------------------------------------------------
// SPGA.

template <typename Scalar>
void add_spga(WeightArchive& a, const SPGAParams<Scalar>& p) {
  a.add("spga.gn.weight", {p.narrow()}, p.gn_gamma);
  a.add("spga.gn.bias", {p.narrow()}, p.gn_beta);
  add_conv(a, "spga.q_proj", p.q_proj);
  add_conv(a, "spga.k_proj", p.k_proj);
  add_conv(a, "spga.v_proj", p.v_proj);
  add_conv(a, "spga.gate_proj", p.gate_proj);
  add_conv(a, "spga.out_proj", p.out_proj);
}

template <typename Scalar>
SPGAParams<Scalar> get_spga(const WeightArchive& a, int channels, int num_groups) {
  SPGAParams<Scalar> p;
  p.channels = channels;
  p.num_groups = num_groups;
  p.gn_gamma = a.get<Scalar>("spga.gn.weight");
  p.gn_beta = a.get<Scalar>("spga.gn.bias");
  p.q_proj = get_conv<Scalar>(a, "spga.q_proj", 1, 0);
  p.k_proj = get_conv<Scalar>(a, "spga.k_proj", 1, 0);
  p.v_proj = get_conv<Scalar>(a, "spga.v_proj", 1, 0);
  p.gate_proj = get_conv<Scalar>(a, "spga.gate_proj", 1, 0);
  p.out_proj = get_conv<Scalar>(a, "spga.out_proj", 1, 0);
  p.validate();
  return p;
}

// --------------------------------------------------------------------------
// GCFC3 train and deploy forms.

template <typename Scalar>
void add_gcfc3_train(WeightArchive& a, const std::string& prefix, const GCFC3Params<Scalar>& p) {
  for (std::size_t i = 0; i < p.branches.size(); ++i) {
    const std::string bp = prefix + ".branch" + std::to_string(i);
    add_conv(a, bp + ".conv0", p.branches[i].conv0);
    add_bn(a, bp + ".bn0", p.branches[i].bn0);
    if (p.branches[i].has_tail()) {
      add_conv(a, bp + ".conv1", p.branches[i].conv1);
      add_bn(a, bp + ".bn1", p.branches[i].bn1);
    }
  }
  add_conv(a, prefix + ".fuse", p.fuse);
}

template <typename Scalar>
void add_gcfc3_fused(WeightArchive& a, const std::string& prefix, const FusedGCFC3<Scalar>& f) {
  add_conv(a, prefix + ".fused", f.fused3x3);
  add_conv(a, prefix + ".fuse", f.fuse);
}

template <typename Scalar>
GCFC3Params<Scalar> get_gcfc3_train(const WeightArchive& a, const std::string& prefix) {
  GCFC3Params<Scalar> p;
  int i = 0;
  while (a.has(prefix + ".branch" + std::to_string(i) + ".conv0.weight")) {
    const std::string bp = prefix + ".branch" + std::to_string(i);
    BranchSpec<Scalar> br;
    const bool tail = a.has(bp + ".conv1.weight");
    const TensorEntry* k0 = a.find(bp + ".conv0.weight");
    const int k = static_cast<int>(k0->shape[2]);
    br.conv0 = get_conv<Scalar>(a, bp + ".conv0", 1, k == 3 ? 1 : 0);
    br.bn0 = get_bn<Scalar>(a, bp + ".bn0");
    if (tail) {
      br.kind = BranchKind::Conv3x3BN1x1BN;
      br.conv1 = get_conv<Scalar>(a, bp + ".conv1", 1, 0);
      br.bn1 = get_bn<Scalar>(a, bp + ".bn1");
    } else {
      br.kind = k == 3 ? BranchKind::Conv3x3BN : BranchKind::Conv1x1BN;
    }
    p.branches.push_back(std::move(br));
    ++i;
  }
  if (p.branches.empty()) {
    throw std::runtime_error("archive: no train-form branches found under '" + prefix + "'");
  }
  p.fuse = get_conv<Scalar>(a, prefix + ".fuse", 1, 0);
  p.c_transform = p.branches[0].conv0.c_in;
  p.c_bypass = p.fuse.c_in - p.c_transform;
  p.validate();
  return p;
}

template <typename Scalar>
FusedGCFC3<Scalar> get_gcfc3_fused(const WeightArchive& a, const std::string& prefix) {
  FusedGCFC3<Scalar> f;
  f.fused3x3 = get_conv<Scalar>(a, prefix + ".fused", 1, 1);
  f.fuse = get_conv<Scalar>(a, prefix + ".fuse", 1, 0);
  f.c_transform = f.fused3x3.c_in;
  f.c_bypass = f.fuse.c_in - f.c_transform;
  return f;
}

// --------------------------------------------------------------------------
// Whole assembly.

template <typename Scalar>
WeightArchive assembly_to_archive(const AssemblyParams<Scalar>& p) {
  WeightArchive a;
  add_conv(a, "stem", p.stem);
  add_conv(a, "down3", p.down3);
  add_conv(a, "down4", p.down4);
  add_xfa_unit(a, "xfa.2", p.unit2);
  add_xfa_unit(a, "xfa.3", p.unit3);
  add_xfa_unit(a, "xfa.4", p.unit4);
  add_spga(a, p.spga);
  if (p.neck_fused.has_value()) {
    add_gcfc3_fused(a, "gcfc3.0", *p.neck_fused);
  } else {
    add_gcfc3_train(a, "gcfc3.0", p.neck);
  }
  return a;
}

template <typename Scalar>
AssemblyParams<Scalar> assembly_from_archive(const WeightArchive& a, const AssemblyConfig& cfg) {
  cfg.validate();
  AssemblyParams<Scalar> p;
  p.stem = get_conv<Scalar>(a, "stem", 4, 1);
  p.down3 = get_conv<Scalar>(a, "down3", 2, 1);
  p.down4 = get_conv<Scalar>(a, "down4", 2, 1);
  p.unit2 = get_xfa_unit<Scalar>(a, "xfa.2", cfg.stage_config(2));
  p.unit3 = get_xfa_unit<Scalar>(a, "xfa.3", cfg.stage_config(3));
  p.unit4 = get_xfa_unit<Scalar>(a, "xfa.4", cfg.stage_config(4));
  p.spga = get_spga<Scalar>(a, cfg.c4, cfg.spga_groups);
  if (a.has("gcfc3.0.branch0.conv0.weight")) {
    p.neck = get_gcfc3_train<Scalar>(a, "gcfc3.0");
  }
  if (a.has("gcfc3.0.fused.weight")) {
    p.neck_fused = get_gcfc3_fused<Scalar>(a, "gcfc3.0");
  }
  return p;
}

// --------------------------------------------------------------------------
// Archive-level fusion: rewrite train-form GCFC3 tensors into deploy form.

struct FuseOutcome {
  WeightArchive archive;
  std::vector<std::pair<std::string, double>> probe_diffs;  // block prefix -> max abs diff
};

inline std::vector<int> list_gcfc3_train_blocks(const WeightArchive& a) {
  std::vector<int> out;
  for (int n = 0; n < 1024; ++n) {
    if (a.has("gcfc3." + std::to_string(n) + ".branch0.conv0.weight")) out.push_back(n);
  }
  return out;
}

template <typename Scalar>
FuseOutcome fuse_archive_typed(const WeightArchive& in, const std::vector<int>& blocks,
                               std::uint64_t probe_seed) {
  FuseOutcome outcome;
  // Copy everything that is not a train-form branch of a block being fused.
  for (const auto& e : in.manifest) {
    bool drop = false;
    for (int n : blocks) {
      const std::string bp = "gcfc3." + std::to_string(n) + ".branch";
      if (e.name.rfind(bp, 0) == 0) {
        drop = true;
        break;
      }
    }
    if (drop) continue;
    TensorEntry copy = e;
    copy.byte_offset = outcome.archive.blob.size();
    outcome.archive.blob.insert(outcome.archive.blob.end(), in.blob.begin() + e.byte_offset,
                                in.blob.begin() + e.byte_offset + e.byte_size());
    outcome.archive.manifest.push_back(std::move(copy));
  }

  Rng rng(probe_seed);
  for (int n : blocks) {
    const std::string prefix = "gcfc3." + std::to_string(n);
    GCFC3Params<Scalar> train = get_gcfc3_train<Scalar>(in, prefix);
    FusedGCFC3<Scalar> fused = fuse_branches(train);
    add_conv(outcome.archive, prefix + ".fused", fused.fused3x3);

    Tensor4<Scalar> probe(2, train.c_transform + train.c_bypass, 8, 8);
    rng.fill_uniform(probe, -1.0, 1.0);
    const double diff =
        max_abs_diff(gcfc3_forward_train(probe, train), gcfc3_forward_deploy(probe, fused));
    outcome.probe_diffs.emplace_back(prefix, diff);
  }
  outcome.archive.validate();
  return outcome;
}

inline FuseOutcome fuse_archive(const WeightArchive& in, std::uint64_t probe_seed = 0x9e3779b9) {
  const std::vector<int> blocks = list_gcfc3_train_blocks(in);
  if (blocks.empty()) {
    throw std::runtime_error("no train-form branches found");
  }
  const TensorEntry* probe =
      in.find("gcfc3." + std::to_string(blocks[0]) + ".branch0.conv0.weight");
  if (probe->dtype == Dtype::F32) {
    return fuse_archive_typed<float>(in, blocks, probe_seed);
  }
  return fuse_archive_typed<double>(in, blocks, probe_seed);
}

}  // namespace cgf
