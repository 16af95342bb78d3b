#pragma once

// Sequential reconstruction backbone: shared ViT encoder, a target/reference
// decoder pair intertwined through cross-attention, and three dense heads
// (query, pointmap/confidence, Gaussian parameters). Dense maps come from
// per-token MLPs expanded by pixel-unshuffle.

#include <string>
#include <vector>

#include "pfr/nn.hpp"

namespace pfr {

struct BackboneConfig {
  int image_size = 64;
  int patch_size = 8;
  int dim_enc = 128;
  int dim_dec = 96;
  int dim_mem = 96;  // query/key/value width of the memory bank
  int n_enc_layers = 4;
  int n_dec_layers = 4;
  int n_heads = 4;
  int sh_degree = 1;  // 0..3
  int mem_depth = 2;  // memory readout attention layers
  int head_hidden = 384;
  uint64_t seed = 1;

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ValueError(strfmt("image_size %d must be a positive multiple of patch_size %d",
                              image_size, patch_size));
    if (dim_enc % n_heads != 0 || dim_dec % n_heads != 0)
      throw ValueError("encoder/decoder dims must be divisible by n_heads");
    if (sh_degree < 0 || sh_degree > 3) throw ValueError("sh_degree must be in 0..3");
    if (mem_depth < 1) throw ValueError("mem_depth must be >= 1");
  }

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int sh_coeffs() const { return (sh_degree + 1) * (sh_degree + 1); }
  // per-pixel raw Gaussian channels: 3 log-scale + 4 quaternion + 1 opacity
  // logit + 3*(d+1)^2 SH
  int gauss_channels() const { return 8 + 3 * sh_coeffs(); }
};

template <typename T>
struct DenseHeads {
  Tensor<T> pointmap;  // [H x W x 3]
  Tensor<T> conf;      // [H x W], >= 1 by construction
};

template <typename T>
struct Backbone {
  BackboneConfig cfg;

  Linear<T> patch_proj;
  int pos = -1;
  std::vector<EncoderBlock<T>> enc_blocks;
  LayerNormP<T> enc_norm;

  Linear<T> proj_tgt, proj_ref;
  std::vector<DecoderBlock<T>> tgt_blocks, ref_blocks;
  LayerNormP<T> tgt_norm, ref_norm;

  Linear<T> qhead_fc1, qhead_fc2;
  Linear<T> out_fc1, out_fc2;
  Linear<T> gauss_fc1, gauss_fc2;

  Backbone() = default;

  Backbone(ParamStore<T>& ps, Rng& rng, const BackboneConfig& c) : cfg(c) {
    cfg.validate();
    const int ps2 = cfg.patch_size * cfg.patch_size;
    patch_proj = Linear<T>(ps, rng, "enc.patch", ps2 * 3, cfg.dim_enc);
    pos = ps.add("enc.pos", {cfg.tokens(), cfg.dim_enc},
                 init::normal<T>(rng, static_cast<int64_t>(cfg.tokens()) * cfg.dim_enc, 0.02));
    for (int i = 0; i < cfg.n_enc_layers; ++i)
      enc_blocks.emplace_back(ps, rng, strfmt("enc.block%d", i), cfg.dim_enc, cfg.n_heads);
    enc_norm = LayerNormP<T>(ps, "enc.norm", cfg.dim_enc);

    proj_tgt = Linear<T>(ps, rng, "dec.proj_tgt", cfg.dim_enc, cfg.dim_dec);
    proj_ref = Linear<T>(ps, rng, "dec.proj_ref", cfg.dim_mem, cfg.dim_dec);
    for (int i = 0; i < cfg.n_dec_layers; ++i) {
      tgt_blocks.emplace_back(ps, rng, strfmt("dec.tgt.block%d", i), cfg.dim_dec, cfg.n_heads);
      ref_blocks.emplace_back(ps, rng, strfmt("dec.ref.block%d", i), cfg.dim_dec, cfg.n_heads);
    }
    tgt_norm = LayerNormP<T>(ps, "dec.tgt.norm", cfg.dim_dec);
    ref_norm = LayerNormP<T>(ps, "dec.ref.norm", cfg.dim_dec);

    qhead_fc1 = Linear<T>(ps, rng, "head.query.fc1", cfg.dim_dec + cfg.dim_enc, cfg.head_hidden);
    qhead_fc2 = Linear<T>(ps, rng, "head.query.fc2", cfg.head_hidden, cfg.dim_mem);
    out_fc1 = Linear<T>(ps, rng, "head.out.fc1", cfg.dim_dec, cfg.head_hidden);
    out_fc2 = Linear<T>(ps, rng, "head.out.fc2", cfg.head_hidden, ps2 * 4);
    gauss_fc1 = Linear<T>(ps, rng, "head.gauss.fc1", cfg.dim_dec, cfg.head_hidden);
    gauss_fc2 = Linear<T>(ps, rng, "head.gauss.fc2", cfg.head_hidden, ps2 * cfg.gauss_channels());

    // Final Gaussian layer starts near a benign configuration: small scales,
    // identity rotation, low opacity, neutral color.
    auto& w = ps.entries[static_cast<size_t>(gauss_fc2.w)].value;
    for (auto& x : w) x *= T(0.1);
    auto& b = ps.entries[static_cast<size_t>(gauss_fc2.b)].value;
    const int gc = cfg.gauss_channels();
    for (int p = 0; p < ps2; ++p) {
      T* pb = b.data() + static_cast<size_t>(p) * gc;
      pb[0] = pb[1] = pb[2] = T(-3.0);  // log-scale
      pb[3] = T(1);                     // quaternion w
      pb[4] = pb[5] = pb[6] = T(0);
      pb[7] = T(-2.0);  // opacity logit
      for (int k = 8; k < gc; ++k) pb[k] = T(0);
    }
  }

  // Image -> patch tokens with learned position embedding.
  Tensor<T> patch_embed(WeightCtx<T>& ctx, const std::vector<T>& rgb_hwc) const {
    const int hw = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
    if (static_cast<int64_t>(rgb_hwc.size()) != static_cast<int64_t>(hw) * hw * 3)
      throw ValueError(strfmt("patch_embed: expected a %dx%d RGB image (%d values), got %zu", hw,
                              hw, hw * hw * 3, rgb_hwc.size()));
    std::vector<T> tok(static_cast<size_t>(cfg.tokens()) * p * p * 3);
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        T* dst = tok.data() + (static_cast<size_t>(gy) * g + gx) * (p * p * 3);
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            for (int c = 0; c < 3; ++c)
              dst[(py * p + px) * 3 + c] =
                  rgb_hwc[((static_cast<size_t>(gy * p + py) * hw) + (gx * p + px)) * 3 + c];
      }
    auto patches = ctx.tape().constant({cfg.tokens(), p * p * 3}, std::move(tok));
    return add(patch_proj(ctx, patches), ctx[pos]);
  }

  Tensor<T> encode(WeightCtx<T>& ctx, const Tensor<T>& tokens) const {
    if (tokens.shape() != std::vector<int>{cfg.tokens(), cfg.dim_enc})
      throw ShapeError("encode: expected " + shape_str({cfg.tokens(), cfg.dim_enc}) + ", got " +
                       shape_str(tokens.shape()));
    Tensor<T> x = tokens;
    for (const auto& blk : enc_blocks) x = blk(ctx, x);
    return enc_norm(ctx, x);
  }

  // Intertwined decoding: at every layer each branch cross-attends to the
  // other branch's tokens as they entered that layer.
  std::pair<Tensor<T>, Tensor<T>> decode_pair(WeightCtx<T>& ctx, const Tensor<T>& f_t,
                                              const Tensor<T>& f_fused) const {
    if (f_t.shape()[0] != f_fused.shape()[0])
      throw ShapeError("decode_pair: token count mismatch " + shape_str(f_t.shape()) + " vs " +
                       shape_str(f_fused.shape()));
    Tensor<T> x = proj_tgt(ctx, f_t);
    Tensor<T> y = proj_ref(ctx, f_fused);
    for (size_t i = 0; i < tgt_blocks.size(); ++i) {
      Tensor<T> x_in = x, y_in = y;
      x = tgt_blocks[i](ctx, x_in, y_in);
      y = ref_blocks[i](ctx, y_in, x_in);
    }
    return {tgt_norm(ctx, x), ref_norm(ctx, y)};
  }

  // Query feature from the target-decoder output and the frame's encoding.
  Tensor<T> query_head(WeightCtx<T>& ctx, const Tensor<T>& h_tgt, const Tensor<T>& f_t) const {
    return qhead_fc2(ctx, gelu(qhead_fc1(ctx, concat_cols(h_tgt, f_t))));
  }

  DenseHeads<T> out_head(WeightCtx<T>& ctx, const Tensor<T>& h_ref) const {
    const int hw = cfg.image_size;
    auto per_tok = out_fc2(ctx, gelu(out_fc1(ctx, h_ref)));
    auto dense = reshape(pixel_unshuffle(per_tok, cfg.grid(), cfg.patch_size, 4), {hw * hw, 4});
    DenseHeads<T> out;
    out.pointmap = reshape(slice_cols(dense, 0, 3), {hw, hw, 3});
    out.conf = reshape(add_scalar(exp_(slice_cols(dense, 3, 1)), T(1)), {hw, hw});
    return out;
  }

  // Raw per-pixel Gaussian parameters [H x W x gauss_channels()]:
  // 3 log-scale, 4 quaternion, 1 opacity logit, 3*(d+1)^2 SH (channel-major).
  Tensor<T> gaussian_head(WeightCtx<T>& ctx, const Tensor<T>& h_ref) const {
    const int hw = cfg.image_size;
    auto per_tok = gauss_fc2(ctx, gelu(gauss_fc1(ctx, h_ref)));
    return pixel_unshuffle(per_tok, cfg.grid(), cfg.patch_size, cfg.gauss_channels());
  }
};

}  // namespace pfr
