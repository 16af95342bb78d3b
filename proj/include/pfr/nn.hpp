#pragma once

// Parameter store and the transformer building blocks. Modules hold indices
// into a ParamStore; a WeightCtx materializes each parameter as a leaf on the
// tape of the current forward pass (once per tape).

#include <string>
#include <unordered_map>
#include <vector>

#include "pfr/checkpoint.hpp"
#include "pfr/common.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

template <typename T>
struct ParamStore {
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<T> value;
  };
  std::vector<Entry> entries;
  std::unordered_map<std::string, int> by_name;

  int add(const std::string& name, std::vector<int> shape, std::vector<T> value) {
    if (by_name.count(name)) throw StateError("duplicate parameter name: " + name);
    if (static_cast<int64_t>(value.size()) != numel_of(shape))
      throw ShapeError("parameter " + name + " value/shape mismatch");
    entries.push_back({name, std::move(shape), std::move(value)});
    by_name[name] = static_cast<int>(entries.size()) - 1;
    return static_cast<int>(entries.size()) - 1;
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& e : entries) n += numel_of(e.shape);
    return n;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    for (const auto& e : entries) {
      CheckpointTensor t;
      t.shape = e.shape;
      t.data.assign(e.value.begin(), e.value.end());
      c[e.name] = std::move(t);
    }
    return c;
  }

  // Strict load: every parameter must be present with a matching shape.
  void from_checkpoint(const Checkpoint& c) {
    for (auto& e : entries) {
      auto it = c.find(e.name);
      if (it == c.end()) throw FormatError("checkpoint missing parameter: " + e.name);
      if (it->second.shape != e.shape)
        throw FormatError("checkpoint shape mismatch for " + e.name + ": expected " +
                          shape_str(e.shape) + ", got " + shape_str(it->second.shape));
      e.value.assign(it->second.data.begin(), it->second.data.end());
    }
  }
};

// Per-tape leaf cache. trainable=false enters weights as constants so
// inference tapes stay gradient-free.
template <typename T>
class WeightCtx {
 public:
  WeightCtx(Tape<T>& tape, ParamStore<T>& store, bool trainable)
      : tape_(&tape), store_(&store), trainable_(trainable), ids_(store.entries.size(), -1) {}

  Tensor<T> operator[](int idx) {
    if (ids_[static_cast<size_t>(idx)] < 0) {
      auto& e = store_->entries[static_cast<size_t>(idx)];
      Tensor<T> leaf = tape_->leaf(e.shape, e.value, trainable_);
      ids_[static_cast<size_t>(idx)] = leaf.id;
    }
    return {tape_, ids_[static_cast<size_t>(idx)]};
  }

  Tape<T>& tape() { return *tape_; }

  // Reads accumulated leaf gradients back out, keyed by store index.
  void collect_grads(std::vector<std::vector<T>>& grads) {
    grads.assign(store_->entries.size(), {});
    for (size_t i = 0; i < ids_.size(); ++i) {
      if (ids_[i] < 0) continue;
      const auto& g = tape_->node(ids_[i]).grad;
      if (!g.empty()) grads[i] = g;
    }
  }

 private:
  Tape<T>* tape_;
  ParamStore<T>* store_;
  bool trainable_;
  std::vector<int> ids_;
};

namespace init {

template <typename T>
std::vector<T> xavier(Rng& rng, int fan_in, int fan_out) {
  double std = std::sqrt(2.0 / (fan_in + fan_out));
  std::vector<T> v(static_cast<size_t>(fan_in) * fan_out);
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std));
  return v;
}

template <typename T>
std::vector<T> normal(Rng& rng, int64_t n, double std) {
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, std));
  return v;
}

template <typename T>
std::vector<T> constant(int64_t n, T c) {
  return std::vector<T>(static_cast<size_t>(n), c);
}

}  // namespace init

template <typename T>
struct Linear {
  int w = -1, b = -1;
  int in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore<T>& ps, Rng& rng, const std::string& name, int in_, int out_)
      : in(in_), out(out_) {
    w = ps.add(name + ".w", {in_, out_}, init::xavier<T>(rng, in_, out_));
    b = ps.add(name + ".b", {out_}, init::constant<T>(out_, T(0)));
  }

  Tensor<T> operator()(WeightCtx<T>& ctx, const Tensor<T>& x) const {
    return add(matmul(x, ctx[w]), ctx[b]);
  }
};

template <typename T>
struct LayerNormP {
  int gain = -1, bias = -1;
  T eps = T(1e-5);

  LayerNormP() = default;
  LayerNormP(ParamStore<T>& ps, const std::string& name, int dim) {
    gain = ps.add(name + ".gain", {dim}, init::constant<T>(dim, T(1)));
    bias = ps.add(name + ".bias", {dim}, init::constant<T>(dim, T(0)));
  }

  Tensor<T> operator()(WeightCtx<T>& ctx, const Tensor<T>& x) const {
    return layer_norm(x, ctx[gain], ctx[bias], eps);
  }
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim, int hidden)
      : fc1(ps, rng, name + ".fc1", dim, hidden), fc2(ps, rng, name + ".fc2", hidden, dim) {}

  Tensor<T> operator()(WeightCtx<T>& ctx, const Tensor<T>& x) const {
    return fc2(ctx, gelu(fc1(ctx, x)));
  }
};

// Scaled dot-product attention over full token sets, split across heads by
// column slicing. Queries come from x; keys/values from y (y = x for self-
// attention).
template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int n_heads = 1, dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim_, int heads)
      : wq(ps, rng, name + ".wq", dim_, dim_),
        wk(ps, rng, name + ".wk", dim_, dim_),
        wv(ps, rng, name + ".wv", dim_, dim_),
        wo(ps, rng, name + ".wo", dim_, dim_),
        n_heads(heads),
        dim(dim_) {
    if (dim_ % heads != 0) throw ValueError(strfmt("attention dim %d not divisible by %d heads", dim_, heads));
  }

  Tensor<T> operator()(WeightCtx<T>& ctx, const Tensor<T>& x, const Tensor<T>& y) const {
    Tensor<T> q = wq(ctx, x), k = wk(ctx, y), v = wv(ctx, y);
    const int dh = dim / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> out;
    for (int h = 0; h < n_heads; ++h) {
      auto qh = slice_cols(q, h * dh, dh);
      auto kh = slice_cols(k, h * dh, dh);
      auto vh = slice_cols(v, h * dh, dh);
      auto attn = softmax_lastdim(mul_scalar(matmul(qh, transpose2d(kh)), scale));
      auto oh = matmul(attn, vh);
      out = (h == 0) ? oh : concat_cols(out, oh);
    }
    return wo(ctx, out);
  }
};

// Pre-norm ViT encoder block.
template <typename T>
struct EncoderBlock {
  LayerNormP<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;

  EncoderBlock() = default;
  EncoderBlock(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim, int heads)
      : ln1(ps, name + ".ln1", dim),
        ln2(ps, name + ".ln2", dim),
        attn(ps, rng, name + ".attn", dim, heads),
        mlp(ps, rng, name + ".mlp", dim, 4 * dim) {}

  Tensor<T> operator()(WeightCtx<T>& ctx, const Tensor<T>& x) const {
    auto n1 = ln1(ctx, x);
    auto h = add(x, attn(ctx, n1, n1));
    return add(h, mlp(ctx, ln2(ctx, h)));
  }
};

// Pre-norm decoder block: self-attention, cross-attention to the other
// branch's tokens, MLP.
template <typename T>
struct DecoderBlock {
  LayerNormP<T> ln1, lnc, ln2, lny;
  MultiHeadAttention<T> self_attn, cross_attn;
  Mlp<T> mlp;

  DecoderBlock() = default;
  DecoderBlock(ParamStore<T>& ps, Rng& rng, const std::string& name, int dim, int heads)
      : ln1(ps, name + ".ln1", dim),
        lnc(ps, name + ".lnc", dim),
        ln2(ps, name + ".ln2", dim),
        lny(ps, name + ".lny", dim),
        self_attn(ps, rng, name + ".self", dim, heads),
        cross_attn(ps, rng, name + ".cross", dim, heads),
        mlp(ps, rng, name + ".mlp", dim, 4 * dim) {}

  Tensor<T> operator()(WeightCtx<T>& ctx, const Tensor<T>& x, const Tensor<T>& other) const {
    auto n1 = ln1(ctx, x);
    auto h = add(x, self_attn(ctx, n1, n1));
    h = add(h, cross_attn(ctx, lnc(ctx, h), lny(ctx, other)));
    return add(h, mlp(ctx, ln2(ctx, h)));
  }
};

}  // namespace pfr
