#pragma once

// Spatial memory: a working FIFO of per-frame key/value token sets plus a
// sparsified long-term store. Long-term tokens carry accumulated attention
// mass; once the total mass passes a threshold only the top-k tokens
// survive (ties broken by lower frame id, then lower token index).

#include <algorithm>
#include <deque>
#include <vector>

#include "json.hpp"
#include "pfr/nn.hpp"
#include "pfr/tensor.hpp"

namespace pfr {

struct MemoryConfig {
  int n_working = 4;
  double attn_threshold = 5.0;
  int top_k = 128;
};

template <typename T>
class MemoryBank {
 public:
  explicit MemoryBank(MemoryConfig cfg = {}) : cfg_(cfg) {}

  const MemoryConfig& config() const { return cfg_; }

  bool empty() const { return working_.empty() && longterm_.empty(); }
  int working_size() const { return static_cast<int>(working_.size()); }
  int longterm_size() const {
    int n = 0;
    for (const auto& g : longterm_) n += static_cast<int>(g.rows.size());
    return n;
  }

  void insert(const Tensor<T>& key, const Tensor<T>& value, int frame_id) {
    if (key.shape().size() != 2 || value.shape().size() != 2 ||
        key.shape()[0] != value.shape()[0])
      throw ShapeError("memory insert: key " + shape_str(key.shape()) + " vs value " +
                       shape_str(value.shape()));
    if (!working_.empty() && key.shape()[1] != working_.front().key.shape()[1])
      throw ShapeError("memory insert: key dim mismatch with existing entries");
    working_.push_back({key, value, frame_id,
                        std::vector<double>(static_cast<size_t>(key.shape()[0]), 0.0)});
    if (static_cast<int>(working_.size()) > cfg_.n_working) {
      auto& oldest = working_.front();
      LtGroup g;
      g.key = oldest.key;
      g.value = oldest.value;
      g.frame_id = oldest.frame_id;
      g.rows.resize(oldest.acc.size());
      for (size_t i = 0; i < g.rows.size(); ++i) g.rows[i] = static_cast<int>(i);
      g.tokens = g.rows;
      g.acc = oldest.acc;  // mass tracked since insertion travels with the token
      longterm_.push_back(std::move(g));
      working_.pop_front();
      sparsify();
    }
  }

  // Top-k retention, triggered when total long-term attention mass exceeds
  // the threshold; otherwise a no-op.
  void sparsify() {
    double total = 0;
    for (const auto& g : longterm_)
      for (double a : g.acc) total += a;
    if (!(total > cfg_.attn_threshold)) return;
    struct Tok {
      double acc;
      int frame_id, token, row, group;
    };
    std::vector<Tok> toks;
    for (size_t gi = 0; gi < longterm_.size(); ++gi)
      for (size_t i = 0; i < longterm_[gi].rows.size(); ++i)
        toks.push_back({longterm_[gi].acc[i], longterm_[gi].frame_id, longterm_[gi].tokens[i],
                        longterm_[gi].rows[i], static_cast<int>(gi)});
    std::sort(toks.begin(), toks.end(), [](const Tok& a, const Tok& b) {
      if (a.acc != b.acc) return a.acc > b.acc;
      if (a.frame_id != b.frame_id) return a.frame_id < b.frame_id;
      return a.token < b.token;
    });
    if (static_cast<int>(toks.size()) > cfg_.top_k) toks.resize(static_cast<size_t>(cfg_.top_k));
    std::vector<LtGroup> pruned;
    for (size_t gi = 0; gi < longterm_.size(); ++gi) {
      LtGroup ng;
      ng.key = longterm_[gi].key;
      ng.value = longterm_[gi].value;
      ng.frame_id = longterm_[gi].frame_id;
      std::vector<std::tuple<int, int, double>> keep;
      for (const auto& t : toks)
        if (t.group == static_cast<int>(gi)) keep.push_back({t.token, t.row, t.acc});
      std::sort(keep.begin(), keep.end());
      for (auto& [token, row, acc] : keep) {
        ng.tokens.push_back(token);
        ng.rows.push_back(row);
        ng.acc.push_back(acc);
      }
      if (!ng.rows.empty()) pruned.push_back(std::move(ng));
    }
    longterm_ = std::move(pruned);
  }

  void reset() {
    working_.clear();
    longterm_.clear();
  }

  // Concatenated key/value token matrices, working entries first (FIFO
  // order), then surviving long-term tokens in demotion order.
  std::pair<Tensor<T>, Tensor<T>> gather_tokens() const {
    if (empty()) throw StateError("memory query before bootstrap");
    std::vector<Tensor<T>> ks, vs;
    for (const auto& e : working_) {
      ks.push_back(e.key);
      vs.push_back(e.value);
    }
    for (const auto& g : longterm_) {
      ks.push_back(select_rows(g.key, g.rows));
      vs.push_back(select_rows(g.value, g.rows));
    }
    return {concat_rows(ks), concat_rows(vs)};
  }

  // Adds per-token attention mass; `col_mass[j]` is the total weight the
  // j-th gathered token received in one readout.
  void add_attention(const std::vector<double>& col_mass) {
    size_t j = 0;
    for (auto& e : working_) {
      for (auto& a : e.acc) a += col_mass.at(j++);
    }
    for (auto& g : longterm_) {
      for (auto& a : g.acc) a += col_mass.at(j++);
    }
    if (j != col_mass.size()) throw StateError("attention mass size does not match bank tokens");
  }

  // Rebuilds all stored tensors as constants on a fresh tape. Used by the
  // streaming session to keep inference memory bounded.
  void migrate(Tape<T>& fresh) {
    for (auto& e : working_) {
      e.key = fresh.constant(e.key.shape(), e.key.val());
      e.value = fresh.constant(e.value.shape(), e.value.val());
    }
    for (auto& g : longterm_) {
      // materialize only surviving rows
      const int d = g.key.shape()[1];
      std::vector<T> kv(g.rows.size() * static_cast<size_t>(d)),
          vv(g.rows.size() * static_cast<size_t>(d));
      for (size_t i = 0; i < g.rows.size(); ++i) {
        std::copy_n(g.key.val().data() + static_cast<size_t>(g.rows[i]) * d, d, kv.data() + i * d);
        std::copy_n(g.value.val().data() + static_cast<size_t>(g.rows[i]) * d, d,
                    vv.data() + i * d);
      }
      int n = static_cast<int>(g.rows.size());
      g.key = fresh.constant({n, d}, std::move(kv));
      g.value = fresh.constant({n, d}, std::move(vv));
      for (int i = 0; i < n; ++i) g.rows[static_cast<size_t>(i)] = i;
    }
  }

  nlohmann::json diagnostic_dump() const {
    nlohmann::json j;
    j["working"] = nlohmann::json::array();
    for (const auto& e : working_)
      for (size_t i = 0; i < e.acc.size(); ++i)
        j["working"].push_back({{"frame_id", e.frame_id},
                                {"token_index", static_cast<int>(i)},
                                {"accumulated_attention", e.acc[i]}});
    j["longterm"] = nlohmann::json::array();
    for (const auto& g : longterm_)
      for (size_t i = 0; i < g.rows.size(); ++i)
        j["longterm"].push_back({{"frame_id", g.frame_id},
                                 {"token_index", g.tokens[i]},
                                 {"accumulated_attention", g.acc[i]}});
    return j;
  }

 private:
  struct WorkEntry {
    Tensor<T> key, value;
    int frame_id;
    std::vector<double> acc;
  };
  struct LtGroup {
    Tensor<T> key, value;
    int frame_id;
    std::vector<int> rows;    // row indices into the stored tensors
    std::vector<int> tokens;  // original token indices within the frame
    std::vector<double> acc;  // parallel to rows
  };

  MemoryConfig cfg_;
  std::deque<WorkEntry> working_;
  std::vector<LtGroup> longterm_;
};

// Learned memory readout. Layer 1 attends with the raw query tokens and adds
// the result to a learned projection of the query; further layers refine with
// their own query projections over the same token set.
template <typename T>
struct MemoryReadout {
  Linear<T> wg;                  // residual projection of f^q
  Linear<T> wk, wv;              // key/value production at insert time
  Linear<T> boot;                // encoder features -> memory space (bootstrap stand-in)
  std::vector<Linear<T>> layers; // query projections for depth >= 2
  int dim_mem = 0;

  MemoryReadout() = default;
  MemoryReadout(ParamStore<T>& ps, Rng& rng, int dim_enc, int dim_dec, int dim_mem_, int depth)
      : wg(ps, rng, "mem.wg", dim_mem_, dim_mem_),
        wk(ps, rng, "mem.wk", dim_mem_, dim_mem_),
        wv(ps, rng, "mem.wv", dim_dec, dim_mem_),
        boot(ps, rng, "mem.boot", dim_enc, dim_mem_),
        dim_mem(dim_mem_) {
    for (int i = 1; i < depth; ++i)
      layers.emplace_back(ps, rng, strfmt("mem.q%d", i), dim_mem_, dim_mem_);
  }

  Tensor<T> make_key(WeightCtx<T>& ctx, const Tensor<T>& f_q) const { return wk(ctx, f_q); }
  Tensor<T> make_value(WeightCtx<T>& ctx, const Tensor<T>& f_h) const { return wv(ctx, f_h); }

  // Single readout: convex attention weights over all gathered tokens.
  Tensor<T> attend(WeightCtx<T>& ctx, const Tensor<T>& q, const Tensor<T>& keys,
                   const Tensor<T>& values, MemoryBank<T>& bank) const {
    const T scale = T(1) / std::sqrt(static_cast<T>(dim_mem));
    auto attn = softmax_lastdim(mul_scalar(matmul(q, transpose2d(keys)), scale));
    const auto& w = attn.val();
    const int rows = attn.shape()[0], cols = attn.shape()[1];
    std::vector<double> col_mass(static_cast<size_t>(cols), 0.0);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) col_mass[static_cast<size_t>(j)] += w[static_cast<size_t>(i) * cols + j];
    bank.add_attention(col_mass);
    return matmul(attn, values);
  }

  Tensor<T> query(WeightCtx<T>& ctx, const Tensor<T>& f_q, MemoryBank<T>& bank) const {
    auto [keys, values] = bank.gather_tokens();
    Tensor<T> g = add(wg(ctx, f_q), attend(ctx, f_q, keys, values, bank));
    for (const auto& lq : layers) g = add(g, attend(ctx, lq(ctx, g), keys, values, bank));
    return g;
  }
};

}  // namespace pfr
