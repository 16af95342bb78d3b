#pragma once

// Gradcheck over ParamStore weights. Analytic gradients come from one f32
// backward pass; the finite-difference oracle runs on an f64 mirror of the
// same network (identical parameter indices, values copied), where central
// differences are accurate enough to judge a 1e-3 relative tolerance.

#include <functional>

#include "pfr/nn.hpp"
#include "pfr/tensor.hpp"

namespace pfrtest {

inline pfr::ParamStore<double> mirror_store(const pfr::ParamStore<float>& src) {
  pfr::ParamStore<double> dst;
  for (const auto& e : src.entries)
    dst.add(e.name, e.shape, std::vector<double>(e.value.begin(), e.value.end()));
  return dst;
}

template <typename U>
pfr::Tensor<U> const_cast_tensor(pfr::Tape<U>& tp, const std::vector<int>& shape,
                                 const std::vector<float>& data) {
  return tp.constant(shape, std::vector<U>(data.begin(), data.end()));
}

// `forward` is generic over precision: forward(ctx) with ctx a WeightCtx<U>.
// Checks every parameter tensor; samples at most `max_per_param` elements of
// each when positive.
template <typename Fwd32, typename Fwd64>
double model_gradcheck(pfr::ParamStore<float>& ps32, pfr::ParamStore<double>& ps64, Fwd32 fwd32,
                       Fwd64 fwd64, double eps = 1e-5, int max_per_param = -1) {
  pfr::Tape<float> tape;
  pfr::WeightCtx<float> ctx(tape, ps32, true);
  pfr::Tensor<float> loss = fwd32(ctx);
  tape.backward(loss);
  std::vector<std::vector<float>> analytic;
  ctx.collect_grads(analytic);

  // Compared jointly across all parameters: the relative-error floor must
  // scale with the global gradient magnitude, otherwise parameters whose true
  // gradient is exactly zero (e.g. a key-projection bias, which softmax is
  // invariant to) would have their roundoff noise treated as signal.
  std::vector<double> fd_all, an_all;
  for (size_t pi = 0; pi < ps32.entries.size(); ++pi) {
    auto& e64 = ps64.entries[pi];
    if (analytic[pi].empty()) analytic[pi].assign(ps32.entries[pi].value.size(), 0.0f);
    int64_t n = static_cast<int64_t>(e64.value.size());
    int64_t stride = 1;
    if (max_per_param > 0 && n > max_per_param) stride = (n + max_per_param - 1) / max_per_param;
    for (int64_t j = 0; j < n; j += stride) {
      double saved = e64.value[static_cast<size_t>(j)];
      auto eval = [&](double v) {
        e64.value[static_cast<size_t>(j)] = v;
        pfr::Tape<double> t2;
        t2.recording = false;
        pfr::WeightCtx<double> c2(t2, ps64, false);
        double out = fwd64(c2).item();
        e64.value[static_cast<size_t>(j)] = saved;
        return out;
      };
      double ep = eps * std::max(1.0, std::abs(saved));
      fd_all.push_back((eval(saved + ep) - eval(saved - ep)) / (2.0 * ep));
      an_all.push_back(analytic[pi][static_cast<size_t>(j)]);
    }
  }
  return pfr::max_rel_err(fd_all, an_all);
}

}  // namespace pfrtest
