#pragma once

// Shared gradcheck harness for the unit suites: runs backprop through a
// caller-supplied graph and compares every leaf gradient against the
// central-difference oracle.

#include <functional>
#include <vector>

#include "pfr/common.hpp"
#include "pfr/tensor.hpp"

namespace pfrtest {

template <typename T>
std::vector<T> random_values(pfr::Rng& rng, int64_t n, double scale = 1.0) {
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return v;
}

// `build` maps (tape, leaves) to an output tensor of any shape; the harness
// contracts it to a scalar with fixed random weights so every output element
// receives a distinct adjoint. Returns the worst relative error across all
// leaf gradients.
template <typename T, typename BuildFn>
double gradcheck(const std::vector<std::vector<int>>& shapes, BuildFn build, uint64_t seed,
                 T eps) {
  pfr::Rng rng(seed);
  std::vector<std::vector<T>> xs;
  for (const auto& s : shapes) xs.push_back(random_values<T>(rng, pfr::numel_of(s)));

  auto run = [&](const std::vector<std::vector<T>>& vals, bool want_grad,
                 std::vector<std::vector<T>>* grads_out) -> T {
    pfr::Tape<T> tape;
    std::vector<pfr::Tensor<T>> leaves;
    for (size_t i = 0; i < shapes.size(); ++i) leaves.push_back(tape.leaf(shapes[i], vals[i], true));
    pfr::Tensor<T> y = build(tape, leaves);
    pfr::Rng wrng(seed ^ 0x51d3beefULL);
    std::vector<T> w = random_values<T>(wrng, y.numel());
    auto loss = pfr::sum_all(pfr::mul(y, tape.constant(y.shape(), w)));
    if (want_grad) {
      tape.backward(loss);
      grads_out->clear();
      for (auto& lf : leaves) {
        auto g = lf.grad();
        if (g.empty()) g.assign(lf.val().size(), T(0));
        grads_out->push_back(g);
      }
    }
    return loss.item();
  };

  std::vector<std::vector<T>> analytic;
  run(xs, true, &analytic);

  double worst = 0.0;
  for (size_t i = 0; i < shapes.size(); ++i) {
    std::function<T(const std::vector<T>&)> f = [&, i](const std::vector<T>& xi) {
      auto vals = xs;
      vals[i] = xi;
      return run(vals, false, nullptr);
    };
    auto fd = pfr::finite_diff_grad<T>(f, xs[i], eps);
    worst = std::max(worst, pfr::max_rel_err(fd, analytic[i]));
  }
  return worst;
}

}  // namespace pfrtest
