#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "test_util.hpp"
#include "vqct/graph.hpp"
#include "vqct/model.hpp"

namespace vqct::testing {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // perturbation crossed a leaky-ReLU kink
};

// Signs of every leaky-ReLU input, used to detect kink crossings.
inline std::vector<bool> activation_signature(const Checkpoint& ck, const Tensor& input) {
  Graph g;
  std::vector<NodeId> params;
  for (const auto& p : ck.params) params.push_back(g.constant(p.value));
  trace_forward(g, ck, params, input, QuantizerMode::Bypass);
  std::vector<bool> sig;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.node(i).op == "leaky_relu")
      for (double v : g.value(g.node(i).inputs[0]).values()) sig.push_back(v >= 0.0);
  return sig;
}

inline double bypass_mse(const Checkpoint& ck, const Tensor& input, const Tensor& target) {
  const Tensor y = forward(ck, input, QuantizerMode::Bypass).output;
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - target[i]) * (y[i] - target[i]);
  return s / static_cast<double>(y.size());
}

// Random small network, random biases, MSE against a random target; every
// scalar parameter is checked against a central difference.
inline GradcheckReport gradcheck_random_network(std::uint64_t seed, double h = 1e-5) {
  std::mt19937_64 rng(seed);
  ModelConfig c;
  c.spatial_rank = 2 + static_cast<int>(seed % 2);
  c.depth = 1 + static_cast<int>(rng() % 2);
  c.base_channels = 2 + static_cast<int>(rng() % 2);
  c.codebook_dim = 2 + static_cast<int>(rng() % 2);
  c.codebook_size = 4;
  c.pyramid_levels = 1 + static_cast<int>(rng() % 2);
  c.seed = rng();
  Checkpoint ck = build_model(c);
  for (auto& p : ck.params)
    if (p.value.rank() == 1) p.value = random_tensor(p.value.shape(), rng, -0.2, 0.2);

  const std::size_t g = c.granularity();
  const std::size_t n = std::max<std::size_t>(g, c.spatial_rank == 2 ? 8 : 4);
  Shape s{1};
  for (int a = 0; a < c.spatial_rank; ++a) s.push_back(n);
  const Tensor input = random_tensor(s, rng);
  const Tensor target = random_tensor(s, rng);

  Graph graph;
  const auto ids = bind_parameters(graph, ck);
  const auto t = trace_forward(graph, ck, ids, input, QuantizerMode::Bypass);
  graph.backward(graph.mse_loss(t.output, target));

  const auto base_sig = activation_signature(ck, input);
  GradcheckReport rep;
  for (std::size_t pi = 0; pi < ck.params.size(); ++pi) {
    const Tensor& analytic = graph.grad(ids[pi]);
    for (std::size_t k = 0; k < analytic.size(); ++k) {
      Checkpoint plus = ck, minus = ck;
      plus.params[pi].value[k] += h;
      minus.params[pi].value[k] -= h;
      if (activation_signature(plus, input) != base_sig || activation_signature(minus, input) != base_sig) {
        ++rep.skipped;
        continue;
      }
      const double fd = (bypass_mse(plus, input, target) - bypass_mse(minus, input, target)) / (2 * h);
      rep.max_rel_error = std::max(rep.max_rel_error, rel_error(analytic[k], fd, 1e-6));
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace vqct::testing
