#pragma once

// Finite-difference checks for graphs built on Tape<double>.

#include <cmath>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "tfm/autograd.hpp"

namespace gradcheck {

using T = tfm::BasicTensor<double>;
using V = tfm::Var<double>;
using Graph = std::function<V(tfm::Tape<double>&, const std::vector<V>&)>;

struct Result {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Builds `graph` on fresh leaves, compares the tape gradient of every leaf
/// element against central differences. Elements for which `skip` returns
/// true (e.g. relu inputs at a kink) are not compared.
inline Result check(const Graph& graph, std::vector<T> inputs, double eps,
                    const std::function<bool(std::size_t leaf, std::size_t elem)>& skip = {}) {
  auto evaluate = [&]() {
    tfm::Tape<double> tape;
    std::vector<V> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x, true));
    return graph(tape, leaves).value()[0];
  };
  tfm::Tape<double> tape;
  std::vector<V> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x, true));
  const V out = graph(tape, leaves);
  tape.backward(out);
  Result r;
  for (std::size_t l = 0; l < inputs.size(); ++l) {
    const auto analytic = tape.grad(leaves[l]);
    for (std::size_t i = 0; i < inputs[l].numel(); ++i) {
      if (skip && skip(l, i)) continue;
      const double keep = inputs[l][i];
      inputs[l][i] = keep + eps;
      const double up = evaluate();
      inputs[l][i] = keep - eps;
      const double down = evaluate();
      inputs[l][i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      r.max_rel_error = std::max(r.max_rel_error, oracle::relative_error(analytic[i], numeric, 1e-6));
      ++r.checked;
    }
  }
  return r;
}

inline T random_tensor(tfm::Shape s, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  T t(s);
  for (auto& v : t.values()) v = u(gen);
  return t;
}

// Scalar probe of a tensor output: mean_all((y + w)^2) with a fixed random
// offset w, so every output element receives a distinct, nonzero gradient.
inline V probe(tfm::Tape<double>& tape, V y, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  const V w = tape.leaf(random_tensor(y.shape(), gen), false);
  return tfm::mean_all(tfm::square(tfm::add(y, w)));
}

}  // namespace gradcheck
