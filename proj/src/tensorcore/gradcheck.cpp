#include "attmil/gradcheck.hpp"

#include "attmil/errors.hpp"

#include <algorithm>
#include <cmath>

namespace attmil {

GradcheckResult gradcheck(const ScalarFn& f, const std::vector<Tensor>& params, double h) {
  if (!(h > 0.0)) throw ArgumentError("gradcheck: step must be positive");

  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(Var::parameter(p));
  Var loss = f(leaves);
  backward(loss);

  std::vector<Tensor> probe = params;
  auto eval = [&]() {
    std::vector<Var> consts;
    consts.reserve(probe.size());
    for (const Tensor& p : probe) consts.push_back(Var::constant(p));
    return f(consts).item();
  };

  GradcheckResult worst;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& analytic = leaves[i].grad();
    for (Index j = 0; j < params[i].numel(); ++j) {
      const double x0 = params[i][j];
      probe[i][j] = x0 + h;
      const double up = eval();
      probe[i][j] = x0 - h;
      const double down = eval();
      probe[i][j] = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      if (err > worst.max_rel_error || (i == 0 && j == 0)) {
        worst = {err, i, j, a, numeric};
      }
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero, so relu is differentiable at every element.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) {
    const double mag = rng.uniform(0.05, 1.0);
    t[i] = rng.bernoulli(0.5) ? mag : -mag;
  }
  return t;
}

// Values with pairwise gaps well above the difference step, so max is unique.
Tensor distinct_values(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::vector<double> v(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
  rng.shuffle(std::span<double>(v));
  for (Index i = 0; i < t.numel(); ++i) t[i] = v[static_cast<std::size_t>(i)];
  return t;
}

// Contract x with a fixed random tensor to get a scalar with a generic gradient.
Var project(const Var& x, const Tensor& weights) {
  return matmul(reshape(x, {1, x.numel()}), Var::constant(weights.reshaped({weights.numel(), 1})));
}

Var flipped_tanh(const Var& x) {
  Tensor out(x.shape(), x.value().data().array().tanh().matrix());
  return make_op("tanh", std::move(out), {x}, [](Node& self) {
    Node& parent = *self.parents()[0];
    if (!parent.requires_grad()) return;
    const auto y = self.value().data().array();
    parent.grad().data().array() -= self.grad().data().array() * (1.0 - y.square());
  });
}

}  // namespace

std::vector<GradcheckCase> tensorcore_gradcheck_cases(std::uint64_t seed, bool flip_tanh_backward) {
  std::vector<GradcheckCase> cases;
  Rng rng(seed);

  auto add_case = [&](std::string name, ScalarFn f, std::vector<Tensor> params) {
    cases.push_back({std::move(name), [f = std::move(f), params = std::move(params)] {
                       return gradcheck(f, params);
                     }});
  };

  {
    Tensor w = random_tensor({3, 2}, rng);
    add_case("matmul", [w](std::span<const Var> p) { return project(matmul(p[0], p[1]), w); },
             {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  }
  {
    Tensor w = random_tensor({5, 3}, rng);
    add_case("linear", [w](std::span<const Var> p) { return project(linear(p[0], p[1], p[2]), w); },
             {random_tensor({5, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)});
  }
  {
    Tensor w = random_tensor({3}, rng);
    add_case("dense", [w](std::span<const Var> p) { return project(dense(p[0], p[1], p[2]), w); },
             {random_tensor({4}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)});
  }
  {
    Tensor w = random_tensor({3, 5, 5}, rng);
    add_case("conv2d",
             [w](std::span<const Var> p) { return project(conv2d(p[0], p[1], p[2], 1, 1), w); },
             {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  }
  {
    Tensor w = random_tensor({2, 2, 2, 2}, rng);
    add_case("conv2d_batched_strided",
             [w](std::span<const Var> p) { return project(conv2d(p[0], p[1], p[2], 2, 0), w); },
             {random_tensor({2, 3, 5, 5}, rng), random_tensor({2, 3, 2, 2}, rng), random_tensor({2}, rng)});
  }
  {
    Tensor w = random_tensor({3, 2, 2}, rng);
    add_case("maxpool2d", [w](std::span<const Var> p) { return project(maxpool2d(p[0], 2, 2), w); },
             {distinct_values({3, 4, 4}, rng)});
  }
  {
    Tensor w = random_tensor({4}, rng);
    add_case("max_over_rows", [w](std::span<const Var> p) { return project(max_over_rows(p[0]), w); },
             {distinct_values({7, 4}, rng)});
  }
  {
    Tensor w = random_tensor({12}, rng);
    add_case("relu", [w](std::span<const Var> p) { return project(relu(p[0]), w); },
             {away_from_zero({12}, rng)});
  }
  {
    Tensor w = random_tensor({12}, rng);
    auto f = flip_tanh_backward
                 ? ScalarFn([w](std::span<const Var> p) { return project(flipped_tanh(p[0]), w); })
                 : ScalarFn([w](std::span<const Var> p) { return project(tanh(p[0]), w); });
    add_case("tanh", f, {random_tensor({12}, rng, -2.0, 2.0)});
  }
  {
    Tensor w = random_tensor({6}, rng);
    add_case("softmax", [w](std::span<const Var> p) { return project(softmax(p[0]), w); },
             {random_tensor({6}, rng, -3.0, 3.0)});
  }
  add_case("cross_entropy", [](std::span<const Var> p) { return cross_entropy(p[0], 2); },
           {random_tensor({5}, rng, -3.0, 3.0)});
  add_case("mean_cross_entropy", [](std::span<const Var> p) { return mean_cross_entropy(p[0], 1); },
           {random_tensor({4, 3}, rng, -3.0, 3.0)});
  {
    Tensor w = random_tensor({20}, rng);
    add_case("dropout",
             [w](std::span<const Var> p) {
               Rng mask_rng(99);  // same mask on every evaluation
               return project(dropout(p[0], 0.3, true, mask_rng), w);
             },
             {random_tensor({20}, rng)});
  }
  {
    Tensor w = random_tensor({2, 3}, rng);
    add_case("add_scale_reshape",
             [w](std::span<const Var> p) {
               return project(reshape(add(scale(p[0], -1.5), p[1]), {2, 3}), w);
             },
             {random_tensor({6}, rng), random_tensor({6}, rng)});
  }
  add_case("sum", [](std::span<const Var> p) { return sum(tanh(p[0])); }, {random_tensor({3, 3}, rng)});
  return cases;
}

std::vector<GradcheckOutcome> run_gradcheck_cases(const std::vector<GradcheckCase>& cases, double tolerance) {
  std::vector<GradcheckOutcome> out;
  out.reserve(cases.size());
  for (const auto& c : cases) {
    GradcheckResult r = c.run();
    out.push_back({c.name, r, std::isfinite(r.max_rel_error) && r.max_rel_error < tolerance});
  }
  return out;
}

}  // namespace attmil
