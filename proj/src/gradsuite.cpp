#include "mvapad/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "mvapad/layers.hpp"
#include "mvapad/mvanet.hpp"

namespace mvapad {

NetworkSpec gradcheck_spec() {
  NetworkSpec s = NetworkSpec::small();
  s.input_size = 32;
  s.conv_strides[0] = 1;
  return s;
}

namespace {

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape, DType::f64);
  for (auto& v : t.data<double>()) v = rng.uniform(lo, hi);
  return t;
}

Var weighted_sum(const Var& y, const Tensor& w) { return sum(mul(y, Var(w))); }

}  // namespace

GradcheckReport model_gradcheck(const NetworkSpec& spec, std::uint64_t seed, std::size_t batch,
                                const GradcheckOptions& options) {
  Rng rng(seed);
  Model model(spec, rng, DType::f64);
  // Zero biases put whole-sample dropout outages exactly on a ReLU kink.
  for (auto& [name, p] : model.named_parameters()) {
    const bool is_gamma = name.ends_with(".gamma");
    if (is_gamma || name.ends_with(".bias") || name.ends_with(".beta")) {
      p.mutable_value() = uniform_tensor(p.shape(), rng, is_gamma ? 0.5 : -0.1, is_gamma ? 1.5 : 0.1);
    }
  }
  const Tensor x = uniform_tensor({batch, spec.input_channels, spec.input_size, spec.input_size}, rng);
  const Tensor readout = uniform_tensor({batch, spec.head_out}, rng);
  std::vector<int> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(i % spec.head_out);

  std::vector<Rng::State> saved;
  for (const auto& [name, r] : model.named_rngs()) saved.push_back(r->state());
  auto fn = [&] {
    auto rngs = model.named_rngs();
    for (std::size_t i = 0; i < rngs.size(); ++i) *rngs[i].second = Rng::from_state(saved[i]);
    const auto out = model.forward(x, Mode::train);
    return add(model.loss(out, labels), weighted_sum(out.logits, readout));
  };
  return gradcheck(fn, model.named_parameters(), options);
}

std::vector<SuiteResult> run_gradcheck_suite(const SuiteOptions& options) {
  struct Case {
    std::string name;
    // Builds the inputs of one instance and returns the scalar function.
    std::function<std::pair<std::function<Var(const std::vector<Var>&)>, std::vector<Tensor>>(Rng&)> make;
  };
  std::vector<Case> cases;

  cases.push_back({"conv2d_11x11_s4", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({1, 1, 23, 23}, rng), uniform_tensor({2, 1, 11, 11}, rng),
                                            uniform_tensor({2}, rng)};
                     Tensor w = uniform_tensor({1, 2, 5, 5}, rng);
                     return std::make_pair(
                         std::function<Var(const std::vector<Var>&)>([w](const std::vector<Var>& v) {
                           return weighted_sum(conv2d(v[0], v[1], v[2], 4, 2), w);
                         }),
                         in);
                   }});
  cases.push_back({"conv2d_3x3", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({2, 3, 7, 7}, rng), uniform_tensor({4, 3, 3, 3}, rng),
                                            uniform_tensor({4}, rng)};
                     Tensor w = uniform_tensor({2, 4, 7, 7}, rng);
                     return std::make_pair(
                         std::function<Var(const std::vector<Var>&)>([w](const std::vector<Var>& v) {
                           return weighted_sum(conv2d(v[0], v[1], v[2], 1, 1), w);
                         }),
                         in);
                   }});
  cases.push_back({"maxpool2d", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({1, 2, 13, 13}, rng)};
                     Tensor w = uniform_tensor({1, 2, 6, 6}, rng);
                     return std::make_pair(std::function<Var(const std::vector<Var>&)>([w](const std::vector<Var>& v) {
                                             return weighted_sum(maxpool2d(v[0], 3, 2), w);
                                           }),
                                           in);
                   }});
  cases.push_back({"avgpool2d", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({2, 2, 12, 12}, rng)};
                     Tensor w = uniform_tensor({2, 2, 2, 2}, rng);
                     return std::make_pair(std::function<Var(const std::vector<Var>&)>([w](const std::vector<Var>& v) {
                                             return weighted_sum(avgpool2d(v[0], 6, 6), w);
                                           }),
                                           in);
                   }});
  cases.push_back({"batchnorm_train", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({4, 3}, rng), uniform_tensor({3}, rng, 0.5, 1.5),
                                            uniform_tensor({3}, rng)};
                     Tensor w = uniform_tensor({4, 3}, rng);
                     return std::make_pair(std::function<Var(const std::vector<Var>&)>([w](const std::vector<Var>& v) {
                                             return weighted_sum(batchnorm_train(v[0], v[1], v[2], 1e-5), w);
                                           }),
                                           in);
                   }});
  cases.push_back({"batchnorm_train_4d", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({2, 3, 3, 3}, rng), uniform_tensor({3}, rng, 0.5, 1.5),
                                            uniform_tensor({3}, rng)};
                     Tensor w = uniform_tensor({2, 3, 3, 3}, rng);
                     return std::make_pair(std::function<Var(const std::vector<Var>&)>([w](const std::vector<Var>& v) {
                                             return weighted_sum(batchnorm_train(v[0], v[1], v[2], 1e-5), w);
                                           }),
                                           in);
                   }});
  cases.push_back({"linear", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({3, 5}, rng), uniform_tensor({4, 5}, rng),
                                            uniform_tensor({4}, rng)};
                     Tensor w = uniform_tensor({3, 4}, rng);
                     return std::make_pair(std::function<Var(const std::vector<Var>&)>([w](const std::vector<Var>& v) {
                                             return weighted_sum(linear(v[0], v[1], v[2]), w);
                                           }),
                                           in);
                   }});
  cases.push_back({"dropout_fixed_mask", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({4, 6}, rng)};
                     DropoutLayer drop(0.5, rng.split());
                     Tensor mask = drop.draw_mask({4, 6}, DType::f64);
                     Tensor w = uniform_tensor({4, 6}, rng);
                     return std::make_pair(
                         std::function<Var(const std::vector<Var>&)>([mask, w](const std::vector<Var>& v) {
                           return weighted_sum(apply_mask(v[0], mask), w);
                         }),
                         in);
                   }});
  cases.push_back({"softmax_cross_entropy", [](Rng& rng) {
                     std::vector<Tensor> in{uniform_tensor({8, 2}, rng, -3.0, 3.0)};
                     std::vector<int> labels(8);
                     for (auto& l : labels) l = static_cast<int>(rng.below(2));
                     return std::make_pair(
                         std::function<Var(const std::vector<Var>&)>([labels](const std::vector<Var>& v) {
                           return softmax_cross_entropy(v[0], labels);
                         }),
                         in);
                   }});

  std::vector<SuiteResult> results;
  Rng master(options.seed);
  for (const auto& c : cases) {
    SuiteResult r{c.name, options.instances, 0.0, true};
    for (std::size_t i = 0; i < options.instances; ++i) {
      Rng rng = master.split();
      auto [fn, inputs] = c.make(rng);
      const auto report = gradcheck(fn, inputs, 1e-6, options.tol);
      r.max_rel_error = std::max(r.max_rel_error, report.max_rel_error);
    }
    r.passed = r.max_rel_error < options.tol;
    results.push_back(r);
  }

  if (options.include_model) {
    SuiteResult r{"mvanet_small_32x32", options.instances, 0.0, true};
    GradcheckOptions go;
    go.tol = options.tol;
    go.max_coords = options.model_coords;
    go.floor = kModelGradFloor;
    go.skip_kinks = true;
    for (std::size_t i = 0; i < options.instances; ++i) {
      go.seed = master.next_u64();
      const auto report = model_gradcheck(gradcheck_spec(), master.next_u64(), 2, go);
      r.max_rel_error = std::max(r.max_rel_error, report.max_rel_error);
    }
    r.passed = r.max_rel_error < options.tol;
    results.push_back(r);
  }
  return results;
}

}  // namespace mvapad
