#include "mvapad/optim.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace mvapad {

void AdamState::export_to(CheckpointData& data, const NamedParameters& params) const {
  data.optimizer_step = step;
  for (std::size_t i = 0; i < m.size() && i < params.size(); ++i) {
    data.tensors.emplace_back("adam.m." + params[i].first, m[i]);
    data.tensors.emplace_back("adam.v." + params[i].first, v[i]);
  }
}

void AdamState::import_from(const CheckpointData& data, const NamedParameters& params) {
  step = data.optimizer_step.value_or(0);
  m.clear();
  v.clear();
  if (step == 0) return;
  for (const auto& [name, p] : params) {
    for (auto [prefix, dst] : {std::pair{"adam.m.", &m}, std::pair{"adam.v.", &v}}) {
      const Tensor* t = data.find(prefix + name);
      if (t == nullptr || t->shape() != p.shape() || t->dtype() != p.dtype()) {
        throw CheckpointShapeError("checkpoint optimizer state '" + std::string(prefix) + name +
                                   "' missing or mis-shaped");
      }
      dst->push_back(*t);
    }
  }
}

void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
               const std::vector<std::string>& names) {
  if (grads.size() != params.size()) {
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  auto name_of = [&](std::size_t i) { return i < names.size() ? names[i] : "#" + std::to_string(i); };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape()) {
      throw DimensionError("adam_step: gradient of '" + name_of(i) + "' is " + shape_string(grads[i].shape()) +
                           ", parameter is " + shape_string(params[i]->shape()));
    }
    for (std::size_t j = 0; j < grads[i].numel(); ++j) {
      if (!std::isfinite(grads[i].at(j))) {
        throw RuntimeFailure("adam_step: non-finite gradient in parameter '" + name_of(i) + "' at element " +
                             std::to_string(j));
      }
    }
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape(), p->dtype());
      state.v.emplace_back(p->shape(), p->dtype());
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_step: optimizer state does not match parameters");

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->visit([&](auto theta) {
      using T = typename decltype(theta)::value_type;
      auto m = state.m[i].data<T>();
      auto v = state.v[i].data<T>();
      const auto g = grads[i].data<T>();
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const double gj = static_cast<double>(g[j]) + c.weight_decay * static_cast<double>(theta[j]);
        const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * gj;
        const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        theta[j] = static_cast<T>(static_cast<double>(theta[j]) - c.lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps));
      }
    });
  }
}

void adam_step(const NamedParameters& params, AdamState& state) {
  std::vector<Tensor*> values;
  std::vector<Tensor> grads;
  std::vector<std::string> names;
  for (const auto& [name, p] : params) {
    Var leaf = p;
    values.push_back(&leaf.mutable_value());
    grads.push_back(p.node()->has_grad() ? p.grad() : Tensor(p.shape(), p.dtype()));
    names.push_back(name);
  }
  adam_step(values, grads, state, names);
}

std::vector<EpochLog> train_epochs(Model& model, const ImageSet& data, const TrainConfig& config, AdamState* state,
                                   const std::function<void(const EpochLog&)>& on_epoch) {
  if (data.size() == 0) throw ContractError("train: empty training set");
  if (config.batch == 0) throw ContractError("train: batch size must be positive");
  if (data.images.rank() != 4 || data.images.dim(0) != data.size()) {
    throw DimensionError("train: image tensor " + shape_string(data.images.shape()) + " does not match " +
                         std::to_string(data.size()) + " labels");
  }
  AdamState local;
  AdamState& opt = state != nullptr ? *state : local;
  if (state == nullptr) local.config = config.adam;

  const NamedParameters params = model.named_parameters();
  const std::size_t n = data.size();
  const std::size_t batch = std::min(config.batch, n);
  const Shape& s = data.images.shape();
  const std::size_t sample_numel = s[1] * s[2] * s[3];
  Rng order_rng(config.seed);
  std::vector<std::size_t> order(n);
  std::vector<EpochLog> log;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < n; first += batch) {
      const std::size_t b = std::min(batch, n - first);
      Tensor x({b, s[1], s[2], s[3]}, data.images.dtype());
      std::vector<int> labels(b);
      x.visit([&](auto dst) {
        using T = typename decltype(dst)::value_type;
        const auto src = data.images.data<T>();
        for (std::size_t k = 0; k < b; ++k) {
          const std::size_t idx = order[first + k];
          std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx * sample_numel), sample_numel,
                      dst.begin() + static_cast<std::ptrdiff_t>(k * sample_numel));
          labels[k] = data.labels[idx];
        }
      });

      for (const auto& [name, p] : params) p.zero_grad();
      const ForwardResult out = model.forward(x, Mode::train);
      const Var loss = model.loss(out, labels);
      backward(loss);
      adam_step(params, opt);

      loss_sum += loss.value().item() * static_cast<double>(b);
      const Tensor& logits = out.logits.value();
      for (std::size_t k = 0; k < b; ++k) {
        const Prediction p = decide(logits.at(2 * k), logits.at(2 * k + 1));
        correct += class_index(p.label) == labels[k] ? 1 : 0;
      }
    }
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    EpochLog entry{epoch, loss_sum / static_cast<double>(n),
                   100.0 * static_cast<double>(correct) / static_cast<double>(n), elapsed.count()};
    if (!std::isfinite(entry.mean_loss)) {
      throw RuntimeFailure("train: non-finite loss in epoch " + std::to_string(epoch));
    }
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return log;
}

std::string format_training_log(const std::vector<EpochLog>& log) {
  std::string out = "epoch,mean_loss,train_accuracy,wall_seconds\n";
  char buf[160];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.6f\n", e.epoch, e.mean_loss, e.train_accuracy, e.wall_seconds);
    out += buf;
  }
  return out;
}

}  // namespace mvapad
