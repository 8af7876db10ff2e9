#include "mvapad/autograd.hpp"

#include <algorithm>
#include <unordered_set>

#include "kernels.hpp"

namespace mvapad {

namespace {
thread_local bool g_grad_enabled = true;

void require_same_dtype(const Var& a, const Var& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " +
                         to_string(b.dtype()));
  }
}

// Strides of `shape` laid out against the (longer or equal) output rank, with
// zero stride on broadcast dimensions.
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[offset + i] = shape[i] == 1 ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& fn) {
  const std::size_t n = shape_numel(out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}
}  // namespace

Tensor& Node::grad() {
  if (grad_.empty()) grad_ = Tensor(value.shape(), value.dtype());
  return grad_;
}

void Node::accumulate(const Tensor& g) {
  require_same_shape(value, g, "gradient accumulation");
  if (grad_.empty()) {
    grad_ = g;
    return;
  }
  grad_.visit([&](auto dst) {
    using T = typename decltype(dst)::value_type;
    auto src = g.data<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  });
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->op = "leaf";
  node_->requires_grad = requires_grad;
}

Tensor& Var::mutable_value() {
  if (!is_leaf()) throw ContractError("mutable_value() on non-leaf node '" + op() + "'");
  return node_->value;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_op(Tensor value, std::string op, const std::vector<Var>& parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = std::move(op);
  const bool needs = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const Var& p) { return p.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

void backward(const Var& loss) {
  if (loss.value().numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order with parents first.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Tensor::full(loss.shape(), 1.0, loss.dtype()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_string(a) + " and " + shape_string(b) + " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Var matmul(const Var& a, const Var& b) {
  require_same_dtype(a, b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n}, a.dtype());
  detail::dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kernels::gemm_nn<T>(m, n, k, a.value().data<T>().data(), b.value().data<T>().data(), out.data<T>().data());
  });
  return make_op(std::move(out), "matmul", {a, b}, [m, n, k](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    detail::dispatch(self.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = self.grad().data<T>().data();
      if (pa.requires_grad) {
        Tensor ga({m, k}, pa.value.dtype());
        kernels::gemm_nt<T>(m, k, n, g, pb.value.data<T>().data(), ga.data<T>().data());
        pa.accumulate(ga);
      }
      if (pb.requires_grad) {
        Tensor gb({k, n}, pb.value.dtype());
        kernels::gemm_tn<T>(k, n, m, pa.value.data<T>().data(), g, gb.data<T>().data());
        pb.accumulate(gb);
      }
    });
  });
}

namespace {
enum class Binary { add, mul };

Var binary_op(const Var& a, const Var& b, Binary kind) {
  const char* name = kind == Binary::add ? "add" : "mul";
  require_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  Tensor out(out_shape, a.dtype());
  detail::dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto av = a.value().data<T>();
    auto bv = b.value().data<T>();
    auto ov = out.data<T>();
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      ov[o] = kind == Binary::add ? av[ia] + bv[ib] : av[ia] * bv[ib];
    });
  });
  return make_op(std::move(out), name, {a, b}, [kind, out_shape, sa, sb](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    detail::dispatch(self.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto g = self.grad().data<T>();
      Tensor ga(pa.value.shape(), pa.value.dtype());
      Tensor gb(pb.value.shape(), pb.value.dtype());
      auto gav = ga.data<T>();
      auto gbv = gb.data<T>();
      auto av = pa.value.data<T>();
      auto bv = pb.value.data<T>();
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (kind == Binary::add) {
          gav[ia] += g[o];
          gbv[ib] += g[o];
        } else {
          gav[ia] += g[o] * bv[ib];
          gbv[ib] += g[o] * av[ia];
        }
      });
      if (pa.requires_grad) pa.accumulate(ga);
      if (pb.requires_grad) pb.accumulate(gb);
    });
  });
}
}  // namespace

Var add(const Var& a, const Var& b) { return binary_op(a, b, Binary::add); }
Var mul(const Var& a, const Var& b) { return binary_op(a, b, Binary::mul); }

Var relu(const Var& x) {
  Tensor out = x.value();
  out.visit([](auto s) {
    using T = typename decltype(s)::value_type;
    for (auto& v : s) v = v > T(0) ? v : T(0);
  });
  return make_op(std::move(out), "relu", {x}, [](Node& self) {
    Node& px = *self.parents[0];
    Tensor gx = self.grad();
    gx.visit([&](auto g) {
      using T = typename decltype(g)::value_type;
      auto y = self.value.data<T>();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(y[i] > T(0))) g[i] = T(0);
      }
    });
    px.accumulate(gx);
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require_same_dtype(parts.front(), p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: " + shape_string(s) + " incompatible with " + shape_string(first) +
                           " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::size_t row = out_shape[axis] * inner;

  Tensor out(out_shape, parts.front().dtype());
  out.visit([&](auto ov) {
    using T = typename decltype(ov)::value_type;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto src = parts[i].value().data<T>();
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(src.data() + o * widths[i], widths[i], ov.data() + o * row + offset);
      }
      offset += widths[i];
    }
  });
  return make_op(std::move(out), "concat", parts, [outer, row, widths](Node& self) {
    self.grad().visit([&](auto g) {
      using T = typename decltype(g)::value_type;
      std::size_t offset = 0;
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        Node& p = *self.parents[i];
        if (p.requires_grad) {
          Tensor gp(p.value.shape(), p.value.dtype());
          auto dst = gp.data<T>();
          for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(g.data() + o * row + offset, widths[i], dst.data() + o * widths[i]);
          }
          p.accumulate(gp);
        }
        offset += widths[i];
      }
    });
  });
}

Var sum(const Var& x) {
  const double total = x.value().visit([](auto s) {
    using T = typename decltype(s)::value_type;
    T acc = T(0);
    for (auto v : s) acc += v;
    return static_cast<double>(acc);
  });
  return make_op(Tensor::scalar(total, x.dtype()), "sum", {x}, [](Node& self) {
    Node& px = *self.parents[0];
    px.accumulate(Tensor::full(px.value.shape(), self.grad().item(), px.value.dtype()));
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), "reshape", {x}, [](Node& self) {
    Node& px = *self.parents[0];
    px.accumulate(self.grad().reshaped(px.value.shape()));
  });
}

Var detach(const Var& x) { return Var(x.value(), false); }

}  // namespace mvapad
