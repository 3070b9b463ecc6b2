#include "archdoor/autograd.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <unordered_set>

#include "archdoor/error.hpp"

namespace archdoor::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

MapC view(const Tensor& t) { return MapC(t.data().data(), t.rows(), t.cols()); }
MapM view(Tensor& t) { return MapM(t.data().data(), t.rows(), t.cols()); }

Tensor& grad_of(Node& n) {
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(fn);
    }
  }
  return Var::from_node(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return {rows, cols}; }

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return from_node(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return from_node(std::move(node));
}

Tensor& Var::grad() { return grad_of(*node_); }

const Tensor& Var::grad() const { return grad_of(*node_); }

void Var::zero_grad() {
  if (!node_->grad.empty()) node_->grad.fill(0.0);
}

void backward(const Var& loss) {
  if (loss.value().size() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  grad_of(*loss.node())[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward && !(*it)->grad.empty()) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  Tensor out(matrix_shape(a.rows(), b.cols()));
  view(out).noalias() = view(a) * view(b);
  return out;
}

Var matmul(const Var& a, const Var& b, bool transpose_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t inner_b = transpose_b ? bv.cols() : bv.rows();
  if (av.cols() != inner_b)
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()) + (transpose_b ? "^T" : ""));
  const std::size_t out_cols = transpose_b ? bv.rows() : bv.cols();
  Tensor out(matrix_shape(av.rows(), out_cols));
  if (transpose_b)
    view(out).noalias() = view(av) * view(bv).transpose();
  else
    view(out).noalias() = view(av) * view(bv);

  return make_result(std::move(out), {a, b}, [transpose_b](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = view(std::as_const(self.grad));
    if (pa.requires_grad) {
      if (transpose_b)
        view(grad_of(pa)).noalias() += g * view(std::as_const(pb.value));
      else
        view(grad_of(pa)).noalias() += g * view(std::as_const(pb.value)).transpose();
    }
    if (pb.requires_grad) {
      if (transpose_b)
        view(grad_of(pb)).noalias() += g.transpose() * view(std::as_const(pa.value));
      else
        view(grad_of(pb)).noalias() += view(std::as_const(pa.value)).transpose() * g;
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto gd = grad_of(*p).data();
      auto sd = self.grad.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += sd[i];
    }
  });
}

Var add_constant(const Var& x, const Tensor& c) {
  require_same_shape(x.value(), c, "add_constant");
  Tensor out = x.value();
  auto od = out.data();
  auto cd = c.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += cd[i];
  return make_result(std::move(out), {x}, [](Node& self) {
    auto gd = grad_of(*self.parents[0]).data();
    auto sd = self.grad.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += sd[i];
  });
}

Var add_row(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  if (bias.value().size() != xv.cols())
    throw ShapeError("add_row: bias of shape " + shape_string(bias.shape()) + " for rows of width " +
                     std::to_string(xv.cols()));
  Tensor out = xv;
  const std::size_t rows = xv.rows(), cols = xv.cols();
  auto bd = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bd[c];
  return make_result(std::move(out), {x, bias}, [rows, cols](Node& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    auto sd = self.grad.data();
    if (px.requires_grad) {
      auto gd = grad_of(px).data();
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += sd[i];
    }
    if (pb.requires_grad) {
      auto gd = grad_of(pb).data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gd[c] += sd[r * cols + c];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto od = out.data();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto sd = self.grad.data();
    if (pa.requires_grad) {
      auto gd = grad_of(pa).data();
      auto other = pb.value.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += sd[i] * other[i];
    }
    if (pb.requires_grad) {
      auto gd = grad_of(pb).data();
      auto other = pa.value.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += sd[i] * other[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return make_result(std::move(out), {x}, [factor](Node& self) {
    auto gd = grad_of(*self.parents[0]).data();
    auto sd = self.grad.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += factor * sd[i];
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0 ? v : 0.0;
  return make_result(std::move(out), {x}, [](Node& self) {
    auto& px = *self.parents[0];
    auto gd = grad_of(px).data();
    auto xd = px.value.data();
    auto sd = self.grad.data();
    for (std::size_t i = 0; i < gd.size(); ++i)
      if (xd[i] > 0) gd[i] += sd[i];
  });
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  const std::size_t rows = x.rows(), cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data().data() + r * cols;
    double peak = row[0];
    for (std::size_t c = 1; c < cols; ++c) peak = std::max(peak, row[c]);
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - peak);
      total += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
  return out;
}

Var softmax(const Var& x) {
  Tensor out = softmax_rows(x.value());
  const std::size_t rows = out.rows(), cols = out.cols();
  return make_result(std::move(out), {x}, [rows, cols](Node& self) {
    auto gd = grad_of(*self.parents[0]).data();
    auto y = self.value.data();
    auto dy = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      double dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[o + c] * y[o + c];
      for (std::size_t c = 0; c < cols; ++c) gd[o + c] += y[o + c] * (dy[o + c] - dot);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols)
    throw ShapeError("layer_norm: gain/bias width does not match rows of width " + std::to_string(cols));
  Tensor normalized(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * cols;
    double mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<double>(cols);
    double var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) normalized[r * cols + c] = (row[c] - mean) * inv_std[r];
  }
  Tensor out(xv.shape());
  auto g = gamma.value().data();
  auto b = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = normalized[r * cols + c] * g[c] + b[c];

  return make_result(
      std::move(out), {x, gamma, beta},
      [rows, cols, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        auto dy = self.grad.data();
        if (pg.requires_grad) {
          auto gg = grad_of(pg).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gg[c] += dy[r * cols + c] * normalized[r * cols + c];
        }
        if (pb.requires_grad) {
          auto gb = grad_of(pb).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += dy[r * cols + c];
        }
        if (px.requires_grad) {
          auto gx = grad_of(px).data();
          auto g = pg.value.data();
          const double n = static_cast<double>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t o = r * cols;
            double mean_d = 0, mean_dx = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = dy[o + c] * g[c];
              mean_d += d;
              mean_dx += d * normalized[o + c];
            }
            mean_d /= n;
            mean_dx /= n;
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = dy[o + c] * g[c];
              gx[o + c] += inv_std[r] * (d - mean_d - normalized[o + c] * mean_dx);
            }
          }
        }
      });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  const std::size_t vocab = tv.rows(), width = tv.cols();
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  Tensor out(matrix_shape(ids.size(), width));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    std::copy_n(tv.data().data() + ids[i] * width, width, out.data().data() + i * width);
  }
  std::vector<int> rows(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [rows = std::move(rows), width](Node& self) {
    auto gt = grad_of(*self.parents[0]).data();
    auto dy = self.grad.data();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < width; ++c) gt[rows[i] * width + c] += dy[i * width + c];
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t width) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (width == 0 || begin + width > cols) throw ShapeError("slice_cols: range outside tensor");
  Tensor out(matrix_shape(rows, width));
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data().data() + r * cols + begin, width, out.data().data() + r * width);
  return make_result(std::move(out), {x}, [rows, cols, begin, width](Node& self) {
    auto gx = grad_of(*self.parents[0]).data();
    auto dy = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) gx[r * cols + begin + c] += dy[r * width + c];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t rows = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out(matrix_shape(rows, total));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data().data() + r * widths[k], widths[k], out.data().data() + r * total + offset);
    offset += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), std::move(inputs), [rows, total, widths](Node& self) {
    auto dy = self.grad.data();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (p.requires_grad) {
        auto gp = grad_of(p).data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp[r * widths[k] + c] += dy[r * total + offset + c];
      }
      offset += widths[k];
    }
  });
}

Var mean_rows(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(matrix_shape(1, cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += xv[r * cols + c];
  for (auto& v : out.data()) v /= static_cast<double>(rows);
  return make_result(std::move(out), {x}, [rows, cols](Node& self) {
    auto gx = grad_of(*self.parents[0]).data();
    auto dy = self.grad.data();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += dy[c] * inv;
  });
}

Var sum(const Var& x) {
  double total = 0;
  for (double v : x.value().data()) total += v;
  return make_result(Tensor::scalar(total), {x}, [](Node& self) {
    const double g = self.grad[0];
    for (auto& v : grad_of(*self.parents[0]).data()) v += g;
  });
}

Var cross_entropy(const Var& logits, int label) {
  const Tensor& z = logits.value();
  if (z.rows() != 1) throw ShapeError("cross_entropy: expects one row of logits, got " + shape_string(z.shape()));
  const std::size_t k = z.cols();
  if (label < 0 || static_cast<std::size_t>(label) >= k)
    throw InputError("cross_entropy: label " + std::to_string(label) + " outside " + std::to_string(k) +
                     " classes");
  Tensor probs = softmax_rows(z);
  double peak = z[0];
  for (std::size_t c = 1; c < k; ++c) peak = std::max(peak, z[c]);
  double total = 0;
  for (std::size_t c = 0; c < k; ++c) total += std::exp(z[c] - peak);
  const double loss = std::max(0.0, peak + std::log(total) - z[label]);
  return make_result(Tensor::scalar(loss), {logits}, [probs = std::move(probs), label](Node& self) {
    auto gz = grad_of(*self.parents[0]).data();
    const double g = self.grad[0];
    for (std::size_t c = 0; c < gz.size(); ++c)
      gz[c] += g * (probs[c] - (static_cast<int>(c) == label ? 1.0 : 0.0));
  });
}

Var dropout(const Var& x, double rate, RandomSource& rng) {
  if (rate < 0 || rate >= 1) throw DomainError("dropout rate must lie in [0, 1)");
  if (rate == 0) return x;
  Tensor mask(x.shape());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.data()) m = rng.uniform() < rate ? 0.0 : keep;
  return mul(x, Var::constant(std::move(mask)));
}

}  // namespace archdoor::ag
