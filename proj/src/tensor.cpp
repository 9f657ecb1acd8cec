#include "amg/tensor.hpp"

#include "amg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace amg {

namespace {

TensorNodePtr make_node(std::vector<int> shape, std::vector<real> values) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const std::vector<int>& a,
                              const std::vector<int>& b) {
  throw RuntimeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
}

void require_2d(const char* op, const Tensor& t) {
  if (t.shape().size() != 2)
    throw RuntimeError(std::string(op) + ": expected 2-d tensor, got " + shape_str(t.shape()));
}

bool wire(TensorNode& out, std::vector<TensorNodePtr> parents) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->needs_grad;
  out.needs_grad = needs;
  if (needs) out.parents = std::move(parents);
  return needs;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), real(0), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, real fill, bool requires_grad) {
  std::int64_t sz = 1;
  for (int d : shape) sz *= d;
  auto n = make_node(std::move(shape), std::vector<real>(sz, fill));
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<real> values,
                           bool requires_grad) {
  std::int64_t sz = 1;
  for (int d : shape) sz *= d;
  if (sz != static_cast<std::int64_t>(values.size()))
    throw RuntimeError("from_values: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
  auto n = make_node(std::move(shape), std::move(values));
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(real v, bool requires_grad) {
  return from_values({1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, real stddev, std::mt19937_64& rng,
                     bool requires_grad) {
  std::int64_t sz = 1;
  for (int d : shape) sz *= d;
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<real> v(sz);
  for (auto& x : v) x = static_cast<real>(dist(rng) * stddev);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  if (a.cols() != b.rows()) shape_error("matmul", a.shape(), b.shape());
  const int n = a.rows(), k = a.cols(), m = b.cols();
  auto out = make_node({n, m}, std::vector<real>(static_cast<size_t>(n) * m));
  kernels::matmul(a.value().data(), b.value().data(), out->value.data(), n, k, m);
  if (wire(*out, {a.node(), b.node()})) {
    auto pa = a.node(), pb = b.node();
    out->backward_fn = [pa, pb, n, k, m](TensorNode& self) {
      std::vector<real> tmp;
      if (pa->needs_grad) {
        pa->ensure_grad();
        tmp.resize(static_cast<size_t>(n) * k);
        kernels::matmul_bt(self.grad.data(), pb->value.data(), tmp.data(), n, m, k);
        for (size_t i = 0; i < tmp.size(); ++i) pa->grad[i] += tmp[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        tmp.resize(static_cast<size_t>(k) * m);
        kernels::matmul_at(pa->value.data(), self.grad.data(), tmp.data(), n, k, m);
        for (size_t i = 0; i < tmp.size(); ++i) pb->grad[i] += tmp[i];
      }
    };
  }
  return Tensor(out);
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require_2d("matmul_bt", a);
  require_2d("matmul_bt", b);
  if (a.cols() != b.cols()) shape_error("matmul_bt", a.shape(), b.shape());
  const int n = a.rows(), k = a.cols(), m = b.rows();
  auto out = make_node({n, m}, std::vector<real>(static_cast<size_t>(n) * m));
  kernels::matmul_bt(a.value().data(), b.value().data(), out->value.data(), n, k, m);
  if (wire(*out, {a.node(), b.node()})) {
    auto pa = a.node(), pb = b.node();
    out->backward_fn = [pa, pb, n, k, m](TensorNode& self) {
      std::vector<real> tmp;
      if (pa->needs_grad) {
        pa->ensure_grad();
        tmp.resize(static_cast<size_t>(n) * k);
        kernels::matmul(self.grad.data(), pb->value.data(), tmp.data(), n, m, k);
        for (size_t i = 0; i < tmp.size(); ++i) pa->grad[i] += tmp[i];
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        tmp.resize(static_cast<size_t>(m) * k);
        kernels::matmul_at(self.grad.data(), pa->value.data(), tmp.data(), n, m, k);
        for (size_t i = 0; i < tmp.size(); ++i) pb->grad[i] += tmp[i];
      }
    };
  }
  return Tensor(out);
}

namespace {

Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          real (*fwd)(real, real), real (*da)(real, real),
                          real (*db)(real, real)) {
  if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  auto out = make_node(a.shape(), std::vector<real>(a.value().size()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = fwd(a.value()[i], b.value()[i]);
  if (wire(*out, {a.node(), b.node()})) {
    auto pa = a.node(), pb = b.node();
    out->backward_fn = [pa, pb, da, db](TensorNode& self) {
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * da(pa->value[i], pb->value[i]);
      }
      if (pb->needs_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * db(pa->value[i], pb->value[i]);
      }
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](real x, real y) { return x + y; },
      [](real, real) { return real(1); }, [](real, real) { return real(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](real x, real y) { return x - y; },
      [](real, real) { return real(1); }, [](real, real) { return real(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](real x, real y) { return x * y; }, [](real, real y) { return y; },
      [](real x, real) { return x; });
}

Tensor scale(const Tensor& a, real c) {
  auto out = make_node(a.shape(), std::vector<real>(a.value().size()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.value()[i] * c;
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa, c](TensorNode& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
    };
  }
  return Tensor(out);
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require_2d("add_rowvec", m);
  if (v.shape().size() != 1 || v.shape()[0] != m.cols())
    shape_error("add_rowvec", m.shape(), v.shape());
  const int n = m.rows(), d = m.cols();
  auto out = make_node(m.shape(), std::vector<real>(m.value().size()));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out->value[static_cast<size_t>(i) * d + j] =
          m.value()[static_cast<size_t>(i) * d + j] + v.value()[j];
  if (wire(*out, {m.node(), v.node()})) {
    auto pm = m.node(), pv = v.node();
    out->backward_fn = [pm, pv, n, d](TensorNode& self) {
      if (pm->needs_grad) {
        pm->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pm->grad[i] += self.grad[i];
      }
      if (pv->needs_grad) {
        pv->ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) pv->grad[j] += self.grad[static_cast<size_t>(i) * d + j];
      }
    };
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const int n = a.rows(), m = a.cols();
  auto out = make_node({m, n}, std::vector<real>(a.value().size()));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out->value[static_cast<size_t>(j) * n + i] = a.value()[static_cast<size_t>(i) * m + j];
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa, n, m](TensorNode& self) {
      pa->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          pa->grad[static_cast<size_t>(i) * m + j] += self.grad[static_cast<size_t>(j) * n + i];
    };
  }
  return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw RuntimeError("concat_rows: empty input");
  const int d = parts[0].cols();
  int n = 0;
  for (const auto& p : parts) {
    require_2d("concat_rows", p);
    if (p.cols() != d) shape_error("concat_rows", parts[0].shape(), p.shape());
    n += p.rows();
  }
  auto out = make_node({n, d}, std::vector<real>());
  out->value.reserve(static_cast<size_t>(n) * d);
  for (const auto& p : parts)
    out->value.insert(out->value.end(), p.value().begin(), p.value().end());
  std::vector<TensorNodePtr> pn;
  for (const auto& p : parts) pn.push_back(p.node());
  if (wire(*out, pn)) {
    out->backward_fn = [pn, d](TensorNode& self) {
      size_t off = 0;
      for (const auto& p : pn) {
        if (p->needs_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->value.size(); ++i) p->grad[i] += self.grad[off + i];
        }
        off += p->value.size();
      }
    };
  }
  return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  require_2d("slice_rows", a);
  if (begin < 0 || end > a.rows() || begin > end)
    throw RuntimeError("slice_rows: range [" + std::to_string(begin) + "," +
                       std::to_string(end) + ") out of " + std::to_string(a.rows()) + " rows");
  const int d = a.cols();
  auto out = make_node({end - begin, d},
                       std::vector<real>(a.value().begin() + static_cast<size_t>(begin) * d,
                                         a.value().begin() + static_cast<size_t>(end) * d));
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa, begin, d](TensorNode& self) {
      pa->ensure_grad();
      const size_t off = static_cast<size_t>(begin) * d;
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[off + i] += self.grad[i];
    };
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  std::int64_t sz = 1;
  for (int d : shape) sz *= d;
  if (sz != a.size()) shape_error("reshape", a.shape(), shape);
  auto out = make_node(std::move(shape), a.value());
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa](TensorNode& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    };
  }
  return Tensor(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw RuntimeError("concat_cols: empty input");
  const int n = parts[0].rows();
  int d = 0;
  for (const auto& p : parts) {
    require_2d("concat_cols", p);
    if (p.rows() != n) shape_error("concat_cols", parts[0].shape(), p.shape());
    d += p.cols();
  }
  auto out = make_node({n, d}, std::vector<real>(static_cast<size_t>(n) * d));
  int col = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < n; ++i)
      std::copy_n(p.value().begin() + static_cast<size_t>(i) * pc, pc,
                  out->value.begin() + static_cast<size_t>(i) * d + col);
    col += pc;
  }
  std::vector<TensorNodePtr> pn;
  for (const auto& p : parts) pn.push_back(p.node());
  if (wire(*out, pn)) {
    out->backward_fn = [pn, n, d](TensorNode& self) {
      int col = 0;
      for (const auto& p : pn) {
        const int pc = p->shape[1];
        if (p->needs_grad) {
          p->ensure_grad();
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < pc; ++j)
              p->grad[static_cast<size_t>(i) * pc + j] +=
                  self.grad[static_cast<size_t>(i) * d + col + j];
        }
        col += pc;
      }
    };
  }
  return Tensor(out);
}

Tensor slice_cols(const Tensor& a, int begin, int end) {
  require_2d("slice_cols", a);
  if (begin < 0 || end > a.cols() || begin > end)
    throw RuntimeError("slice_cols: range [" + std::to_string(begin) + "," +
                       std::to_string(end) + ") out of " + std::to_string(a.cols()) +
                       " cols");
  const int n = a.rows(), d = a.cols(), w = end - begin;
  auto out = make_node({n, w}, std::vector<real>(static_cast<size_t>(n) * w));
  for (int i = 0; i < n; ++i)
    std::copy_n(a.value().begin() + static_cast<size_t>(i) * d + begin, w,
                out->value.begin() + static_cast<size_t>(i) * w);
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa, begin, n, d, w](TensorNode& self) {
      pa->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
          pa->grad[static_cast<size_t>(i) * d + begin + j] +=
              self.grad[static_cast<size_t>(i) * w + j];
    };
  }
  return Tensor(out);
}

Tensor softmax_masked(const Tensor& logits, const Tensor& additive_mask) {
  require_2d("softmax_masked", logits);
  if (logits.shape() != additive_mask.shape())
    shape_error("softmax_masked", logits.shape(), additive_mask.shape());
  const int n = logits.rows(), m = logits.cols();
  auto out = make_node(logits.shape(), std::vector<real>(logits.value().size()));
  for (int i = 0; i < n; ++i) {
    const size_t off = static_cast<size_t>(i) * m;
    double mx = -1e300;
    for (int j = 0; j < m; ++j)
      mx = std::max(mx, static_cast<double>(logits.value()[off + j]) +
                            additive_mask.value()[off + j]);
    double s = 0.0;
    std::vector<double> e(m);
    for (int j = 0; j < m; ++j) {
      const double z = static_cast<double>(logits.value()[off + j]) +
                       additive_mask.value()[off + j] - mx;
      e[j] = std::exp(z);
      s += e[j];
    }
    for (int j = 0; j < m; ++j) out->value[off + j] = static_cast<real>(e[j] / s);
  }
  if (wire(*out, {logits.node(), additive_mask.node()})) {
    auto pl = logits.node();
    out->backward_fn = [pl, n, m](TensorNode& self) {
      if (!pl->needs_grad) return;
      pl->ensure_grad();
      for (int i = 0; i < n; ++i) {
        const size_t off = static_cast<size_t>(i) * m;
        double dot = 0.0;
        for (int j = 0; j < m; ++j)
          dot += static_cast<double>(self.grad[off + j]) * self.value[off + j];
        for (int j = 0; j < m; ++j)
          pl->grad[off + j] += static_cast<real>(
              self.value[off + j] * (static_cast<double>(self.grad[off + j]) - dot));
      }
    };
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps) {
  require_2d("layer_norm", x);
  if (eps <= 0) throw RuntimeError("layer_norm: eps must be > 0");
  const int n = x.rows(), d = x.cols();
  if (gain.shape() != std::vector<int>{d}) shape_error("layer_norm", x.shape(), gain.shape());
  if (bias.shape() != std::vector<int>{d}) shape_error("layer_norm", x.shape(), bias.shape());
  auto out = make_node(x.shape(), std::vector<real>(x.value().size()));
  auto xhat = std::make_shared<std::vector<real>>(x.value().size());
  auto inv = std::make_shared<std::vector<real>>(n);
  for (int i = 0; i < n; ++i) {
    const size_t off = static_cast<size_t>(i) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x.value()[off + j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x.value()[off + j] - mu;
      var += c * c;
    }
    var /= d;
    const double iv = 1.0 / std::sqrt(var + eps);
    (*inv)[i] = static_cast<real>(iv);
    for (int j = 0; j < d; ++j) {
      const real xh = static_cast<real>((x.value()[off + j] - mu) * iv);
      (*xhat)[off + j] = xh;
      out->value[off + j] = xh * gain.value()[j] + bias.value()[j];
    }
  }
  if (wire(*out, {x.node(), gain.node(), bias.node()})) {
    auto px = x.node(), pg = gain.node(), pb = bias.node();
    out->backward_fn = [px, pg, pb, xhat, inv, n, d](TensorNode& self) {
      for (int i = 0; i < n; ++i) {
        const size_t off = static_cast<size_t>(i) * d;
        if (px->needs_grad) {
          px->ensure_grad();
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(self.grad[off + j]) * pg->value[j];
            m1 += dxh;
            m2 += dxh * (*xhat)[off + j];
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            const double dxh = static_cast<double>(self.grad[off + j]) * pg->value[j];
            px->grad[off + j] +=
                static_cast<real>((*inv)[i] * (dxh - m1 - (*xhat)[off + j] * m2));
          }
        }
        if (pg->needs_grad) {
          pg->ensure_grad();
          for (int j = 0; j < d; ++j) pg->grad[j] += self.grad[off + j] * (*xhat)[off + j];
        }
        if (pb->needs_grad) {
          pb->ensure_grad();
          for (int j = 0; j < d; ++j) pb->grad[j] += self.grad[off + j];
        }
      }
    };
  }
  return Tensor(out);
}

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

Tensor unary_elementwise(const Tensor& a, real (*fwd)(real), real (*bwd)(real, real)) {
  auto out = make_node(a.shape(), std::vector<real>(a.value().size()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = fwd(a.value()[i]);
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa, bwd](TensorNode& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * bwd(pa->value[i], self.value[i]);
    };
  }
  return Tensor(out);
}

}  // namespace

Tensor gelu(const Tensor& x) {
  return unary_elementwise(
      x,
      [](real v) {
        return static_cast<real>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
      },
      [](real v, real) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * static_cast<double>(v) * v);
        return static_cast<real>(cdf + v * pdf);
      });
}

Tensor tanh_t(const Tensor& x) {
  return unary_elementwise(
      x, [](real v) { return static_cast<real>(std::tanh(static_cast<double>(v))); },
      [](real, real y) { return static_cast<real>(1.0 - static_cast<double>(y) * y); });
}

Tensor sigmoid_t(const Tensor& x) {
  return unary_elementwise(
      x,
      [](real v) { return static_cast<real>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
      [](real, real y) { return static_cast<real>(static_cast<double>(y) * (1.0 - y)); });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_2d("embedding_lookup", table);
  const int v = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || id >= v)
      throw RuntimeError("embedding_lookup: id " + std::to_string(id) + " out of vocab " +
                         std::to_string(v));
  const int n = static_cast<int>(ids.size());
  auto out = make_node({n, d}, std::vector<real>(static_cast<size_t>(n) * d));
  for (int i = 0; i < n; ++i)
    std::copy_n(table.value().begin() + static_cast<size_t>(ids[i]) * d, d,
                out->value.begin() + static_cast<size_t>(i) * d);
  if (wire(*out, {table.node()})) {
    auto pt = table.node();
    auto idv = ids;
    out->backward_fn = [pt, idv, d](TensorNode& self) {
      pt->ensure_grad();
      for (size_t i = 0; i < idv.size(); ++i)
        for (int j = 0; j < d; ++j)
          pt->grad[static_cast<size_t>(idv[i]) * d + j] += self.grad[i * d + j];
    };
  }
  return Tensor(out);
}

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& labels,
                            const std::vector<std::uint8_t>& position_mask) {
  require_2d("cross_entropy_masked", logits);
  const int n = logits.rows(), v = logits.cols();
  if (static_cast<int>(labels.size()) != n || static_cast<int>(position_mask.size()) != n)
    throw RuntimeError("cross_entropy_masked: labels/mask length " +
                       std::to_string(labels.size()) + "/" +
                       std::to_string(position_mask.size()) + " vs " + std::to_string(n) +
                       " rows");
  int count = 0;
  for (int i = 0; i < n; ++i) {
    if (!position_mask[i]) continue;
    ++count;
    if (labels[i] < 0 || labels[i] >= v)
      throw RuntimeError("cross_entropy_masked: label " + std::to_string(labels[i]) +
                         " out of vocab " + std::to_string(v));
  }
  if (count == 0) throw RuntimeError("cross_entropy_masked: no masked positions");
  auto probs = std::make_shared<std::vector<real>>(logits.value().size(), real(0));
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!position_mask[i]) continue;
    const size_t off = static_cast<size_t>(i) * v;
    double mx = -1e300;
    for (int j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(logits.value()[off + j]));
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += std::exp(static_cast<double>(logits.value()[off + j]) - mx);
    const double lse = mx + std::log(s);
    loss += lse - logits.value()[off + labels[i]];
    for (int j = 0; j < v; ++j)
      (*probs)[off + j] =
          static_cast<real>(std::exp(static_cast<double>(logits.value()[off + j]) - lse));
  }
  auto out = make_node({1}, {static_cast<real>(loss / count)});
  if (wire(*out, {logits.node()})) {
    auto pl = logits.node();
    auto lab = labels;
    auto msk = position_mask;
    out->backward_fn = [pl, probs, lab, msk, n, v, count](TensorNode& self) {
      pl->ensure_grad();
      const real g = self.grad[0] / count;
      for (int i = 0; i < n; ++i) {
        if (!msk[i]) continue;
        const size_t off = static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j)
          pl->grad[off + j] += g * ((*probs)[off + j] - (j == lab[i] ? real(1) : real(0)));
      }
    };
  }
  return Tensor(out);
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (real v : a.value()) s += v;
  auto out = make_node({1}, {static_cast<real>(s)});
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa](TensorNode& self) {
      pa->ensure_grad();
      for (auto& g : pa->grad) g += self.grad[0];
    };
  }
  return Tensor(out);
}

Tensor mean_rows(const Tensor& a, int begin, int end) {
  require_2d("mean_rows", a);
  if (begin < 0 || end > a.rows() || begin >= end)
    throw RuntimeError("mean_rows: empty or invalid range [" + std::to_string(begin) + "," +
                       std::to_string(end) + ")");
  const int d = a.cols(), cnt = end - begin;
  auto out = make_node({d}, std::vector<real>(d));
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = begin; i < end; ++i) s += a.value()[static_cast<size_t>(i) * d + j];
    out->value[j] = static_cast<real>(s / cnt);
  }
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa, begin, end, d, cnt](TensorNode& self) {
      pa->ensure_grad();
      for (int i = begin; i < end; ++i)
        for (int j = 0; j < d; ++j)
          pa->grad[static_cast<size_t>(i) * d + j] += self.grad[j] / cnt;
    };
  }
  return Tensor(out);
}

Tensor dropout(const Tensor& a, real rate, std::mt19937_64& rng) {
  if (rate <= real(0)) return a;
  if (rate >= real(1)) throw RuntimeError("dropout: rate must be < 1");
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  const real keep_scale = real(1) / (real(1) - rate);
  auto mask = std::make_shared<std::vector<real>>(a.value().size());
  for (auto& m : *mask) m = dist(rng) < rate ? real(0) : keep_scale;
  auto out = make_node(a.shape(), std::vector<real>(a.value().size()));
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.value()[i] * (*mask)[i];
  if (wire(*out, {a.node()})) {
    auto pa = a.node();
    out->backward_fn = [pa, mask](TensorNode& self) {
      pa->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * (*mask)[i];
    };
  }
  return Tensor(out);
}

Tensor scatter_slot_memory(const std::vector<Tensor>& states, const Tensor& null_vec,
                           const std::vector<SlotRef>& refs) {
  if (states.empty()) throw RuntimeError("scatter_slot_memory: no memory states");
  const int slot_n = states[0].rows(), d = states[0].cols();
  for (const auto& s : states)
    if (s.shape() != states[0].shape())
      shape_error("scatter_slot_memory", states[0].shape(), s.shape());
  if (null_vec.shape() != std::vector<int>{d})
    shape_error("scatter_slot_memory", states[0].shape(), null_vec.shape());
  const int n = static_cast<int>(refs.size());
  for (const auto& r : refs) {
    if (r.slot >= slot_n)
      throw RuntimeError("scatter_slot_memory: slot " + std::to_string(r.slot) +
                         " >= slot_n " + std::to_string(slot_n));
    if (r.slot >= 0 && (r.time < 0 || r.time >= static_cast<int>(states.size())))
      throw RuntimeError("scatter_slot_memory: time " + std::to_string(r.time) +
                         " out of range");
  }
  auto out = make_node({n, d}, std::vector<real>(static_cast<size_t>(n) * d));
  for (int p = 0; p < n; ++p) {
    const real* src = refs[p].slot < 0
                          ? null_vec.value().data()
                          : states[refs[p].time].value().data() +
                                static_cast<size_t>(refs[p].slot) * d;
    std::copy_n(src, d, out->value.begin() + static_cast<size_t>(p) * d);
  }
  std::vector<TensorNodePtr> parents;
  for (const auto& s : states) parents.push_back(s.node());
  parents.push_back(null_vec.node());
  if (wire(*out, parents)) {
    std::vector<TensorNodePtr> sn;
    for (const auto& s : states) sn.push_back(s.node());
    auto pn = null_vec.node();
    auto rv = refs;
    out->backward_fn = [sn, pn, rv, d](TensorNode& self) {
      for (size_t p = 0; p < rv.size(); ++p) {
        if (rv[p].slot < 0) {
          if (!pn->needs_grad) continue;
          pn->ensure_grad();
          for (int j = 0; j < d; ++j) pn->grad[j] += self.grad[p * d + j];
        } else {
          auto& st = sn[rv[p].time];
          if (!st->needs_grad) continue;
          st->ensure_grad();
          for (int j = 0; j < d; ++j)
            st->grad[static_cast<size_t>(rv[p].slot) * d + j] += self.grad[p * d + j];
        }
      }
    };
  }
  return Tensor(out);
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) throw RuntimeError("backward: loss must be scalar");
  // Iterative post-order topo sort over the needs_grad subgraph.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  if (!loss.node()->needs_grad) return;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    TensorNode* node = stack.back().first;
    const size_t idx = stack.back().second;
    if (idx < node->parents.size()) {
      ++stack.back().second;
      TensorNode* p = node->parents[idx].get();
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double eps) {
  GradCheckReport report;
  for (auto& [name, p] : params) p.node()->grad.assign(p.value().size(), real(0));
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<real>> analytic;
  for (auto& [name, p] : params) {
    p.node()->ensure_grad();
    analytic.push_back(p.grad());
  }
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].second.node()->value;
    GradCheckEntry entry{params[pi].first, 0.0};
    for (size_t i = 0; i < value.size(); ++i) {
      const real orig = value[i];
      value[i] = static_cast<real>(orig + eps);
      const double vp = value[i];
      const double fp = f().at(0);
      value[i] = static_cast<real>(orig - eps);
      const double vm = value[i];
      const double fm = f().at(0);
      value[i] = orig;
      const double gfd = (fp - fm) / (vp - vm);
      const double ga = analytic[pi][i];
      const double rel = std::abs(ga - gfd) / std::max(1e-8, std::abs(ga) + std::abs(gfd));
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace amg
