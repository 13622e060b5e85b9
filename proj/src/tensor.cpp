#include "rescaps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "rescaps/rng.hpp"

namespace rescaps {

namespace {

std::size_t checked_numel(const std::vector<int>& dims) {
  if (dims.empty() || dims.size() > 4) {
    throw ShapeError("tensor rank must be 1-4, got rank " +
                     std::to_string(dims.size()));
  }
  std::size_t n = 1;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] <= 0) {
      throw ShapeError("tensor dim " + std::to_string(i) +
                       " must be positive, got " + std::to_string(dims[i]));
    }
    n *= static_cast<std::size_t>(dims[i]);
  }
  return n;
}

// Product of dims before `axis` (outer) and after `axis` (inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const std::vector<int>& dims, int axis) {
  AxisSplit s;
  for (int i = 0; i < static_cast<int>(dims.size()); ++i) {
    auto d = static_cast<std::size_t>(dims[static_cast<std::size_t>(i)]);
    if (i < axis) {
      s.outer *= d;
    } else if (i == axis) {
      s.len = d;
    } else {
      s.inner *= d;
    }
  }
  return s;
}

void check_axis(const std::vector<int>& dims, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(dims.size())) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(dims.size()));
  }
}

void check_same_dims(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  }
}

}  // namespace

std::string dims_to_string(const std::vector<int>& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << ',';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(std::vector<int> dims, bool requires_grad) {
  return full(std::move(dims), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> dims, double value, bool requires_grad) {
  std::size_t n = checked_numel(dims);
  auto node = std::make_shared<autograd::Node>();
  node->dims = std::move(dims);
  node->data.assign(n, value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(std::vector<int> dims, std::vector<double> data,
                         bool requires_grad) {
  std::size_t n = checked_numel(dims);
  if (n != data.size()) {
    throw ShapeError("from_data: " + dims_to_string(dims) + " needs " +
                     std::to_string(n) + " values, got " +
                     std::to_string(data.size()));
  }
  auto node = std::make_shared<autograd::Node>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::uniform_init(std::vector<int> dims, int fan_in, Rng& rng,
                            bool requires_grad) {
  if (fan_in <= 0) throw ShapeError("uniform_init: fan_in must be positive");
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::size_t n = checked_numel(dims);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return from_data(std::move(dims), std::move(data), requires_grad);
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw std::runtime_error("tensor has no gradient; call backward first");
  }
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item: tensor has " + std::to_string(size()) +
                     " elements, expected 1");
  }
  return node_->data[0];
}

Tensor make_op(std::vector<int> dims, std::vector<double> data,
               const std::vector<Tensor>& parents,
               std::function<void(autograd::Node&)> backprop) {
  std::size_t n = checked_numel(dims);
  if (n != data.size()) {
    throw ShapeError("make_op: data size does not match dims");
  }
  auto node = std::make_shared<autograd::Node>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  for (const auto& p : parents) {
    node->parents.push_back(p.node());
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) node->backprop = std::move(backprop);
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_dims(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(a.dims(), std::move(out), {a, b}, [](autograd::Node& self) {
    for (int p = 0; p < 2; ++p) {
      auto& parent = *self.parents[static_cast<std::size_t>(p)];
      if (!parent.requires_grad) continue;
      auto& g = parent.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_dims(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op(a.dims(), std::move(out), {a, b}, [](autograd::Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_dims(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op(a.dims(), std::move(out), {a, b}, [](autograd::Node& self) {
    const auto& va = self.parents[0]->data;
    const auto& vb = self.parents[1]->data;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * vb[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * va[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return make_op(a.dims(), std::move(out), {a}, [c](autograd::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return make_op(a.dims(), std::move(out), {a}, [](autograd::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_op({1}, {total}, {a}, [](autograd::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return make_op(x.dims(), std::move(out), {x}, [](autograd::Node& self) {
    const auto& v = self.parents[0]->data;
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (v[i] > 0.0) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, std::vector<int> dims) {
  std::size_t n = checked_numel(dims);
  if (n != a.size()) {
    throw ShapeError("reshape: cannot view " + dims_to_string(a.dims()) +
                     " as " + dims_to_string(dims));
  }
  return make_op(std::move(dims), a.data(), {a}, [](autograd::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& first = parts[0].dims();
  check_axis(first, axis, "concat");
  int total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(first.size())) {
      throw ShapeError("concat: rank mismatch");
    }
    for (int i = 0; i < p.rank(); ++i) {
      if (i != axis && p.dim(i) != first[static_cast<std::size_t>(i)]) {
        throw ShapeError("concat: dim " + std::to_string(i) +
                         " mismatch: " + std::to_string(p.dim(i)) + " vs " +
                         std::to_string(first[static_cast<std::size_t>(i)]));
      }
    }
    total_axis += p.dim(axis);
  }
  std::vector<int> out_dims = first;
  out_dims[static_cast<std::size_t>(axis)] = total_axis;

  AxisSplit out_split = split_at(out_dims, axis);
  std::vector<double> out(out_split.outer * out_split.len * out_split.inner);
  std::vector<std::size_t> offsets;  // start along the axis per part
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    AxisSplit ps = split_at(p.dims(), axis);
    for (std::size_t o = 0; o < ps.outer; ++o) {
      const double* src = p.data().data() + o * ps.len * ps.inner;
      double* dst =
          out.data() + (o * out_split.len + off) * out_split.inner;
      std::copy(src, src + ps.len * ps.inner, dst);
    }
    off += static_cast<std::size_t>(p.dim(axis));
  }

  std::vector<std::size_t> lens;
  for (const auto& p : parts) lens.push_back(static_cast<std::size_t>(p.dim(axis)));
  return make_op(out_dims, std::move(out), parts,
                 [axis, offsets, lens](autograd::Node& self) {
                   AxisSplit os = split_at(self.dims, axis);
                   for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                     auto& parent = *self.parents[pi];
                     if (!parent.requires_grad) continue;
                     auto& g = parent.ensure_grad();
                     std::size_t len = lens[pi];
                     for (std::size_t o = 0; o < os.outer; ++o) {
                       const double* src =
                           self.grad.data() +
                           (o * os.len + offsets[pi]) * os.inner;
                       double* dst = g.data() + o * len * os.inner;
                       for (std::size_t i = 0; i < len * os.inner; ++i)
                         dst[i] += src[i];
                     }
                   }
                 });
}

Tensor slice(const Tensor& a, int axis, int start, int length) {
  check_axis(a.dims(), axis, "slice");
  if (start < 0 || length <= 0 || start + length > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") out of bounds for dim " +
                     std::to_string(axis) + " of size " +
                     std::to_string(a.dim(axis)));
  }
  std::vector<int> out_dims = a.dims();
  out_dims[static_cast<std::size_t>(axis)] = length;
  AxisSplit as = split_at(a.dims(), axis);
  std::vector<double> out(as.outer * static_cast<std::size_t>(length) * as.inner);
  for (std::size_t o = 0; o < as.outer; ++o) {
    const double* src =
        a.data().data() + (o * as.len + static_cast<std::size_t>(start)) * as.inner;
    double* dst = out.data() + o * static_cast<std::size_t>(length) * as.inner;
    std::copy(src, src + static_cast<std::size_t>(length) * as.inner, dst);
  }
  return make_op(out_dims, std::move(out), {a},
                 [axis, start, length](autograd::Node& self) {
                   auto& parent = *self.parents[0];
                   auto& g = parent.ensure_grad();
                   AxisSplit as = split_at(parent.dims, axis);
                   for (std::size_t o = 0; o < as.outer; ++o) {
                     double* dst =
                         g.data() + (o * as.len + static_cast<std::size_t>(start)) * as.inner;
                     const double* src =
                         self.grad.data() +
                         o * static_cast<std::size_t>(length) * as.inner;
                     for (std::size_t i = 0;
                          i < static_cast<std::size_t>(length) * as.inner; ++i)
                       dst[i] += src[i];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 tensors, got " +
                     dims_to_string(a.dims()) + " and " +
                     dims_to_string(b.dims()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dim mismatch: a dim 1 is " +
                     std::to_string(a.dim(1)) + ", b dim 0 is " +
                     std::to_string(b.dim(0)));
  }
  int n = a.dim(0), f = a.dim(1), g = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(n) * g, 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < f; ++k) {
      double av = a.data()[static_cast<std::size_t>(i) * f + k];
      if (av == 0.0) continue;
      const double* brow = b.data().data() + static_cast<std::size_t>(k) * g;
      double* orow = out.data() + static_cast<std::size_t>(i) * g;
      for (int j = 0; j < g; ++j) orow[j] += av * brow[j];
    }
  return make_op({n, g}, std::move(out), {a, b},
                 [n, f, g](autograd::Node& self) {
                   const auto& va = self.parents[0]->data;
                   const auto& vb = self.parents[1]->data;
                   if (self.parents[0]->requires_grad) {
                     auto& ga = self.parents[0]->ensure_grad();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < g; ++j) {
                         double gv = self.grad[static_cast<std::size_t>(i) * g + j];
                         if (gv == 0.0) continue;
                         for (int k = 0; k < f; ++k)
                           ga[static_cast<std::size_t>(i) * f + k] +=
                               gv * vb[static_cast<std::size_t>(k) * g + j];
                       }
                   }
                   if (self.parents[1]->requires_grad) {
                     auto& gb = self.parents[1]->ensure_grad();
                     for (int i = 0; i < n; ++i)
                       for (int k = 0; k < f; ++k) {
                         double av = va[static_cast<std::size_t>(i) * f + k];
                         if (av == 0.0) continue;
                         for (int j = 0; j < g; ++j)
                           gb[static_cast<std::size_t>(k) * g + j] +=
                               av * self.grad[static_cast<std::size_t>(i) * g + j];
                       }
                   }
                 });
}

namespace {

// Row-broadcast bias add: a [N,G] + bias [G].
Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || bias.dim(0) != a.dim(1)) {
    throw ShapeError("bias add: bias " + dims_to_string(bias.dims()) +
                     " does not match columns of " + dims_to_string(a.dims()));
  }
  int n = a.dim(0), g = a.dim(1);
  std::vector<double> out(a.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < g; ++j)
      out[static_cast<std::size_t>(i) * g + j] =
          a.data()[static_cast<std::size_t>(i) * g + j] + bias.data()[static_cast<std::size_t>(j)];
  return make_op(a.dims(), std::move(out), {a, bias},
                 [n, g](autograd::Node& self) {
                   if (self.parents[0]->requires_grad) {
                     auto& ga = self.parents[0]->ensure_grad();
                     for (std::size_t i = 0; i < ga.size(); ++i)
                       ga[i] += self.grad[i];
                   }
                   if (self.parents[1]->requires_grad) {
                     auto& gb = self.parents[1]->ensure_grad();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < g; ++j)
                         gb[static_cast<std::size_t>(j)] +=
                             self.grad[static_cast<std::size_t>(i) * g + j];
                   }
                 });
}

}  // namespace

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  return add_rowvec(matmul(input, weight), bias);
}

Tensor softmax(const Tensor& x, int axis) {
  check_axis(x.dims(), axis, "softmax");
  AxisSplit s = split_at(x.dims(), axis);
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t base = o * s.len * s.inner + in;
      double mx = x.data()[base];
      for (std::size_t k = 1; k < s.len; ++k)
        mx = std::max(mx, x.data()[base + k * s.inner]);
      double denom = 0.0;
      for (std::size_t k = 0; k < s.len; ++k) {
        double e = std::exp(x.data()[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        denom += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= denom;
    }
  return make_op(x.dims(), std::move(out), {x}, [s](autograd::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.len; ++k)
          dot += self.grad[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.len; ++k)
          g[base + k * s.inner] +=
              y[base + k * s.inner] * (self.grad[base + k * s.inner] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation with zero padding)

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const ConvSpec& spec) {
  if (input.rank() != 4) {
    throw ShapeError("conv2d: input must be rank 4 [N,C,H,W], got " +
                     dims_to_string(input.dims()));
  }
  if (weight.rank() != 4) {
    throw ShapeError("conv2d: weight must be rank 4 [O,C,k,k], got " +
                     dims_to_string(weight.dims()));
  }
  if (spec.kernel < 1 || spec.stride < 1 || spec.padding < 0) {
    throw ShapeError("conv2d: invalid spec (kernel " +
                     std::to_string(spec.kernel) + ", stride " +
                     std::to_string(spec.stride) + ", padding " +
                     std::to_string(spec.padding) + ")");
  }
  if (input.dim(1) != spec.in_channels) {
    throw ShapeError("conv2d: input channel dim 1 is " +
                     std::to_string(input.dim(1)) + ", spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (weight.dim(0) != spec.out_channels || weight.dim(1) != spec.in_channels ||
      weight.dim(2) != spec.kernel || weight.dim(3) != spec.kernel) {
    throw ShapeError("conv2d: weight " + dims_to_string(weight.dims()) +
                     " does not match spec [" +
                     std::to_string(spec.out_channels) + "," +
                     std::to_string(spec.in_channels) + "," +
                     std::to_string(spec.kernel) + "," +
                     std::to_string(spec.kernel) + "]");
  }
  if (bias.rank() != 1 || bias.dim(0) != spec.out_channels) {
    throw ShapeError("conv2d: bias dim 0 must be " +
                     std::to_string(spec.out_channels) + ", got " +
                     dims_to_string(bias.dims()));
  }
  int batch = input.dim(0), in_c = input.dim(1), in_h = input.dim(2),
      in_w = input.dim(3);
  int out_h = spec.out_extent(in_h);
  int out_w = spec.out_extent(in_w);
  if (out_h < 1 || out_w < 1) {
    throw ShapeError("conv2d: input spatial dims " + std::to_string(in_h) +
                     "x" + std::to_string(in_w) +
                     " too small for kernel/stride/padding");
  }
  int out_c = spec.out_channels, k = spec.kernel, stride = spec.stride,
      pad = spec.padding;

  std::vector<double> out(static_cast<std::size_t>(batch) * out_c * out_h * out_w);
  const double* in = input.data().data();
  const double* w = weight.data().data();
  const double* b = bias.data().data();
  for (int n = 0; n < batch; ++n)
    for (int oc = 0; oc < out_c; ++oc)
      for (int oh = 0; oh < out_h; ++oh)
        for (int ow = 0; ow < out_w; ++ow) {
          double acc = b[oc];
          for (int ic = 0; ic < in_c; ++ic)
            for (int kh = 0; kh < k; ++kh) {
              int ih = oh * stride - pad + kh;
              if (ih < 0 || ih >= in_h) continue;
              const double* in_row =
                  in + ((static_cast<std::size_t>(n) * in_c + ic) * in_h + ih) * in_w;
              const double* w_row =
                  w + ((static_cast<std::size_t>(oc) * in_c + ic) * k + kh) * k;
              for (int kw = 0; kw < k; ++kw) {
                int iw = ow * stride - pad + kw;
                if (iw < 0 || iw >= in_w) continue;
                acc += in_row[iw] * w_row[kw];
              }
            }
          out[((static_cast<std::size_t>(n) * out_c + oc) * out_h + oh) * out_w +
              ow] = acc;
        }

  return make_op(
      {batch, out_c, out_h, out_w}, std::move(out), {input, weight, bias},
      [batch, in_c, in_h, in_w, out_c, out_h, out_w, k, stride,
       pad](autograd::Node& self) {
        auto& input_node = *self.parents[0];
        auto& weight_node = *self.parents[1];
        auto& bias_node = *self.parents[2];
        const double* in = input_node.data.data();
        const double* w = weight_node.data.data();
        double* gin =
            input_node.requires_grad ? input_node.ensure_grad().data() : nullptr;
        double* gw = weight_node.requires_grad ? weight_node.ensure_grad().data()
                                               : nullptr;
        double* gb =
            bias_node.requires_grad ? bias_node.ensure_grad().data() : nullptr;
        for (int n = 0; n < batch; ++n)
          for (int oc = 0; oc < out_c; ++oc)
            for (int oh = 0; oh < out_h; ++oh)
              for (int ow = 0; ow < out_w; ++ow) {
                double go =
                    self.grad[((static_cast<std::size_t>(n) * out_c + oc) * out_h +
                               oh) * out_w + ow];
                if (go == 0.0) continue;
                if (gb) gb[oc] += go;
                for (int ic = 0; ic < in_c; ++ic)
                  for (int kh = 0; kh < k; ++kh) {
                    int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= in_h) continue;
                    std::size_t in_base =
                        ((static_cast<std::size_t>(n) * in_c + ic) * in_h + ih) * in_w;
                    std::size_t w_base =
                        ((static_cast<std::size_t>(oc) * in_c + ic) * k + kh) * k;
                    for (int kw = 0; kw < k; ++kw) {
                      int iw = ow * stride - pad + kw;
                      if (iw < 0 || iw >= in_w) continue;
                      if (gin) gin[in_base + iw] += go * w[w_base + kw];
                      if (gw) gw[w_base + kw] += go * in[in_base + iw];
                    }
                  }
              }
      });
}

// ---------------------------------------------------------------------------
// Capsule primitives

namespace {

// Vectors along the last axis: count x veclen view.
void check_min_rank(const Tensor& t, int min_rank, const char* op) {
  if (t.rank() < min_rank) {
    throw ShapeError(std::string(op) + ": needs rank >= " +
                     std::to_string(min_rank) + ", got " +
                     dims_to_string(t.dims()));
  }
}

}  // namespace

Tensor squash(const Tensor& s) {
  std::size_t veclen = static_cast<std::size_t>(s.dim(s.rank() - 1));
  std::size_t count = s.size() / veclen;
  std::vector<double> out(s.size());
  for (std::size_t v = 0; v < count; ++v) {
    const double* src = s.data().data() + v * veclen;
    double* dst = out.data() + v * veclen;
    double sq = 0.0;
    for (std::size_t i = 0; i < veclen; ++i) sq += src[i] * src[i];
    double norm = std::sqrt(sq);
    double coef = norm > 0.0 ? norm / (1.0 + sq) : 0.0;
    for (std::size_t i = 0; i < veclen; ++i) dst[i] = coef * src[i];
  }
  return make_op(s.dims(), std::move(out), {s},
                 [veclen, count](autograd::Node& self) {
                   const auto& src = self.parents[0]->data;
                   auto& g = self.parents[0]->ensure_grad();
                   for (std::size_t v = 0; v < count; ++v) {
                     const double* sv = src.data() + v * veclen;
                     const double* gv = self.grad.data() + v * veclen;
                     double* out_g = g.data() + v * veclen;
                     double sq = 0.0, dot = 0.0;
                     for (std::size_t i = 0; i < veclen; ++i) {
                       sq += sv[i] * sv[i];
                       dot += gv[i] * sv[i];
                     }
                     double norm = std::sqrt(sq);
                     if (norm == 0.0) continue;  // derivative vanishes at 0
                     double denom = 1.0 + sq;
                     double coef = norm / denom;
                     // d coef/d norm = (1 - sq) / denom^2, applied along s/norm
                     double radial = (1.0 - sq) / (denom * denom) / norm;
                     for (std::size_t i = 0; i < veclen; ++i)
                       out_g[i] += coef * gv[i] + radial * dot * sv[i];
                   }
                 });
}

Tensor caps_length(const Tensor& v) {
  check_min_rank(v, 2, "caps_length");
  std::size_t veclen = static_cast<std::size_t>(v.dim(v.rank() - 1));
  std::size_t count = v.size() / veclen;
  std::vector<int> out_dims(v.dims().begin(), v.dims().end() - 1);
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double* src = v.data().data() + i * veclen;
    double sq = 0.0;
    for (std::size_t j = 0; j < veclen; ++j) sq += src[j] * src[j];
    out[i] = std::sqrt(sq);
  }
  return make_op(std::move(out_dims), std::move(out), {v},
                 [veclen, count](autograd::Node& self) {
                   const auto& src = self.parents[0]->data;
                   auto& g = self.parents[0]->ensure_grad();
                   for (std::size_t i = 0; i < count; ++i) {
                     double len = self.data[i];
                     if (len == 0.0) continue;
                     double go = self.grad[i] / len;
                     for (std::size_t j = 0; j < veclen; ++j)
                       g[i * veclen + j] += go * src[i * veclen + j];
                   }
                 });
}

Tensor caps_predict(const Tensor& u, const Tensor& weight) {
  if (u.rank() != 3) {
    throw ShapeError("caps_predict: input must be [N,I,d_in], got " +
                     dims_to_string(u.dims()));
  }
  if (weight.rank() != 4) {
    throw ShapeError("caps_predict: weight must be [I,K,d_out,d_in], got " +
                     dims_to_string(weight.dims()));
  }
  if (weight.dim(0) != u.dim(1) || weight.dim(3) != u.dim(2)) {
    throw ShapeError("caps_predict: weight " + dims_to_string(weight.dims()) +
                     " incompatible with input " + dims_to_string(u.dims()));
  }
  int batch = u.dim(0), caps_in = u.dim(1), d_in = u.dim(2);
  int caps_out = weight.dim(1), d_out = weight.dim(2);
  std::vector<double> out(
      static_cast<std::size_t>(batch) * caps_in * caps_out * d_out, 0.0);
  const double* uv = u.data().data();
  const double* wv = weight.data().data();
  for (int n = 0; n < batch; ++n)
    for (int i = 0; i < caps_in; ++i) {
      const double* uvec = uv + (static_cast<std::size_t>(n) * caps_in + i) * d_in;
      for (int k = 0; k < caps_out; ++k) {
        const double* wmat =
            wv + ((static_cast<std::size_t>(i) * caps_out + k) * d_out) * d_in;
        double* dst =
            out.data() +
            ((static_cast<std::size_t>(n) * caps_in + i) * caps_out + k) * d_out;
        for (int a = 0; a < d_out; ++a) {
          double acc = 0.0;
          const double* wrow = wmat + static_cast<std::size_t>(a) * d_in;
          for (int bi = 0; bi < d_in; ++bi) acc += wrow[bi] * uvec[bi];
          dst[a] = acc;
        }
      }
    }
  return make_op(
      {batch, caps_in, caps_out, d_out}, std::move(out), {u, weight},
      [batch, caps_in, d_in, caps_out, d_out](autograd::Node& self) {
        const auto& uv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        double* gu = self.parents[0]->requires_grad
                         ? self.parents[0]->ensure_grad().data()
                         : nullptr;
        double* gw = self.parents[1]->requires_grad
                         ? self.parents[1]->ensure_grad().data()
                         : nullptr;
        for (int n = 0; n < batch; ++n)
          for (int i = 0; i < caps_in; ++i) {
            std::size_t ubase = (static_cast<std::size_t>(n) * caps_in + i) * d_in;
            for (int k = 0; k < caps_out; ++k) {
              std::size_t wbase =
                  ((static_cast<std::size_t>(i) * caps_out + k) * d_out) * d_in;
              const double* go =
                  self.grad.data() +
                  ((static_cast<std::size_t>(n) * caps_in + i) * caps_out + k) *
                      d_out;
              for (int a = 0; a < d_out; ++a) {
                double gv = go[a];
                if (gv == 0.0) continue;
                std::size_t wrow = wbase + static_cast<std::size_t>(a) * d_in;
                for (int bi = 0; bi < d_in; ++bi) {
                  if (gu) gu[ubase + bi] += gv * wv[wrow + bi];
                  if (gw) gw[wrow + bi] += gv * uv[ubase + bi];
                }
              }
            }
          }
      });
}

Tensor coupling_weighted_sum(const Tensor& couplings, const Tensor& u_hat) {
  if (couplings.rank() != 3 || u_hat.rank() != 4) {
    throw ShapeError("coupling_weighted_sum: expects c [N,I,K], u_hat [N,I,K,d]");
  }
  if (couplings.dim(0) != u_hat.dim(0) || couplings.dim(1) != u_hat.dim(1) ||
      couplings.dim(2) != u_hat.dim(2)) {
    throw ShapeError("coupling_weighted_sum: c " +
                     dims_to_string(couplings.dims()) +
                     " does not match u_hat " + dims_to_string(u_hat.dims()));
  }
  int batch = u_hat.dim(0), caps_in = u_hat.dim(1), caps_out = u_hat.dim(2),
      d = u_hat.dim(3);
  std::vector<double> out(static_cast<std::size_t>(batch) * caps_out * d, 0.0);
  for (int n = 0; n < batch; ++n)
    for (int i = 0; i < caps_in; ++i)
      for (int k = 0; k < caps_out; ++k) {
        double c =
            couplings.data()[(static_cast<std::size_t>(n) * caps_in + i) * caps_out + k];
        const double* uh =
            u_hat.data().data() +
            ((static_cast<std::size_t>(n) * caps_in + i) * caps_out + k) * d;
        double* dst =
            out.data() + (static_cast<std::size_t>(n) * caps_out + k) * d;
        for (int a = 0; a < d; ++a) dst[a] += c * uh[a];
      }
  return make_op(
      {batch, caps_out, d}, std::move(out), {couplings, u_hat},
      [batch, caps_in, caps_out, d](autograd::Node& self) {
        const auto& cv = self.parents[0]->data;
        const auto& uv = self.parents[1]->data;
        double* gc = self.parents[0]->requires_grad
                         ? self.parents[0]->ensure_grad().data()
                         : nullptr;
        double* gu = self.parents[1]->requires_grad
                         ? self.parents[1]->ensure_grad().data()
                         : nullptr;
        for (int n = 0; n < batch; ++n)
          for (int i = 0; i < caps_in; ++i)
            for (int k = 0; k < caps_out; ++k) {
              std::size_t cidx =
                  (static_cast<std::size_t>(n) * caps_in + i) * caps_out + k;
              std::size_t ubase =
                  ((static_cast<std::size_t>(n) * caps_in + i) * caps_out + k) *
                  d;
              const double* gs =
                  self.grad.data() +
                  (static_cast<std::size_t>(n) * caps_out + k) * d;
              if (gc) {
                double acc = 0.0;
                for (int a = 0; a < d; ++a) acc += gs[a] * uv[ubase + a];
                gc[cidx] += acc;
              }
              if (gu) {
                double c = cv[cidx];
                for (int a = 0; a < d; ++a) gu[ubase + a] += c * gs[a];
              }
            }
      });
}

Tensor routing_agreement(const Tensor& u_hat, const Tensor& v) {
  if (u_hat.rank() != 4 || v.rank() != 3) {
    throw ShapeError("routing_agreement: expects u_hat [N,I,K,d], v [N,K,d]");
  }
  if (u_hat.dim(0) != v.dim(0) || u_hat.dim(2) != v.dim(1) ||
      u_hat.dim(3) != v.dim(2)) {
    throw ShapeError("routing_agreement: u_hat " + dims_to_string(u_hat.dims()) +
                     " does not match v " + dims_to_string(v.dims()));
  }
  int batch = u_hat.dim(0), caps_in = u_hat.dim(1), caps_out = u_hat.dim(2),
      d = u_hat.dim(3);
  std::vector<double> out(static_cast<std::size_t>(batch) * caps_in * caps_out);
  for (int n = 0; n < batch; ++n)
    for (int i = 0; i < caps_in; ++i)
      for (int k = 0; k < caps_out; ++k) {
        const double* uh =
            u_hat.data().data() +
            ((static_cast<std::size_t>(n) * caps_in + i) * caps_out + k) * d;
        const double* vv =
            v.data().data() + (static_cast<std::size_t>(n) * caps_out + k) * d;
        double acc = 0.0;
        for (int a = 0; a < d; ++a) acc += uh[a] * vv[a];
        out[(static_cast<std::size_t>(n) * caps_in + i) * caps_out + k] = acc;
      }
  return make_op(
      {batch, caps_in, caps_out}, std::move(out), {u_hat, v},
      [batch, caps_in, caps_out, d](autograd::Node& self) {
        const auto& uv = self.parents[0]->data;
        const auto& vv = self.parents[1]->data;
        double* gu = self.parents[0]->requires_grad
                         ? self.parents[0]->ensure_grad().data()
                         : nullptr;
        double* gv = self.parents[1]->requires_grad
                         ? self.parents[1]->ensure_grad().data()
                         : nullptr;
        for (int n = 0; n < batch; ++n)
          for (int i = 0; i < caps_in; ++i)
            for (int k = 0; k < caps_out; ++k) {
              double ga =
                  self.grad[(static_cast<std::size_t>(n) * caps_in + i) * caps_out +
                            k];
              if (ga == 0.0) continue;
              std::size_t ubase =
                  ((static_cast<std::size_t>(n) * caps_in + i) * caps_out + k) *
                  d;
              std::size_t vbase =
                  (static_cast<std::size_t>(n) * caps_out + k) * d;
              for (int a = 0; a < d; ++a) {
                if (gu) gu[ubase + a] += ga * vv[vbase + a];
                if (gv) gv[vbase + a] += ga * uv[ubase + a];
              }
            }
      });
}

// ---------------------------------------------------------------------------
// Reverse pass

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     dims_to_string(loss.dims()));
  }
  using autograd::Node;
  // Iterative post-order DFS so deep graphs cannot overflow the stack.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.node().get();
  if (!root->requires_grad) return;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (descended) continue;
    order.push_back(node);
    stack.pop_back();
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

}  // namespace rescaps
