#include "klvcg/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace klvcg {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
    if (!t_grad_enabled) return false;
    for (const Tensor* t : ins)
        if (t->defined() && t->impl()->requires_grad) return true;
    return false;
}

// Wires the new node into the graph when recording is active.
void record(const std::shared_ptr<TensorImpl>& out, const char* op,
            std::initializer_list<const Tensor*> ins, std::function<void(TensorImpl&)> fn) {
    bool rec = any_requires_grad(ins);
    out->op = op;
    if (!rec) return;
    out->requires_grad = true;
    out->parents.reserve(ins.size());
    for (const Tensor* t : ins) out->parents.push_back(t->impl());
    out->backward_fn = std::move(fn);
}

void check_finite_shape(const Shape& shape) {
    for (int64_t d : shape)
        if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + shape_str(shape));
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

// ---- Tensor handle ---------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    check_finite_shape(shape);
    auto impl = make_impl(shape, std::vector<double>(shape_numel(shape), 0.0));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    check_finite_shape(shape);
    auto impl = make_impl(shape, std::vector<double>(shape_numel(shape), value));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool requires_grad) {
    check_finite_shape(shape);
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    auto impl = make_impl(shape, std::move(data));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double mean, double stddev, bool requires_grad) {
    check_finite_shape(shape);
    std::vector<double> data(shape_numel(shape));
    for (double& x : data) x = rng.normal(mean, stddev);
    auto impl = make_impl(shape, std::move(data));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::xavier(int64_t fan_in, int64_t fan_out, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> data(fan_in * fan_out);
    for (double& x : data) x = rng.uniform(-limit, limit);
    return Tensor::from({fan_in, fan_out}, std::move(data));
}

Tensor Tensor::identity(int64_t n) {
    Tensor t = Tensor::zeros({n, n});
    for (int64_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::numel() const { return impl_->numel(); }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

int64_t Tensor::dim(int axis) const {
    int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("axis out of range");
    return impl_->shape[axis];
}

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }
bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool v) { impl_->requires_grad = v; }

const std::vector<double>& Tensor::grad() const { return impl_->grad; }
std::vector<double>& Tensor::grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
}
void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor, shape is " +
                                          shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    const Shape& s = impl_->shape;
    if (idx.size() != s.size()) throw ShapeError("index rank mismatch");
    int64_t flat = 0;
    size_t k = 0;
    for (int64_t i : idx) {
        if (i < 0 || i >= s[k]) throw ShapeError("index out of range");
        flat = flat * s[k] + i;
        ++k;
    }
    return impl_->data[flat];
}

// ---- elementwise ops -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = ad[i] + bd[i];
    auto impl = make_impl(a.shape(), std::move(out));
    record(impl, "add", {&a, &b}, [](TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i];
        }
    });
    return Tensor(impl);
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    if (bias.rank() != 1 || bias.dim(0) != a.dim(-1))
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                         shape_str(a.shape()));
    int64_t d = bias.dim(0);
    int64_t rows = a.numel() / d;
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    const auto& bd = bias.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out[r * d + j] = ad[r * d + j] + bd[j];
    auto impl = make_impl(a.shape(), std::move(out));
    record(impl, "add_bias", {&a, &bias}, [d, rows](TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) pb.grad[j] += self.grad[r * d + j];
        }
    });
    return Tensor(impl);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto impl = make_impl(a.shape(), std::move(out));
    record(impl, "sub", {&a, &b}, [](TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
    return Tensor(impl);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<double> out(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto impl = make_impl(a.shape(), std::move(out));
    record(impl, "mul", {&a, &b}, [](TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
    return Tensor(impl);
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.data()[i] * c;
    auto impl = make_impl(a.shape(), std::move(out));
    record(impl, "scale", {&a}, [c](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * c;
    });
    return Tensor(impl);
}

// ---- matmul ----------------------------------------------------------------

namespace {

// Per flat-batch-index element offsets (in slice units) of a possibly
// broadcast operand, right-aligned against the output batch dims.
std::vector<int64_t> broadcast_offsets(const std::vector<int64_t>& out_bat,
                                       const std::vector<int64_t>& in_bat) {
    std::vector<int64_t> strides(in_bat.size());
    int64_t s = 1;
    for (int i = static_cast<int>(in_bat.size()) - 1; i >= 0; --i) {
        strides[i] = (in_bat[i] == 1) ? 0 : s;
        if (in_bat[i] != 1) s *= in_bat[i];
    }
    int64_t n = 1;
    for (int64_t d : out_bat) n *= d;
    std::vector<int64_t> offs(static_cast<size_t>(n), 0);
    std::vector<int64_t> idx(out_bat.size(), 0);
    for (int64_t f = 0; f < n; ++f) {
        int64_t o = 0;
        for (size_t i = 0; i < out_bat.size(); ++i) o += idx[i] * strides[i];
        offs[f] = o;
        for (int i = static_cast<int>(out_bat.size()) - 1; i >= 0; --i) {
            if (++idx[i] < out_bat[i]) break;
            idx[i] = 0;
        }
    }
    return offs;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(as) + " x " +
                         shape_str(bs));
    int64_t p = as[as.size() - 2], q = as.back();
    int64_t q2 = bs[bs.size() - 2], r = bs.back();
    if (q != q2)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(as) + " x " +
                         shape_str(bs));

    size_t nb = std::max(as.size(), bs.size()) - 2;
    std::vector<int64_t> abat(nb, 1), bbat(nb, 1), obat(nb, 1);
    for (size_t i = 0; i < as.size() - 2; ++i) abat[nb - (as.size() - 2) + i] = as[i];
    for (size_t i = 0; i < bs.size() - 2; ++i) bbat[nb - (bs.size() - 2) + i] = bs[i];
    for (size_t i = 0; i < nb; ++i) {
        if (abat[i] == bbat[i] || abat[i] == 1 || bbat[i] == 1)
            obat[i] = std::max(abat[i], bbat[i]);
        else
            throw ShapeError("matmul: batch dimensions not broadcastable: " + shape_str(as) +
                             " x " + shape_str(bs));
    }

    std::vector<int64_t> a_offs = broadcast_offsets(obat, abat);
    std::vector<int64_t> b_offs = broadcast_offsets(obat, bbat);
    int64_t n_batch = static_cast<int64_t>(a_offs.size());

    Shape out_shape(obat);
    out_shape.push_back(p);
    out_shape.push_back(r);
    std::vector<double> out(static_cast<size_t>(n_batch * p * r));

    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (int64_t f = 0; f < n_batch; ++f) {
        CMapMat A(ad + a_offs[f] * p * q, p, q);
        CMapMat B(bd + b_offs[f] * q * r, q, r);
        MapMat C(out.data() + f * p * r, p, r);
        C.noalias() = A * B;
    }

    auto impl = make_impl(std::move(out_shape), std::move(out));
    record(impl, "matmul", {&a, &b}, [a_offs, b_offs, p, q, r, n_batch](TensorImpl& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int64_t f = 0; f < n_batch; ++f) {
            CMapMat G(self.grad.data() + f * p * r, p, r);
            if (pa.requires_grad) {
                CMapMat B(pb.data.data() + b_offs[f] * q * r, q, r);
                MapMat dA(pa.grad.data() + a_offs[f] * p * q, p, q);
                dA.noalias() += G * B.transpose();
            }
            if (pb.requires_grad) {
                CMapMat A(pa.data.data() + a_offs[f] * p * q, p, q);
                MapMat dB(pb.grad.data() + b_offs[f] * q * r, q, r);
                dB.noalias() += A.transpose() * G;
            }
        }
    });
    return Tensor(impl);
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2) throw ShapeError("transpose_last2 requires rank >= 2");
    Shape s = a.shape();
    int64_t p = s[s.size() - 2], q = s.back();
    std::swap(s[s.size() - 2], s.back());
    int64_t n_batch = a.numel() / (p * q);
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (int64_t f = 0; f < n_batch; ++f)
        for (int64_t i = 0; i < p; ++i)
            for (int64_t j = 0; j < q; ++j)
                out[f * p * q + j * p + i] = ad[f * p * q + i * q + j];
    auto impl = make_impl(std::move(s), std::move(out));
    record(impl, "transpose", {&a}, [p, q, n_batch](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t f = 0; f < n_batch; ++f)
            for (int64_t i = 0; i < p; ++i)
                for (int64_t j = 0; j < q; ++j)
                    pa.grad[f * p * q + i * q + j] += self.grad[f * p * q + j * p + i];
    });
    return Tensor(impl);
}

Tensor reshape(const Tensor& a, const Shape& new_shape) {
    check_finite_shape(new_shape);
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    auto impl = make_impl(new_shape, a.data());
    record(impl, "reshape", {&a}, [](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    });
    return Tensor(impl);
}

Tensor split_heads(const Tensor& x, int64_t num_heads) {
    if (x.rank() != 2) throw ShapeError("split_heads expects [L,d], got " + shape_str(x.shape()));
    int64_t L = x.dim(0), d = x.dim(1);
    if (d % num_heads != 0)
        throw ShapeError("split_heads: dim " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
    int64_t dk = d / num_heads;
    std::vector<double> out(x.numel());
    const auto& xd = x.data();
    for (int64_t h = 0; h < num_heads; ++h)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t k = 0; k < dk; ++k)
                out[(h * L + l) * dk + k] = xd[l * d + h * dk + k];
    auto impl = make_impl({num_heads, L, dk}, std::move(out));
    record(impl, "split_heads", {&x}, [num_heads, L, d, dk](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t h = 0; h < num_heads; ++h)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t k = 0; k < dk; ++k)
                    pa.grad[l * d + h * dk + k] += self.grad[(h * L + l) * dk + k];
    });
    return Tensor(impl);
}

Tensor merge_heads(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("merge_heads expects [h,L,dk], got " + shape_str(x.shape()));
    int64_t h = x.dim(0), L = x.dim(1), dk = x.dim(2);
    int64_t d = h * dk;
    std::vector<double> out(x.numel());
    const auto& xd = x.data();
    for (int64_t hh = 0; hh < h; ++hh)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t k = 0; k < dk; ++k)
                out[l * d + hh * dk + k] = xd[(hh * L + l) * dk + k];
    auto impl = make_impl({L, d}, std::move(out));
    record(impl, "merge_heads", {&x}, [h, L, dk, d](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t hh = 0; hh < h; ++hh)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t k = 0; k < dk; ++k)
                    pa.grad[(hh * L + l) * dk + k] += self.grad[l * d + hh * dk + k];
    });
    return Tensor(impl);
}

// ---- normalizers -----------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range");
    int64_t n = x.shape()[axis];
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
    int64_t outer = x.numel() / (n * inner);

    std::vector<double> out(x.numel());
    const auto& xd = x.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            int64_t base = o * n * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
            double z = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                double e = std::exp(xd[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (int64_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    auto impl = make_impl(x.shape(), std::move(out));
    record(impl, "softmax", {&x}, [n, inner, outer](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t i = 0; i < inner; ++i) {
                int64_t base = o * n * inner + i;
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j)
                    dot += self.grad[base + j * inner] * self.data[base + j * inner];
                for (int64_t j = 0; j < n; ++j) {
                    int64_t k = base + j * inner;
                    pa.grad[k] += self.data[k] * (self.grad[k] - dot);
                }
            }
        }
    });
    return Tensor(impl);
}

Tensor masked_softmax(const Tensor& scores, const std::vector<uint8_t>& mask, int64_t rows,
                      int64_t cols) {
    if (scores.rank() < 2 || scores.dim(-2) != rows || scores.dim(-1) != cols)
        throw ShapeError("masked_softmax: scores " + shape_str(scores.shape()) +
                         " do not end in [" + std::to_string(rows) + "," + std::to_string(cols) +
                         "]");
    if (static_cast<int64_t>(mask.size()) != rows * cols)
        throw ShapeError("masked_softmax: mask size mismatch");
    for (int64_t i = 0; i < rows; ++i) {
        bool any = false;
        for (int64_t j = 0; j < cols; ++j)
            if (mask[i * cols + j]) { any = true; break; }
        if (!any)
            throw ContractError("attention: query row " + std::to_string(i) +
                                " has no attendable keys");
    }
    int64_t n_batch = scores.numel() / (rows * cols);
    std::vector<double> out(scores.numel(), 0.0);
    const auto& xd = scores.data();
    for (int64_t f = 0; f < n_batch; ++f) {
        for (int64_t i = 0; i < rows; ++i) {
            int64_t base = (f * rows + i) * cols;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < cols; ++j)
                if (mask[i * cols + j]) mx = std::max(mx, xd[base + j]);
            double z = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
                if (!mask[i * cols + j]) continue;
                double e = std::exp(xd[base + j] - mx);
                out[base + j] = e;
                z += e;
            }
            for (int64_t j = 0; j < cols; ++j)
                if (mask[i * cols + j]) out[base + j] /= z;
        }
    }
    auto impl = make_impl(scores.shape(), std::move(out));
    record(impl, "masked_softmax", {&scores}, [mask, rows, cols, n_batch](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (int64_t f = 0; f < n_batch; ++f) {
            for (int64_t i = 0; i < rows; ++i) {
                int64_t base = (f * rows + i) * cols;
                double dot = 0.0;
                for (int64_t j = 0; j < cols; ++j)
                    if (mask[i * cols + j]) dot += self.grad[base + j] * self.data[base + j];
                for (int64_t j = 0; j < cols; ++j) {
                    if (!mask[i * cols + j]) continue;
                    pa.grad[base + j] += self.data[base + j] * (self.grad[base + j] - dot);
                }
            }
        }
    });
    return Tensor(impl);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    int64_t d = x.dim(-1);
    if (d < 2) throw ContractError("layer_norm: last axis must have size >= 2");
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("layer_norm: gain/bias must be rank-1 of size " + std::to_string(d));
    int64_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(rows);
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    for (int64_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xd[r * d + j];
        mu /= d;
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = xd[r * d + j] - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int64_t j = 0; j < d; ++j) {
            double xh = (xd[r * d + j] - mu) * is;
            xhat[r * d + j] = xh;
            out[r * d + j] = gd[j] * xh + bd[j];
        }
    }
    auto impl = make_impl(x.shape(), std::move(out));
    record(impl, "layer_norm", {&x, &gain, &bias},
           [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl& self) {
               auto& px = *self.parents[0];
               auto& pg = *self.parents[1];
               auto& pb = *self.parents[2];
               const auto& gd = pg.data;
               if (px.requires_grad) px.ensure_grad();
               if (pg.requires_grad) pg.ensure_grad();
               if (pb.requires_grad) pb.ensure_grad();
               for (int64_t r = 0; r < rows; ++r) {
                   double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                   for (int64_t j = 0; j < d; ++j) {
                       int64_t k = r * d + j;
                       double dxh = self.grad[k] * gd[j];
                       sum_dxhat += dxh;
                       sum_dxhat_xhat += dxh * xhat[k];
                       if (pg.requires_grad) pg.grad[j] += self.grad[k] * xhat[k];
                       if (pb.requires_grad) pb.grad[j] += self.grad[k];
                   }
                   if (px.requires_grad) {
                       for (int64_t j = 0; j < d; ++j) {
                           int64_t k = r * d + j;
                           double dxh = self.grad[k] * gd[j];
                           px.grad[k] += inv_std[r] *
                                         (dxh - sum_dxhat / d - xhat[k] * sum_dxhat_xhat / d);
                       }
                   }
               }
           });
    return Tensor(impl);
}

// ---- embedding / loss ------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be [V,d]");
    int64_t V = table.dim(0), d = table.dim(1);
    for (int64_t id : ids)
        if (id < 0 || id >= V)
            throw Error("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                        std::to_string(V) + ")");
    int64_t L = static_cast<int64_t>(ids.size());
    std::vector<double> out(static_cast<size_t>(L * d));
    const auto& td = table.data();
    for (int64_t i = 0; i < L; ++i)
        std::copy_n(td.begin() + ids[i] * d, d, out.begin() + i * d);
    auto impl = make_impl({L, d}, std::move(out));
    record(impl, "embedding", {&table}, [ids, d](TensorImpl& self) {
        auto& pt = *self.parents[0];
        if (!pt.requires_grad) return;
        pt.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i)
            for (int64_t j = 0; j < d; ++j)
                pt.grad[ids[i] * d + j] += self.grad[i * d + j];
    });
    return Tensor(impl);
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& targets,
                            int64_t ignore_id) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [L,V]");
    int64_t L = logits.dim(0), V = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != L)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(L) + " rows");
    int64_t count = 0;
    for (int64_t t : targets)
        if (t != ignore_id) {
            if (t < 0 || t >= V)
                throw Error("cross_entropy: target " + std::to_string(t) + " out of range");
            ++count;
        }
    if (count == 0) throw ContractError("cross_entropy: all positions ignored");

    const auto& xd = logits.data();
    double loss = 0.0;
    for (int64_t i = 0; i < L; ++i) {
        if (targets[i] == ignore_id) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < V; ++j) mx = std::max(mx, xd[i * V + j]);
        double z = 0.0;
        for (int64_t j = 0; j < V; ++j) z += std::exp(xd[i * V + j] - mx);
        loss += mx + std::log(z) - xd[i * V + targets[i]];
    }
    loss /= count;

    auto impl = make_impl({}, {loss});
    record(impl, "cross_entropy", {&logits}, [targets, ignore_id, L, V, count](TensorImpl& self) {
        auto& pl = *self.parents[0];
        if (!pl.requires_grad) return;
        pl.ensure_grad();
        double g = self.grad[0] / count;
        const auto& xd = pl.data;
        for (int64_t i = 0; i < L; ++i) {
            if (targets[i] == ignore_id) continue;
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = 0; j < V; ++j) mx = std::max(mx, xd[i * V + j]);
            double z = 0.0;
            for (int64_t j = 0; j < V; ++j) z += std::exp(xd[i * V + j] - mx);
            for (int64_t j = 0; j < V; ++j) {
                double p = std::exp(xd[i * V + j] - mx) / z;
                pl.grad[i * V + j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
            }
        }
    });
    return Tensor(impl);
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt_2pi = 0.3989422804014326779;
    std::vector<double> out(x.numel());
    const auto& xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i)
        out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * inv_sqrt2));
    auto impl = make_impl(x.shape(), std::move(out));
    record(impl, "gelu", {&x}, [](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double v = pa.data[i];
            double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            pa.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
    return Tensor(impl);
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
    double keep = 1.0 - p;
    std::vector<double> mask(x.numel());
    for (double& m : mask) m = (rng.uniform() < p) ? 0.0 : 1.0 / keep;
    std::vector<double> out(x.numel());
    const auto& xd = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = xd[i] * mask[i];
    auto impl = make_impl(x.shape(), std::move(out));
    record(impl, "dropout", {&x}, [mask = std::move(mask)](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * mask[i];
    });
    return Tensor(impl);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    int64_t d = parts[0].dim(1);
    int64_t total = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != 2 || t.dim(1) != d)
            throw ShapeError("concat_rows: all parts must be [*, " + std::to_string(d) + "]");
        total += t.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(total * d));
    for (const Tensor& t : parts) out.insert(out.end(), t.data().begin(), t.data().end());

    auto impl = make_impl({total, d}, std::move(out));
    bool rec = false;
    if (grad_enabled())
        for (const Tensor& t : parts)
            if (t.requires_grad()) { rec = true; break; }
    impl->op = "concat_rows";
    if (rec) {
        impl->requires_grad = true;
        std::vector<int64_t> row_counts;
        for (const Tensor& t : parts) {
            impl->parents.push_back(t.impl());
            row_counts.push_back(t.dim(0));
        }
        impl->backward_fn = [row_counts, d](TensorImpl& self) {
            int64_t offset = 0;
            for (size_t k = 0; k < row_counts.size(); ++k) {
                auto& pa = *self.parents[k];
                int64_t n = row_counts[k] * d;
                if (pa.requires_grad) {
                    pa.ensure_grad();
                    for (int64_t i = 0; i < n; ++i) pa.grad[i] += self.grad[offset + i];
                }
                offset += n;
            }
        };
    }
    return Tensor(impl);
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
    if (x.rank() != 2) throw ShapeError("slice_rows expects rank-2 input");
    int64_t L = x.dim(0), d = x.dim(1);
    if (start < 0 || len <= 0 || start + len > L)
        throw ShapeError("slice_rows: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of [0," + std::to_string(L) + ")");
    std::vector<double> out(x.data().begin() + start * d, x.data().begin() + (start + len) * d);
    auto impl = make_impl({len, d}, std::move(out));
    record(impl, "slice_rows", {&x}, [start, d](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[start * d + i] += self.grad[i];
    });
    return Tensor(impl);
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto impl = make_impl({}, {s});
    record(impl, "sum", {&x}, [](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (double& g : pa.grad) g += self.grad[0];
    });
    return Tensor(impl);
}

Tensor mean(const Tensor& x) {
    int64_t n = x.numel();
    double s = 0.0;
    for (double v : x.data()) s += v;
    s /= n;
    auto impl = make_impl({}, {s});
    record(impl, "mean", {&x}, [n](TensorImpl& self) {
        auto& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (double& g : pa.grad) g += self.grad[0] / n;
    });
    return Tensor(impl);
}

// ---- backward sweep --------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a defined scalar tensor");
    TensorImpl* root = loss.impl().get();

    // Iterative post-order DFS; recursion depth over a full model graph would
    // overflow the stack.
    std::vector<TensorImpl*> topo;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorImpl* p = node->parents[idx++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads are scratch for this sweep; leaf grads accumulate.
    for (TensorImpl* n : topo)
        if (n->backward_fn) n->grad.assign(n->data.size(), 0.0);
    root->ensure_grad();
    root->grad[0] += 1.0;

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorImpl* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---- parameters ------------------------------------------------------------

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
    for (const Parameter& p : params_)
        if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    params_.push_back({name, t});
    return t;
}

Tensor ParamRegistry::find(const std::string& name) const {
    for (const Parameter& p : params_)
        if (p.name == name) return p.tensor;
    throw Error("unknown parameter: " + name);
}

void ParamRegistry::zero_grad() {
    for (const Parameter& p : params_) const_cast<Tensor&>(p.tensor).zero_grad();
}

int64_t ParamRegistry::total_elements() const {
    int64_t n = 0;
    for (const Parameter& p : params_) n += p.tensor.numel();
    return n;
}

// ---- Adam ------------------------------------------------------------------

Adam::Adam(const ParamRegistry& registry) : Adam(registry, Config{}) {}

Adam::Adam(const ParamRegistry& registry, Config cfg) : registry_(&registry), cfg_(cfg) {
    for (const Parameter& p : registry.params()) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void Adam::step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto& params = registry_->params();
    for (size_t k = 0; k < params.size(); ++k) {
        auto& data = const_cast<Tensor&>(params[k].tensor).data();
        const auto& grad = params[k].tensor.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (size_t i = 0; i < data.size(); ++i) {
            double g = grad.empty() ? 0.0 : grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void Adam::scale_grads(double factor) {
    for (const Parameter& p : registry_->params()) {
        auto& g = const_cast<Tensor&>(p.tensor).grad_mut();
        for (double& x : g) x *= factor;
    }
}

// ---- checkpoint I/O --------------------------------------------------------

namespace {

constexpr uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw IoError("truncated checkpoint: " + path);
    return v;
}

void write_record(std::ostream& os, const std::string& name, const Shape& shape,
                  const std::vector<double>& data) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(shape.size()));
    for (int64_t d : shape) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
}

void write_records_file(const std::string& path,
                        const std::vector<std::tuple<std::string, Shape, const std::vector<double>*>>& recs) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("KLVC", 4);
    write_u32(os, kCheckpointVersion);
    for (const auto& [name, shape, data] : recs) write_record(os, name, shape, *data);
    if (!os) throw IoError("write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> read_records_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "KLVC", 4) != 0)
        throw IoError("bad checkpoint magic in " + path);
    uint32_t version = read_u32(is, path);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    std::vector<std::pair<std::string, Tensor>> out;
    while (true) {
        uint32_t name_len = 0;
        if (!is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len))) break;
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw IoError("truncated checkpoint: " + path);
        uint32_t rank = read_u32(is, path);
        Shape shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = read_u32(is, path);
        std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
        if (!is.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(data.size() * sizeof(double))))
            throw IoError("truncated checkpoint: " + path);
        out.emplace_back(name, Tensor::from(shape, std::move(data)));
    }
    return out;
}

}  // namespace

void save_checkpoint(const ParamRegistry& registry, const std::string& path) {
    std::vector<std::tuple<std::string, Shape, const std::vector<double>*>> recs;
    recs.reserve(registry.params().size());
    for (const Parameter& p : registry.params())
        recs.emplace_back(p.name, p.tensor.shape(), &p.tensor.data());
    write_records_file(path, recs);
}

void load_checkpoint(ParamRegistry& registry, const std::string& path) {
    auto recs = read_records_file(path);
    std::unordered_map<std::string, Tensor> by_name;
    for (auto& [name, t] : recs) by_name.emplace(name, t);
    if (by_name.size() != registry.params().size())
        throw IoError("checkpoint " + path + " holds " + std::to_string(by_name.size()) +
                      " tensors, model expects " + std::to_string(registry.params().size()));
    for (const Parameter& p : registry.params()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw IoError("checkpoint missing parameter: " + p.name);
        if (it->second.shape() != p.tensor.shape())
            throw IoError("checkpoint shape mismatch for " + p.name + ": file " +
                          shape_str(it->second.shape()) + " vs model " +
                          shape_str(p.tensor.shape()));
        const_cast<Tensor&>(p.tensor).data() = it->second.data();
    }
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint_records(const std::string& path) {
    return read_records_file(path);
}

void Adam::save(const std::string& path) const {
    std::vector<std::tuple<std::string, Shape, const std::vector<double>*>> recs;
    std::vector<double> tval = {static_cast<double>(t_)};
    recs.emplace_back("adam.t", Shape{1}, &tval);
    const auto& params = registry_->params();
    for (size_t k = 0; k < params.size(); ++k) {
        recs.emplace_back("adam.m." + params[k].name, params[k].tensor.shape(), &m_[k]);
        recs.emplace_back("adam.v." + params[k].name, params[k].tensor.shape(), &v_[k]);
    }
    write_records_file(path, recs);
}

void Adam::load(const std::string& path) {
    auto recs = read_records_file(path);
    std::unordered_map<std::string, const Tensor*> by_name;
    for (auto& [name, t] : recs) by_name.emplace(name, &t);
    auto get = [&](const std::string& name) -> const Tensor& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("optimizer state missing record: " + name);
        return *it->second;
    };
    t_ = static_cast<int64_t>(get("adam.t").data()[0]);
    const auto& params = registry_->params();
    for (size_t k = 0; k < params.size(); ++k) {
        m_[k] = get("adam.m." + params[k].name).data();
        v_[k] = get("adam.v." + params[k].name).data();
    }
}

// ---- finite differences ----------------------------------------------------

FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                   const std::vector<Tensor>& inputs, double h, double tol,
                                   int64_t max_per_input, Rng* rng) {
    for (const Tensor& t : inputs) const_cast<Tensor&>(t).zero_grad();
    Tensor loss = loss_fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        analytic.push_back(t.grad().empty() ? std::vector<double>(t.numel(), 0.0) : t.grad());
    }

    FiniteDiffReport report;
    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor t = inputs[k];
        int64_t n = t.numel();
        std::vector<int64_t> indices;
        if (max_per_input > 0 && n > max_per_input) {
            if (!rng) throw ContractError("finite_diff_check: sampling requested without rng");
            std::unordered_set<int64_t> seen;
            while (static_cast<int64_t>(indices.size()) < max_per_input) {
                int64_t i = rng->index(n);
                if (seen.insert(i).second) indices.push_back(i);
            }
        } else {
            indices.resize(n);
            for (int64_t i = 0; i < n; ++i) indices[i] = i;
        }
        for (int64_t i : indices) {
            double orig = t.data()[i];
            double fp, fm;
            {
                NoGradGuard eval;
                t.data()[i] = orig + h;
                fp = loss_fn().item();
                t.data()[i] = orig - h;
                fm = loss_fn().item();
                t.data()[i] = orig;
            }
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[k][i];
            double rel = std::abs(a - numeric) / std::max(1e-2, std::abs(a) + std::abs(numeric));
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_label = "input" + std::to_string(k) + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    return report;
}

}  // namespace klvcg
