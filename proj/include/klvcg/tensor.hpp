#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "klvcg/common.hpp"

namespace klvcg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// Dense n-dimensional 64-bit float array participating in a reverse-mode
// differentiation graph. Tensor is a cheap handle; copies share the node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> data, bool requires_grad = false);
    static Tensor randn(const Shape& shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                        bool requires_grad = false);
    // Xavier-uniform init over a [fan_in, fan_out] matrix.
    static Tensor xavier(int64_t fan_in, int64_t fan_out, Rng& rng);
    static Tensor identity(int64_t n);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int64_t dim(int axis) const;
    int rank() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    bool requires_grad() const;
    void set_requires_grad(bool v);

    // Gradient buffer; empty until something accumulated into it.
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mut();
    void zero_grad();

    // Scalar access for 0-d / 1-element tensors.
    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// One node of the differentiation graph. `parents` + `backward_fn` encode
// the backward rule; saved activations live inside the closure by value.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Thread-local autograd switch. Evaluation paths disable graph recording so
// read-only forward passes can fan out across threads.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- differentiable operations -------------------------------------------

// Elementwise sum; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
// Adds a rank-1 bias over the last axis of `a`.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

// Batched matrix product: a [..,p,q] x b [..,q,r] -> [..,p,r] with
// broadcastable batch dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& new_shape);

// [L, d] -> [h, L, d/h]
Tensor split_heads(const Tensor& x, int64_t num_heads);
// [h, L, dk] -> [L, h*dk]
Tensor merge_heads(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);

// Softmax over the last axis where only positions with mask!=0 participate;
// masked positions get exactly zero weight. `mask` has the shape of the last
// two axes of `scores` and is shared across leading batch axes.
// A row whose mask is all-zero is a caller contract violation.
Tensor masked_softmax(const Tensor& scores, const std::vector<uint8_t>& mask,
                      int64_t rows, int64_t cols);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids);

// Mean negative log-softmax probability of targets over positions where
// target != ignore_id. logits: [L, V].
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& targets,
                            int64_t ignore_id);

Tensor gelu(const Tensor& x);
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// Concatenates rank-2 tensors along axis 0. All must share the column count.
Tensor concat_rows(const std::vector<Tensor>& parts);
// Rows [start, start+len) of a rank-2 tensor.
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- backward pass ---------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable requires_grad tensor until zero_grad.
void backward(const Tensor& loss);

// ---- parameters, optimizer, checkpoints ------------------------------------

struct Parameter {
    std::string name;
    Tensor tensor;
};

// Ordered parameter collection; registration order defines checkpoint layout.
class ParamRegistry {
public:
    Tensor add(const std::string& name, Tensor t);
    const std::vector<Parameter>& params() const { return params_; }
    Tensor find(const std::string& name) const;
    void zero_grad();
    int64_t total_elements() const;

private:
    std::vector<Parameter> params_;
};

// Adam with bias-corrected moments.
class Adam {
public:
    struct Config {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    explicit Adam(const ParamRegistry& registry);
    Adam(const ParamRegistry& registry, Config cfg);
    void step(double lr);
    // Divides accumulated gradients before the update (gradient accumulation).
    void scale_grads(double factor);

    int64_t step_count() const { return t_; }

    // Optimizer state serialization for resumable training.
    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    const ParamRegistry* registry_;
    Config cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// Checkpoint file: magic "KLVC", version u32, then repeated records
// <name_len u32, name bytes, rank u32, dims u32 x rank, f64 LE data>.
void save_checkpoint(const ParamRegistry& registry, const std::string& path);
void load_checkpoint(ParamRegistry& registry, const std::string& path);
// Raw record view for tools/tests.
std::vector<std::pair<std::string, Tensor>> read_checkpoint_records(const std::string& path);

// ---- finite-difference verification -----------------------------------------

struct FiniteDiffReport {
    double max_rel_error = 0.0;
    int64_t checked = 0;
    bool passed = false;
    std::string worst_label;
};

// Central-difference gradient check. `loss_fn` rebuilds the graph from the
// current contents of `inputs` and returns a scalar. Every element of every
// input is perturbed unless `max_per_input` > 0 caps it (sampled with rng).
FiniteDiffReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                   const std::vector<Tensor>& inputs, double h, double tol,
                                   int64_t max_per_input = 0, Rng* rng = nullptr);

}  // namespace klvcg
