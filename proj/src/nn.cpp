#include "klvcg/nn.hpp"

#include <cmath>

namespace klvcg {

std::vector<uint8_t> dense_mask(int64_t rows, int64_t cols) {
    return std::vector<uint8_t>(static_cast<size_t>(rows * cols), 1);
}

std::vector<uint8_t> causal_mask(int64_t n) {
    std::vector<uint8_t> m(static_cast<size_t>(n * n), 0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= i; ++j) m[i * n + j] = 1;
    return m;
}

std::vector<uint8_t> key_pad_mask(int64_t rows, const std::vector<uint8_t>& key_valid) {
    int64_t cols = static_cast<int64_t>(key_valid.size());
    std::vector<uint8_t> m(static_cast<size_t>(rows * cols));
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) m[i * cols + j] = key_valid[j];
    return m;
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int64_t in, int64_t out, Rng& rng) {
    w = reg.add(name + ".w", Tensor::xavier(in, out, rng));
    b = reg.add(name + ".b", Tensor::zeros({out}));
}

Tensor Linear::forward(const Tensor& x) const { return add_bias(matmul(x, w), b); }

LayerNormParams::LayerNormParams(ParamRegistry& reg, const std::string& name, int64_t d) {
    gain = reg.add(name + ".gain", Tensor::full({d}, 1.0));
    bias = reg.add(name + ".bias", Tensor::zeros({d}));
}

Tensor LayerNormParams::forward(const Tensor& x) const { return layer_norm(x, gain, bias); }

MultiHeadAttention::MultiHeadAttention(ParamRegistry& reg, const std::string& name, int64_t d,
                                       int64_t heads, Rng& rng)
    : num_heads(heads),
      wq(reg, name + ".q", d, d, rng),
      wk(reg, name + ".k", d, d, rng),
      wv(reg, name + ".v", d, d, rng),
      wo(reg, name + ".o", d, d, rng) {
    if (d % heads != 0)
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
}

Tensor MultiHeadAttention::forward(const Tensor& queries, const Tensor& keys_values,
                                   const std::vector<uint8_t>& mask,
                                   const PassContext& ctx) const {
    int64_t lq = queries.dim(0), lk = keys_values.dim(0);
    if (static_cast<int64_t>(mask.size()) != lq * lk)
        throw ShapeError("attention mask is " + std::to_string(mask.size()) + " flags, expected " +
                         std::to_string(lq) + "x" + std::to_string(lk));
    int64_t dk = queries.dim(1) / num_heads;
    Tensor q = split_heads(wq.forward(queries), num_heads);
    Tensor k = split_heads(wk.forward(keys_values), num_heads);
    Tensor v = split_heads(wv.forward(keys_values), num_heads);
    Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor att = masked_softmax(scores, mask, lq, lk);
    if (ctx.training && ctx.dropout > 0.0) att = dropout(att, ctx.dropout, *ctx.rng, true);
    Tensor merged = merge_heads(matmul(att, v));
    return wo.forward(merged);
}

FeedForward::FeedForward(ParamRegistry& reg, const std::string& name, int64_t d, Rng& rng)
    : lin1(reg, name + ".in", d, 4 * d, rng), lin2(reg, name + ".out", 4 * d, d, rng) {}

Tensor FeedForward::forward(const Tensor& x, const PassContext& ctx) const {
    Tensor h = gelu(lin1.forward(x));
    if (ctx.training && ctx.dropout > 0.0) h = dropout(h, ctx.dropout, *ctx.rng, true);
    return lin2.forward(h);
}

EncoderBlock::EncoderBlock(ParamRegistry& reg, const std::string& name, int64_t d, int64_t heads,
                           Rng& rng)
    : att(reg, name + ".att", d, heads, rng),
      ff(reg, name + ".ff", d, rng),
      ln1(reg, name + ".ln1", d),
      ln2(reg, name + ".ln2", d) {}

Tensor EncoderBlock::forward(const Tensor& x, const std::vector<uint8_t>& mask,
                             const PassContext& ctx) const {
    Tensor h = ln1.forward(add(x, att.forward(x, x, mask, ctx)));
    return ln2.forward(add(h, ff.forward(h, ctx)));
}

CrossAttentionBlock::CrossAttentionBlock(ParamRegistry& reg, const std::string& name, int64_t d,
                                         int64_t heads, Rng& rng)
    : att(reg, name + ".att", d, heads, rng),
      ff(reg, name + ".ff", d, rng),
      ln1(reg, name + ".ln1", d),
      ln2(reg, name + ".ln2", d) {}

Tensor CrossAttentionBlock::forward(const Tensor& queries, const Tensor& keys_values,
                                    const std::vector<uint8_t>& mask,
                                    const PassContext& ctx) const {
    Tensor h = ln1.forward(add(queries, att.forward(queries, keys_values, mask, ctx)));
    return ln2.forward(add(h, ff.forward(h, ctx)));
}

DecoderBlock::DecoderBlock(ParamRegistry& reg, const std::string& name, int64_t d, int64_t heads,
                           Rng& rng)
    : self_att(reg, name + ".self", d, heads, rng),
      cross_att(reg, name + ".cross", d, heads, rng),
      ff(reg, name + ".ff", d, rng),
      ln1(reg, name + ".ln1", d),
      ln2(reg, name + ".ln2", d),
      ln3(reg, name + ".ln3", d) {}

Tensor DecoderBlock::forward(const Tensor& x, const std::vector<uint8_t>& self_mask,
                             const Tensor& memory, const PassContext& ctx) const {
    Tensor h = ln1.forward(add(x, self_att.forward(x, x, self_mask, ctx)));
    std::vector<uint8_t> m = dense_mask(h.dim(0), memory.dim(0));
    Tensor c = ln2.forward(add(h, cross_att.forward(h, memory, m, ctx)));
    return ln3.forward(add(c, ff.forward(c, ctx)));
}

}  // namespace klvcg
