#pragma once

#include "klvcg/tensor.hpp"

namespace klvcg {

// Attention masks are row-major [rows x cols] of 0/1 flags; 1 means the query
// at that row may attend to the key at that column.
std::vector<uint8_t> dense_mask(int64_t rows, int64_t cols);
// Lower-triangular: position i sees keys 0..i.
std::vector<uint8_t> causal_mask(int64_t n);
// Every query row shares one key-validity vector (used to hide padding).
std::vector<uint8_t> key_pad_mask(int64_t rows, const std::vector<uint8_t>& key_valid);

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& name, int64_t in, int64_t out, Rng& rng);
    Tensor forward(const Tensor& x) const;
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;

    LayerNormParams() = default;
    LayerNormParams(ParamRegistry& reg, const std::string& name, int64_t d);
    Tensor forward(const Tensor& x) const;
};

// Shared knobs threaded through every forward pass.
struct PassContext {
    double dropout = 0.0;
    Rng* rng = nullptr;
    bool training = false;
};

struct MultiHeadAttention {
    int64_t num_heads = 1;
    Linear wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamRegistry& reg, const std::string& name, int64_t d, int64_t heads,
                       Rng& rng);
    // queries [Lq, d], keys_values [Lk, d], mask [Lq x Lk].
    Tensor forward(const Tensor& queries, const Tensor& keys_values,
                   const std::vector<uint8_t>& mask, const PassContext& ctx) const;
};

struct FeedForward {
    Linear lin1, lin2;

    FeedForward() = default;
    FeedForward(ParamRegistry& reg, const std::string& name, int64_t d, Rng& rng);
    Tensor forward(const Tensor& x, const PassContext& ctx) const;
};

// Post-norm residual block: h = LN(x + SelfAtt(x)); out = LN(h + FF(h)).
struct EncoderBlock {
    MultiHeadAttention att;
    FeedForward ff;
    LayerNormParams ln1, ln2;

    EncoderBlock() = default;
    EncoderBlock(ParamRegistry& reg, const std::string& name, int64_t d, int64_t heads, Rng& rng);
    Tensor forward(const Tensor& x, const std::vector<uint8_t>& mask,
                   const PassContext& ctx) const;
};

// Same residual scheme but the attention queries one sequence against
// another; the residual stream follows the queries.
struct CrossAttentionBlock {
    MultiHeadAttention att;
    FeedForward ff;
    LayerNormParams ln1, ln2;

    CrossAttentionBlock() = default;
    CrossAttentionBlock(ParamRegistry& reg, const std::string& name, int64_t d, int64_t heads,
                        Rng& rng);
    Tensor forward(const Tensor& queries, const Tensor& keys_values,
                   const std::vector<uint8_t>& mask, const PassContext& ctx) const;
};

// Decoder block: masked self-attention, cross-attention over a memory
// sequence, feed-forward; three post-norms.
struct DecoderBlock {
    MultiHeadAttention self_att, cross_att;
    FeedForward ff;
    LayerNormParams ln1, ln2, ln3;

    DecoderBlock() = default;
    DecoderBlock(ParamRegistry& reg, const std::string& name, int64_t d, int64_t heads, Rng& rng);
    Tensor forward(const Tensor& x, const std::vector<uint8_t>& self_mask, const Tensor& memory,
                   const PassContext& ctx) const;
};

}  // namespace klvcg
