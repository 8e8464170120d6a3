#pragma once

#include "klvcg/knowledge.hpp"
#include "klvcg/nn.hpp"

namespace klvcg {

struct ModelConfig {
    int64_t d = 384;           // model width
    int64_t l = 5;             // context half-width in seconds
    int64_t n = 48;            // tokens per comment step
    int64_t m = 64;            // knowledge tokens
    int64_t g = 20;            // max generated length
    int64_t visual_dim = 2048; // incoming frame feature width
    int64_t vocab_size = 0;    // must be set before use

    int64_t visual_layers = 2, visual_heads = 6;
    int64_t step_layers = 2, step_heads = 6;
    int64_t span_layers = 2, span_heads = 6;
    int64_t knowledge_heads = 6;  // one self layer + one cross layer
    int64_t cross_layers = 2, cross_heads = 12;
    int64_t decoder_layers = 1, decoder_heads = 12;

    int64_t token_types = 3;   // visual / comment / knowledge
    int64_t period_stages = 5;
    double dropout = 0.1;

    // Ablation switches. disable_kg feeds the knowledge encoder the empty
    // sentinel sequence; disable_ac stops retrieved comments from joining the
    // context at assembly time; the embedding switches zero their tables'
    // contribution.
    bool disable_kg = false;
    bool disable_ac = false;
    bool disable_period = false;
    bool disable_token_types = false;

    void validate() const;  // ConfigError on violation
    bool operator==(const ModelConfig&) const = default;
};

// Full pretty-printed JSON document with every field.
std::string to_json(const ModelConfig& cfg);
// Defaults overlaid with the keys present in the document; unknown keys are
// a ConfigError. apply_json_overlay does the same onto an existing config.
ModelConfig model_config_from_json(const std::string& text);
void apply_json_overlay(ModelConfig& cfg, const std::string& text);
void save_model_config(const std::string& path, const ModelConfig& cfg);
ModelConfig load_model_config(const std::string& path);

// One frame feature per second for t-l..t+l; rows flagged invalid hold zeros.
struct VisualContext {
    Tensor frames;               // [2l+1, visual_dim]
    std::vector<uint8_t> valid;  // 2l+1 flags
};

// Token ids of the comments at one step: [CLS] w.. [SEP] w.. truncated or
// padded to exactly n, with a validity mask that is 0 on padding.
struct CommentStepSequence {
    int64_t second = -1;
    std::vector<int64_t> ids;
    std::vector<uint8_t> valid;
};

CommentStepSequence make_step_sequence(int64_t second, const std::vector<std::string>& comments,
                                       const Vocabulary& vocab, int64_t n);

// Everything one forward pass consumes.
struct ModelInput {
    VisualContext visual;
    std::vector<CommentStepSequence> steps;  // 2l entries ordered t-l..t-1,t+1..t+l
    KnowledgeSequence knowledge;             // length m
    int64_t period = 0;
};

// Builds a ModelInput from a context window: frame features (zeros where the
// window runs past the video), step sequences, knowledge tokens, period
// stage. Retrieved comments are appended round-robin to the context steps
// unless the config disables that channel.
ModelInput assemble_input(const ContextWindow& window, const FeatureTable& features,
                          const Vocabulary& vocab, const KnowledgeSequence& knowledge,
                          const std::vector<std::string>& retrieved, const ModelConfig& cfg);

enum class DecodeMode { kGeneration, kCloze };
DecodeMode parse_decode_mode(const std::string& tag);  // "generation" | "cloze"

struct DecoderOutput {
    Tensor hidden;  // [T, d]
    Tensor logits;  // [T, vocab_size]
};

class KlvcgModel {
public:
    KlvcgModel(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }

    // Frame features -> contextual rows, one per second. [2l+1, d]
    Tensor encode_visual(const VisualContext& v, const PassContext& ctx) const;
    // One comment step -> its contextualized leading-CLS row. [1, d]
    Tensor encode_comment_step(const CommentStepSequence& s, const PassContext& ctx) const;
    // Stack of 2l step rows -> contextual span rows. [2l, d]
    Tensor encode_comment_span(const Tensor& step_rows, const PassContext& ctx) const;
    // Knowledge tokens self-attend (pad-masked), then the step rows query
    // them; output row count follows the queries. [2l, d]
    Tensor encode_knowledge(const KnowledgeSequence& k, const Tensor& step_rows,
                            const PassContext& ctx) const;
    // Concatenate [visual; span; knowledge], add token-type and period
    // embeddings, run the shared encoder. [6l+1, d]
    Tensor cross_encode(const Tensor& visual, const Tensor& span, const Tensor& knowledge,
                        int64_t period, const PassContext& ctx) const;
    // Target tokens attend to themselves (causal in generation mode,
    // bidirectional over non-pad positions in cloze mode) and to the cross
    // encoding, then project to vocabulary logits.
    DecoderOutput decode(const Tensor& cross_encoding, const std::vector<int64_t>& target,
                         DecodeMode mode, const PassContext& ctx) const;

    // The full encoder stack in one go; decoding can then reuse the result
    // across many target sequences (beam steps, candidate scoring). [6l+1, d]
    Tensor encode_context(const ModelInput& input, const PassContext& ctx) const;

    DecoderOutput forward(const ModelInput& input, const std::vector<int64_t>& target,
                          DecodeMode mode, const PassContext& ctx) const;

private:
    ModelConfig cfg_;
    ParamRegistry reg_;

    Tensor word_emb_;  // shared by the step, knowledge, and decoder inputs
    Linear visual_proj_;
    Tensor visual_pos_, step_pos_, span_pos_, know_pos_, dec_pos_;
    Tensor type_emb_, period_emb_;
    std::vector<EncoderBlock> visual_blocks_, step_blocks_, span_blocks_, cross_blocks_;
    EncoderBlock know_self_;
    CrossAttentionBlock know_cross_;
    std::vector<DecoderBlock> decoder_blocks_;
    Linear out_head_;
};

}  // namespace klvcg
