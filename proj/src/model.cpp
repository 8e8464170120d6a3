#include "klvcg/model.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

namespace klvcg {

using nlohmann::json;

void ModelConfig::validate() const {
    if (l < 1) throw ConfigError("model config: l must be >= 1");
    if (g < 2) throw ConfigError("model config: g must be >= 2 (BOS and EOS must fit)");
    if (n < 2) throw ConfigError("model config: n must be >= 2 (CLS plus one token)");
    if (m < 1) throw ConfigError("model config: m must be >= 1");
    if (d < 1) throw ConfigError("model config: d must be >= 1");
    if (visual_dim < 1) throw ConfigError("model config: visual_dim must be >= 1");
    if (vocab_size < Vocabulary::kNumSpecials + 1)
        throw ConfigError("model config: vocab_size must exceed the reserved specials");
    if (token_types < 3) throw ConfigError("model config: token_types must be >= 3");
    if (period_stages < 5) throw ConfigError("model config: period_stages must be >= 5");
    if (dropout < 0.0 || dropout >= 1.0)
        throw ConfigError("model config: dropout must lie in [0, 1)");

    auto head_check = [&](const char* which, int64_t heads) {
        if (heads < 1) throw ConfigError(std::string("model config: ") + which +
                                         " head count must be >= 1");
        if (d % heads != 0)
            throw ConfigError(std::string("model config: d=") + std::to_string(d) +
                              " is not divisible by " + which + " heads=" +
                              std::to_string(heads));
    };
    head_check("visual", visual_heads);
    head_check("step", step_heads);
    head_check("span", span_heads);
    head_check("knowledge", knowledge_heads);
    head_check("cross", cross_heads);
    head_check("decoder", decoder_heads);

    auto layer_check = [](const char* which, int64_t layers) {
        if (layers < 1)
            throw ConfigError(std::string("model config: ") + which + " layers must be >= 1");
    };
    layer_check("visual", visual_layers);
    layer_check("step", step_layers);
    layer_check("span", span_layers);
    layer_check("cross", cross_layers);
    layer_check("decoder", decoder_layers);
}

namespace {

json config_to_json(const ModelConfig& c) {
    return json{{"d", c.d},
                {"l", c.l},
                {"n", c.n},
                {"m", c.m},
                {"g", c.g},
                {"visual_dim", c.visual_dim},
                {"vocab_size", c.vocab_size},
                {"visual_layers", c.visual_layers},
                {"visual_heads", c.visual_heads},
                {"step_layers", c.step_layers},
                {"step_heads", c.step_heads},
                {"span_layers", c.span_layers},
                {"span_heads", c.span_heads},
                {"knowledge_heads", c.knowledge_heads},
                {"cross_layers", c.cross_layers},
                {"cross_heads", c.cross_heads},
                {"decoder_layers", c.decoder_layers},
                {"decoder_heads", c.decoder_heads},
                {"token_types", c.token_types},
                {"period_stages", c.period_stages},
                {"dropout", c.dropout},
                {"disable_kg", c.disable_kg},
                {"disable_ac", c.disable_ac},
                {"disable_period", c.disable_period},
                {"disable_token_types", c.disable_token_types}};
}

void overlay(ModelConfig& c, const json& j) {
    if (!j.is_object()) throw ConfigError("model config document must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "d") c.d = value.get<int64_t>();
            else if (key == "l") c.l = value.get<int64_t>();
            else if (key == "n") c.n = value.get<int64_t>();
            else if (key == "m") c.m = value.get<int64_t>();
            else if (key == "g") c.g = value.get<int64_t>();
            else if (key == "visual_dim") c.visual_dim = value.get<int64_t>();
            else if (key == "vocab_size") c.vocab_size = value.get<int64_t>();
            else if (key == "visual_layers") c.visual_layers = value.get<int64_t>();
            else if (key == "visual_heads") c.visual_heads = value.get<int64_t>();
            else if (key == "step_layers") c.step_layers = value.get<int64_t>();
            else if (key == "step_heads") c.step_heads = value.get<int64_t>();
            else if (key == "span_layers") c.span_layers = value.get<int64_t>();
            else if (key == "span_heads") c.span_heads = value.get<int64_t>();
            else if (key == "knowledge_heads") c.knowledge_heads = value.get<int64_t>();
            else if (key == "cross_layers") c.cross_layers = value.get<int64_t>();
            else if (key == "cross_heads") c.cross_heads = value.get<int64_t>();
            else if (key == "decoder_layers") c.decoder_layers = value.get<int64_t>();
            else if (key == "decoder_heads") c.decoder_heads = value.get<int64_t>();
            else if (key == "token_types") c.token_types = value.get<int64_t>();
            else if (key == "period_stages") c.period_stages = value.get<int64_t>();
            else if (key == "dropout") c.dropout = value.get<double>();
            else if (key == "disable_kg") c.disable_kg = value.get<bool>();
            else if (key == "disable_ac") c.disable_ac = value.get<bool>();
            else if (key == "disable_period") c.disable_period = value.get<bool>();
            else if (key == "disable_token_types") c.disable_token_types = value.get<bool>();
            else throw ConfigError("model config: unknown key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("model config: bad value for '" + key + "': " + e.what());
        }
    }
}

}  // namespace

std::string to_json(const ModelConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

ModelConfig model_config_from_json(const std::string& text) {
    ModelConfig cfg;
    apply_json_overlay(cfg, text);
    return cfg;
}

void apply_json_overlay(ModelConfig& cfg, const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: invalid JSON: ") + e.what());
    }
    overlay(cfg, j);
}

void save_model_config(const std::string& path, const ModelConfig& cfg) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << to_json(cfg);
    if (!os) throw IoError("write failed: " + path);
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open model config: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return model_config_from_json(ss.str());
}

CommentStepSequence make_step_sequence(int64_t second, const std::vector<std::string>& comments,
                                       const Vocabulary& vocab, int64_t n) {
    if (n < 2) throw ConfigError("step sequence length n must be >= 2");
    CommentStepSequence seq;
    seq.second = second;
    seq.ids.push_back(Vocabulary::kCls);
    for (size_t i = 0; i < comments.size(); ++i) {
        if (static_cast<int64_t>(seq.ids.size()) >= n) break;
        if (i > 0) seq.ids.push_back(Vocabulary::kSep);
        for (int64_t id : vocab.encode_text(comments[i])) {
            if (static_cast<int64_t>(seq.ids.size()) >= n) break;
            seq.ids.push_back(id);
        }
    }
    if (static_cast<int64_t>(seq.ids.size()) > n) seq.ids.resize(n);
    seq.valid.assign(seq.ids.size(), 1);
    while (static_cast<int64_t>(seq.ids.size()) < n) {
        seq.ids.push_back(Vocabulary::kPad);
        seq.valid.push_back(0);
    }
    return seq;
}

ModelInput assemble_input(const ContextWindow& window, const FeatureTable& features,
                          const Vocabulary& vocab, const KnowledgeSequence& knowledge,
                          const std::vector<std::string>& retrieved, const ModelConfig& cfg) {
    if (window.l != cfg.l)
        throw ContractError("assemble_input: window half-width " + std::to_string(window.l) +
                            " does not match config l=" + std::to_string(cfg.l));
    if (features.dim != cfg.visual_dim)
        throw ConfigError("assemble_input: feature dim " + std::to_string(features.dim) +
                          " does not match config visual_dim=" + std::to_string(cfg.visual_dim));
    if (static_cast<int64_t>(knowledge.ids.size()) != cfg.m)
        throw ContractError("assemble_input: knowledge sequence length " +
                            std::to_string(knowledge.ids.size()) + " != m=" +
                            std::to_string(cfg.m));

    const ContextWindow* source = &window;
    ContextWindow augmented;
    if (!cfg.disable_ac && !retrieved.empty()) {
        augmented = augment_context(window, retrieved);
        source = &augmented;
    }

    ModelInput input;
    input.period = window.period;

    int64_t rows = 2 * cfg.l + 1;
    std::vector<double> frame_data(rows * cfg.visual_dim, 0.0);
    input.visual.valid.assign(rows, 0);
    for (int64_t i = 0; i < rows; ++i) {
        if (!window.frame_valid[i]) continue;
        int64_t s = window.frame_seconds[i];
        if (s < 0 || s >= features.seconds)
            throw ContractError("assemble_input: frame second " + std::to_string(s) +
                                " outside feature table of " + std::to_string(features.seconds));
        const float* row = features.row(s);
        for (int64_t j = 0; j < cfg.visual_dim; ++j)
            frame_data[i * cfg.visual_dim + j] = static_cast<double>(row[j]);
        input.visual.valid[i] = 1;
    }
    input.visual.frames = Tensor::from({rows, cfg.visual_dim}, std::move(frame_data));

    input.steps.reserve(source->step_seconds.size());
    for (size_t i = 0; i < source->step_seconds.size(); ++i)
        input.steps.push_back(make_step_sequence(source->step_seconds[i],
                                                 source->step_comments[i], vocab, cfg.n));
    input.knowledge = knowledge;
    return input;
}

DecodeMode parse_decode_mode(const std::string& tag) {
    if (tag == "generation") return DecodeMode::kGeneration;
    if (tag == "cloze") return DecodeMode::kCloze;
    throw ContractError("unknown decode mode '" + tag + "' (want generation|cloze)");
}

KlvcgModel::KlvcgModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    int64_t d = cfg_.d;

    word_emb_ = reg_.add("word_emb", Tensor::randn({cfg_.vocab_size, d}, rng, 0.0, 0.02, true));

    visual_proj_ = Linear(reg_, "visual.proj", cfg_.visual_dim, d, rng);
    visual_pos_ = reg_.add("visual.pos", Tensor::randn({2 * cfg_.l + 1, d}, rng, 0.0, 0.02, true));
    for (int64_t i = 0; i < cfg_.visual_layers; ++i)
        visual_blocks_.emplace_back(reg_, "visual.block" + std::to_string(i), d,
                                    cfg_.visual_heads, rng);

    step_pos_ = reg_.add("step.pos", Tensor::randn({cfg_.n, d}, rng, 0.0, 0.02, true));
    for (int64_t i = 0; i < cfg_.step_layers; ++i)
        step_blocks_.emplace_back(reg_, "step.block" + std::to_string(i), d, cfg_.step_heads,
                                  rng);

    span_pos_ = reg_.add("span.pos", Tensor::randn({2 * cfg_.l, d}, rng, 0.0, 0.02, true));
    for (int64_t i = 0; i < cfg_.span_layers; ++i)
        span_blocks_.emplace_back(reg_, "span.block" + std::to_string(i), d, cfg_.span_heads,
                                  rng);

    know_pos_ = reg_.add("knowledge.pos", Tensor::randn({cfg_.m, d}, rng, 0.0, 0.02, true));
    know_self_ = EncoderBlock(reg_, "knowledge.self", d, cfg_.knowledge_heads, rng);
    know_cross_ = CrossAttentionBlock(reg_, "knowledge.cross", d, cfg_.knowledge_heads, rng);

    type_emb_ = reg_.add("type_emb", Tensor::randn({cfg_.token_types, d}, rng, 0.0, 0.02, true));
    period_emb_ =
        reg_.add("period_emb", Tensor::randn({cfg_.period_stages, d}, rng, 0.0, 0.02, true));
    for (int64_t i = 0; i < cfg_.cross_layers; ++i)
        cross_blocks_.emplace_back(reg_, "cross.block" + std::to_string(i), d, cfg_.cross_heads,
                                   rng);

    dec_pos_ = reg_.add("decoder.pos", Tensor::randn({cfg_.g, d}, rng, 0.0, 0.02, true));
    for (int64_t i = 0; i < cfg_.decoder_layers; ++i)
        decoder_blocks_.emplace_back(reg_, "decoder.block" + std::to_string(i), d,
                                     cfg_.decoder_heads, rng);
    out_head_ = Linear(reg_, "out_head", d, cfg_.vocab_size, rng);
}

Tensor KlvcgModel::encode_visual(const VisualContext& v, const PassContext& ctx) const {
    int64_t rows = 2 * cfg_.l + 1;
    if (v.frames.rank() != 2 || v.frames.dim(0) != rows || v.frames.dim(1) != cfg_.visual_dim)
        throw ConfigError("encode_visual: want frames [" + std::to_string(rows) + ", " +
                          std::to_string(cfg_.visual_dim) + "], got " + shape_str(v.frames.shape()));
    Tensor x = add(visual_proj_.forward(v.frames), visual_pos_);
    std::vector<uint8_t> mask = dense_mask(rows, rows);
    for (const EncoderBlock& block : visual_blocks_) x = block.forward(x, mask, ctx);
    return x;
}

Tensor KlvcgModel::encode_comment_step(const CommentStepSequence& s,
                                       const PassContext& ctx) const {
    if (static_cast<int64_t>(s.ids.size()) != cfg_.n)
        throw ContractError("encode_comment_step: sequence length " +
                            std::to_string(s.ids.size()) + " != n=" + std::to_string(cfg_.n));
    if (s.ids[0] != Vocabulary::kCls)
        throw ContractError("encode_comment_step: sequence must start with CLS");
    Tensor x = add(embedding_lookup(word_emb_, s.ids), step_pos_);
    std::vector<uint8_t> mask = key_pad_mask(cfg_.n, s.valid);
    for (const EncoderBlock& block : step_blocks_) x = block.forward(x, mask, ctx);
    return slice_rows(x, 0, 1);
}

Tensor KlvcgModel::encode_comment_span(const Tensor& step_rows, const PassContext& ctx) const {
    int64_t rows = 2 * cfg_.l;
    if (step_rows.rank() != 2 || step_rows.dim(0) != rows || step_rows.dim(1) != cfg_.d)
        throw ContractError("encode_comment_span: want [" + std::to_string(rows) + ", " +
                            std::to_string(cfg_.d) + "], got " + shape_str(step_rows.shape()));
    Tensor x = add(step_rows, span_pos_);
    std::vector<uint8_t> mask = dense_mask(rows, rows);
    for (const EncoderBlock& block : span_blocks_) x = block.forward(x, mask, ctx);
    return x;
}

Tensor KlvcgModel::encode_knowledge(const KnowledgeSequence& k, const Tensor& step_rows,
                                    const PassContext& ctx) const {
    if (static_cast<int64_t>(k.ids.size()) != cfg_.m)
        throw ContractError("encode_knowledge: sequence length " + std::to_string(k.ids.size()) +
                            " != m=" + std::to_string(cfg_.m));
    int64_t rows = 2 * cfg_.l;
    if (step_rows.rank() != 2 || step_rows.dim(0) != rows || step_rows.dim(1) != cfg_.d)
        throw ContractError("encode_knowledge: want queries [" + std::to_string(rows) + ", " +
                            std::to_string(cfg_.d) + "], got " + shape_str(step_rows.shape()));
    Tensor e = add(embedding_lookup(word_emb_, k.ids), know_pos_);
    Tensor contextual = know_self_.forward(e, key_pad_mask(cfg_.m, k.valid), ctx);
    return know_cross_.forward(step_rows, contextual, key_pad_mask(rows, k.valid), ctx);
}

Tensor KlvcgModel::cross_encode(const Tensor& visual, const Tensor& span,
                                const Tensor& knowledge, int64_t period,
                                const PassContext& ctx) const {
    int64_t vis_rows = 2 * cfg_.l + 1, span_rows = 2 * cfg_.l;
    auto expect = [&](const Tensor& t, int64_t rows, const char* which) {
        if (t.rank() != 2 || t.dim(0) != rows || t.dim(1) != cfg_.d)
            throw ContractError(std::string("cross_encode: ") + which + " wants [" +
                                std::to_string(rows) + ", " + std::to_string(cfg_.d) +
                                "], got " + shape_str(t.shape()));
    };
    expect(visual, vis_rows, "visual");
    expect(span, span_rows, "span");
    expect(knowledge, span_rows, "knowledge");
    if (period < 0 || period >= cfg_.period_stages)
        throw ContractError("cross_encode: period stage " + std::to_string(period) +
                            " outside [0, " + std::to_string(cfg_.period_stages) + ")");

    Tensor x = concat_rows({visual, span, knowledge});
    int64_t rows = 6 * cfg_.l + 1;
    if (!cfg_.disable_token_types) {
        std::vector<int64_t> types(rows, 0);
        for (int64_t i = 0; i < span_rows; ++i) types[vis_rows + i] = 1;
        for (int64_t i = 0; i < span_rows; ++i) types[vis_rows + span_rows + i] = 2;
        x = add(x, embedding_lookup(type_emb_, types));
    }
    if (!cfg_.disable_period) {
        std::vector<int64_t> stages(rows, period);
        x = add(x, embedding_lookup(period_emb_, stages));
    }
    std::vector<uint8_t> mask = dense_mask(rows, rows);
    for (const EncoderBlock& block : cross_blocks_) x = block.forward(x, mask, ctx);
    return x;
}

DecoderOutput KlvcgModel::decode(const Tensor& cross_encoding,
                                 const std::vector<int64_t>& target, DecodeMode mode,
                                 const PassContext& ctx) const {
    int64_t T = static_cast<int64_t>(target.size());
    if (T < 1) throw ContractError("decode: empty target");
    if (T > cfg_.g)
        throw ContractError("decode: target length " + std::to_string(T) + " exceeds g=" +
                            std::to_string(cfg_.g));
    if (cross_encoding.rank() != 2 || cross_encoding.dim(0) != 6 * cfg_.l + 1 ||
        cross_encoding.dim(1) != cfg_.d)
        throw ContractError("decode: cross encoding has shape " + shape_str(cross_encoding.shape()));

    Tensor x = add(embedding_lookup(word_emb_, target), slice_rows(dec_pos_, 0, T));
    std::vector<uint8_t> self_mask;
    switch (mode) {
        case DecodeMode::kGeneration:
            self_mask = causal_mask(T);
            break;
        case DecodeMode::kCloze: {
            std::vector<uint8_t> valid(T);
            for (int64_t i = 0; i < T; ++i) valid[i] = target[i] != Vocabulary::kPad ? 1 : 0;
            self_mask = key_pad_mask(T, valid);
            break;
        }
        default:
            throw ContractError("decode: unknown mode tag");
    }
    for (const DecoderBlock& block : decoder_blocks_)
        x = block.forward(x, self_mask, cross_encoding, ctx);
    return {x, out_head_.forward(x)};
}

Tensor KlvcgModel::encode_context(const ModelInput& input, const PassContext& ctx) const {
    if (static_cast<int64_t>(input.steps.size()) != 2 * cfg_.l)
        throw ContractError("encode_context: want " + std::to_string(2 * cfg_.l) +
                            " comment steps, got " + std::to_string(input.steps.size()));
    std::vector<Tensor> rows;
    rows.reserve(input.steps.size());
    for (const CommentStepSequence& step : input.steps)
        rows.push_back(encode_comment_step(step, ctx));
    Tensor step_rows = concat_rows(rows);

    Tensor span = encode_comment_span(step_rows, ctx);
    KnowledgeSequence k = cfg_.disable_kg ? empty_knowledge_sequence(cfg_.m) : input.knowledge;
    Tensor knowledge = encode_knowledge(k, step_rows, ctx);
    Tensor visual = encode_visual(input.visual, ctx);
    return cross_encode(visual, span, knowledge, input.period, ctx);
}

DecoderOutput KlvcgModel::forward(const ModelInput& input, const std::vector<int64_t>& target,
                                  DecodeMode mode, const PassContext& ctx) const {
    return decode(encode_context(input, ctx), target, mode, ctx);
}

}  // namespace klvcg
