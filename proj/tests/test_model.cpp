#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "klvcg/model.hpp"
#include "klvcg/synth.hpp"

using namespace klvcg;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.d = 16;
    c.l = 1;
    c.n = 6;
    c.m = 8;
    c.g = 6;
    c.visual_dim = 5;
    c.vocab_size = 23;
    c.visual_layers = 1;
    c.visual_heads = 2;
    c.step_layers = 1;
    c.step_heads = 2;
    c.span_layers = 1;
    c.span_heads = 2;
    c.knowledge_heads = 2;
    c.cross_layers = 1;
    c.cross_heads = 4;
    c.decoder_layers = 1;
    c.decoder_heads = 4;
    c.dropout = 0.0;
    return c;
}

Vocabulary tiny_vocab() {
    // 16 distinct words -> vocabulary size 7 + 16 = 23
    return Vocabulary::build(
        {"alpha beta gamma delta epsi zeta theta iota kappa nu xi rho sigma tau phi omega"}, 1,
        0);
}

ModelInput tiny_input(const ModelConfig& cfg, const Vocabulary& vocab, uint64_t seed) {
    Rng rng(seed);
    ModelInput in;
    in.visual.frames = Tensor::randn({2 * cfg.l + 1, cfg.visual_dim}, rng);
    in.visual.valid.assign(2 * cfg.l + 1, 1);
    for (int64_t i = 0; i < 2 * cfg.l; ++i) {
        std::vector<std::string> comments = i % 2 == 0
                                                ? std::vector<std::string>{"alpha beta", "gamma"}
                                                : std::vector<std::string>{"epsi zeta"};
        in.steps.push_back(make_step_sequence(i, comments, vocab, cfg.n));
    }
    in.knowledge = serialize_facts({{"alpha", "likes", "beta"}}, vocab, cfg.m);
    in.period = 2;
    return in;
}

bool same_data(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.data() == b.data();
}

}  // namespace

TEST_CASE("config validation enforces the structural invariants") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(c.validate());

    ModelConfig bad = c;
    bad.d = 10;  // not divisible by cross_heads=4
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.g = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.l = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.vocab_size = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.decoder_layers = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config JSON document round-trips and overlays") {
    ModelConfig c = tiny_config();
    c.disable_period = true;
    ModelConfig back = model_config_from_json(to_json(c));
    CHECK(back == c);

    // partial documents touch only the named keys
    ModelConfig base;
    apply_json_overlay(base, R"({"d": 64, "dropout": 0.05})");
    CHECK(base.d == 64);
    CHECK(base.dropout == 0.05);
    CHECK(base.l == 5);
    CHECK(base.g == 20);

    CHECK_THROWS_AS(apply_json_overlay(base, R"({"dee": 64})"), ConfigError);
    CHECK_THROWS_AS(apply_json_overlay(base, R"({"d": "wide"})"), ConfigError);
    CHECK_THROWS_AS(apply_json_overlay(base, "not json"), ConfigError);
    CHECK_THROWS_AS(apply_json_overlay(base, "[1,2]"), ConfigError);

    fs::path p = fs::temp_directory_path() / "klvcg_model_cfg.json";
    save_model_config(p.string(), c);
    CHECK(load_model_config(p.string()) == c);
    fs::remove(p);
}

TEST_CASE("step sequences: CLS lead, SEP joins, truncate, pad") {
    Vocabulary v = tiny_vocab();
    auto s = make_step_sequence(4, {"alpha beta", "gamma"}, v, 8);
    CHECK(s.second == 4);
    CHECK(s.ids == std::vector<int64_t>{Vocabulary::kCls, v.id("alpha"), v.id("beta"),
                                        Vocabulary::kSep, v.id("gamma"), Vocabulary::kPad,
                                        Vocabulary::kPad, Vocabulary::kPad});
    CHECK(s.valid == std::vector<uint8_t>{1, 1, 1, 1, 1, 0, 0, 0});

    auto empty = make_step_sequence(0, {}, v, 4);
    CHECK(empty.ids == std::vector<int64_t>{Vocabulary::kCls, Vocabulary::kPad, Vocabulary::kPad,
                                            Vocabulary::kPad});

    auto cut = make_step_sequence(0, {"alpha beta gamma delta epsi"}, v, 4);
    CHECK(cut.ids == std::vector<int64_t>{Vocabulary::kCls, v.id("alpha"), v.id("beta"),
                                          v.id("gamma")});
    CHECK(cut.valid == std::vector<uint8_t>{1, 1, 1, 1});

    CHECK_THROWS_AS(make_step_sequence(0, {}, v, 1), ConfigError);
}

TEST_CASE("shape laws across context widths") {
    Vocabulary vocab = tiny_vocab();
    for (int64_t l : {1, 2, 5}) {
        ModelConfig c = tiny_config();
        c.l = l;
        KlvcgModel model(c, 7);
        ModelInput in = tiny_input(c, vocab, 11 + l);
        PassContext ctx;

        Tensor visual = model.encode_visual(in.visual, ctx);
        CHECK(visual.dim(0) == 2 * l + 1);
        CHECK(visual.dim(1) == c.d);

        std::vector<Tensor> rows;
        for (const auto& step : in.steps) {
            Tensor r = model.encode_comment_step(step, ctx);
            CHECK(r.dim(0) == 1);
            CHECK(r.dim(1) == c.d);
            rows.push_back(r);
        }
        Tensor step_rows = concat_rows(rows);
        Tensor span = model.encode_comment_span(step_rows, ctx);
        CHECK(span.dim(0) == 2 * l);

        Tensor know = model.encode_knowledge(in.knowledge, step_rows, ctx);
        CHECK(know.dim(0) == 2 * l);  // follows the queries, not m

        Tensor w = model.cross_encode(visual, span, know, in.period, ctx);
        CHECK(w.dim(0) == 6 * l + 1);
        CHECK(w.dim(1) == c.d);

        std::vector<int64_t> target = {Vocabulary::kBos, 8, 9};
        DecoderOutput out = model.decode(w, target, DecodeMode::kGeneration, ctx);
        CHECK(out.hidden.dim(0) == 3);
        CHECK(out.hidden.dim(1) == c.d);
        CHECK(out.logits.dim(0) == 3);
        CHECK(out.logits.dim(1) == c.vocab_size);
    }
}

TEST_CASE("degenerate inputs stay finite and deterministic") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;

    VisualContext zeros;
    zeros.frames = Tensor::zeros({3, c.visual_dim});
    zeros.valid.assign(3, 0);
    Tensor v = model.encode_visual(zeros, ctx);
    for (double x : v.data()) CHECK(std::isfinite(x));

    auto bare = make_step_sequence(0, {}, vocab, c.n);  // CLS + pads only
    Tensor m1 = model.encode_comment_step(bare, ctx);
    Tensor m2 = model.encode_comment_step(bare, ctx);
    CHECK(same_data(m1, m2));
    for (double x : m1.data()) CHECK(std::isfinite(x));

    // all-pad knowledge except the sentinel
    ModelInput in = tiny_input(c, vocab, 5);
    in.knowledge = empty_knowledge_sequence(c.m);
    DecoderOutput out = model.forward(in, {Vocabulary::kBos, 9}, DecodeMode::kGeneration, ctx);
    for (double x : out.logits.data()) CHECK(std::isfinite(x));
}

TEST_CASE("position information is live in every encoder") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);

    // Without position information these encoders are permutation-equivariant:
    // swapping two input rows would merely swap the matching output rows. So
    // after a swap, the row that moved must NOT reproduce its old values.
    auto moved_row_changed = [&](const Tensor& before, const Tensor& after) {
        for (int64_t j = 0; j < c.d; ++j)
            if (std::abs(before.data()[j] - after.data()[c.d + j]) > 1e-9) return true;
        return false;
    };

    VisualContext flipped = in.visual;
    std::vector<double> d = flipped.frames.data();
    for (int64_t j = 0; j < c.visual_dim; ++j) std::swap(d[j], d[c.visual_dim + j]);
    flipped.frames = Tensor::from(flipped.frames.shape(), std::move(d));
    CHECK(moved_row_changed(model.encode_visual(in.visual, ctx),
                            model.encode_visual(flipped, ctx)));

    // swap the two step rows ahead of the span encoder
    std::vector<Tensor> rows;
    for (const auto& step : in.steps) rows.push_back(model.encode_comment_step(step, ctx));
    CHECK_FALSE(same_data(rows[0], rows[1]));
    Tensor fwd = concat_rows({rows[0], rows[1]});
    Tensor rev = concat_rows({rows[1], rows[0]});
    CHECK(moved_row_changed(model.encode_comment_span(fwd, ctx),
                            model.encode_comment_span(rev, ctx)));
}

TEST_CASE("tokens beyond the step budget cannot influence the encoding") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;

    // n=6 holds CLS + 5 tokens; everything after the cut must be irrelevant
    auto a = make_step_sequence(0, {"alpha beta gamma delta epsi zeta theta"}, vocab, c.n);
    auto b = make_step_sequence(0, {"alpha beta gamma delta epsi", "omega tau"}, vocab, c.n);
    CHECK(a.ids == b.ids);
    CHECK(same_data(model.encode_comment_step(a, ctx), model.encode_comment_step(b, ctx)));
}

TEST_CASE("padding positions in the knowledge sequence are inert") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);

    std::vector<Tensor> rows;
    for (const auto& step : in.steps) rows.push_back(model.encode_comment_step(step, ctx));
    Tensor step_rows = concat_rows(rows);

    KnowledgeSequence k = in.knowledge;
    REQUIRE(k.valid.back() == 0);
    KnowledgeSequence junk = k;
    for (size_t i = 0; i < junk.ids.size(); ++i)
        if (!junk.valid[i]) junk.ids[i] = 9 + int64_t(i) % 5;  // scribble over padding
    CHECK(junk.ids != k.ids);
    CHECK(same_data(model.encode_knowledge(k, step_rows, ctx),
                    model.encode_knowledge(junk, step_rows, ctx)));
}

TEST_CASE("period and token-type pathways are live and switchable") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);

    std::vector<Tensor> rows;
    for (const auto& step : in.steps) rows.push_back(model.encode_comment_step(step, ctx));
    Tensor step_rows = concat_rows(rows);
    Tensor span = model.encode_comment_span(step_rows, ctx);
    Tensor know = model.encode_knowledge(in.knowledge, step_rows, ctx);
    Tensor visual = model.encode_visual(in.visual, ctx);

    Tensor w0 = model.cross_encode(visual, span, know, 0, ctx);
    Tensor w1 = model.cross_encode(visual, span, know, 1, ctx);
    CHECK_FALSE(same_data(w0, w1));
    CHECK_THROWS_AS(model.cross_encode(visual, span, know, 5, ctx), ContractError);
    CHECK_THROWS_AS(model.cross_encode(visual, span, know, -1, ctx), ContractError);

    // same seed, period pathway severed: stages stop mattering
    ModelConfig cp = c;
    cp.disable_period = true;
    KlvcgModel no_period(cp, 3);
    std::vector<Tensor> rows2;
    for (const auto& step : in.steps) rows2.push_back(no_period.encode_comment_step(step, ctx));
    Tensor sr2 = concat_rows(rows2);
    Tensor span2 = no_period.encode_comment_span(sr2, ctx);
    Tensor know2 = no_period.encode_knowledge(in.knowledge, sr2, ctx);
    Tensor vis2 = no_period.encode_visual(in.visual, ctx);
    CHECK(same_data(no_period.cross_encode(vis2, span2, know2, 0, ctx),
                    no_period.cross_encode(vis2, span2, know2, 4, ctx)));
    // and the severed pathway changes the output vs the full model
    CHECK_FALSE(same_data(no_period.cross_encode(vis2, span2, know2, 0, ctx), w0));

    ModelConfig ct = c;
    ct.disable_token_types = true;
    KlvcgModel no_types(ct, 3);
    Tensor wt = no_types.cross_encode(visual, span, know, 0, ctx);
    CHECK_FALSE(same_data(wt, w0));
}

TEST_CASE("generation mode is causal; cloze mode is bidirectional") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);

    std::vector<int64_t> t1 = {Vocabulary::kBos, 8, 9, 10};
    std::vector<int64_t> t2 = {Vocabulary::kBos, 8, 12, 10};  // differs at position 2

    DecoderOutput g1 = model.forward(in, t1, DecodeMode::kGeneration, ctx);
    DecoderOutput g2 = model.forward(in, t2, DecodeMode::kGeneration, ctx);
    int64_t V = c.vocab_size;
    for (int64_t pos : {0, 1}) {
        for (int64_t v = 0; v < V; ++v)
            CHECK(g1.logits.data()[pos * V + v] == g2.logits.data()[pos * V + v]);
    }
    bool later_changed = false;
    for (int64_t v = 0; v < V; ++v)
        if (g1.logits.data()[2 * V + v] != g2.logits.data()[2 * V + v]) later_changed = true;
    CHECK(later_changed);

    DecoderOutput c1 = model.forward(in, t1, DecodeMode::kCloze, ctx);
    DecoderOutput c2 = model.forward(in, t2, DecodeMode::kCloze, ctx);
    bool first_changed = false;
    for (int64_t v = 0; v < V; ++v)
        if (c1.logits.data()[v] != c2.logits.data()[v]) first_changed = true;
    CHECK(first_changed);
}

TEST_CASE("cloze padding is invisible to the words before it") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);

    std::vector<int64_t> padded = {8, 9, Vocabulary::kPad, Vocabulary::kPad};
    std::vector<int64_t> bare = {8, 9};
    DecoderOutput with_pads = model.forward(in, padded, DecodeMode::kCloze, ctx);
    DecoderOutput without = model.forward(in, bare, DecodeMode::kCloze, ctx);
    int64_t V = c.vocab_size;
    // different sequence lengths route through different GEMM kernels, so
    // equality holds to rounding, not bitwise
    for (int64_t pos = 0; pos < 2; ++pos)
        for (int64_t v = 0; v < V; ++v)
            CHECK(with_pads.logits.data()[pos * V + v] ==
                  doctest::Approx(without.logits.data()[pos * V + v]).epsilon(1e-12));
}

TEST_CASE("disabling the knowledge channel equals feeding the empty sentinel") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    ModelConfig cd = c;
    cd.disable_kg = true;
    KlvcgModel full(c, 3);
    KlvcgModel ablated(cd, 3);  // same seed -> identical parameters
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);

    ModelInput sentinel = in;
    sentinel.knowledge = empty_knowledge_sequence(c.m);

    std::vector<int64_t> target = {Vocabulary::kBos, 8, 9};
    DecoderOutput a = ablated.forward(in, target, DecodeMode::kGeneration, ctx);
    DecoderOutput b = full.forward(sentinel, target, DecodeMode::kGeneration, ctx);
    CHECK(same_data(a.logits, b.logits));

    // and the channel is live when enabled
    DecoderOutput c_full = full.forward(in, target, DecodeMode::kGeneration, ctx);
    CHECK_FALSE(same_data(c_full.logits, b.logits));
}

TEST_CASE("evaluation passes are bit-deterministic; dropout only acts in training") {
    ModelConfig c = tiny_config();
    c.dropout = 0.2;
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    ModelInput in = tiny_input(c, vocab, 5);
    std::vector<int64_t> target = {Vocabulary::kBos, 8, 9};

    PassContext eval;  // dropout 0, training false
    DecoderOutput e1 = model.forward(in, target, DecodeMode::kGeneration, eval);
    DecoderOutput e2 = model.forward(in, target, DecodeMode::kGeneration, eval);
    CHECK(same_data(e1.logits, e2.logits));

    Rng r1(99), r2(99), r3(100);
    PassContext tr1{c.dropout, &r1, true};
    PassContext tr2{c.dropout, &r2, true};
    PassContext tr3{c.dropout, &r3, true};
    DecoderOutput d1 = model.forward(in, target, DecodeMode::kGeneration, tr1);
    DecoderOutput d2 = model.forward(in, target, DecodeMode::kGeneration, tr2);
    DecoderOutput d3 = model.forward(in, target, DecodeMode::kGeneration, tr3);
    CHECK(same_data(d1.logits, d2.logits));        // same dropout stream
    CHECK_FALSE(same_data(d1.logits, d3.logits));  // different stream
    CHECK_FALSE(same_data(d1.logits, e1.logits));  // dropout active at all

    KlvcgModel twin(c, 3);
    DecoderOutput t1 = twin.forward(in, target, DecodeMode::kGeneration, eval);
    CHECK(same_data(t1.logits, e1.logits));  // same seed -> same parameters
}

TEST_CASE("end-to-end gradients match finite differences on sampled parameters") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);
    std::vector<int64_t> target = {Vocabulary::kBos, 8, 9, 10, 11, Vocabulary::kEos};
    std::vector<int64_t> labels = {8, 9, 10, 11, Vocabulary::kEos, Vocabulary::kPad};

    auto loss_fn = [&] {
        DecoderOutput out = model.forward(in, target, DecodeMode::kGeneration, ctx);
        return cross_entropy_logits(out.logits, labels, Vocabulary::kPad);
    };
    std::vector<Tensor> params;
    for (const Parameter& p : model.params().params()) params.push_back(p.tensor);
    Rng sample_rng(17);
    auto rep = finite_diff_check(loss_fn, params, 1e-3, 1e-3, 6, &sample_rng);
    CHECK_MESSAGE(rep.passed, rep.worst_label, " rel=", rep.max_rel_error);
    CHECK(rep.checked >= int64_t(params.size()));  // every tensor sampled at least once

    auto cloze_fn = [&] {
        std::vector<int64_t> masked = {8, Vocabulary::kMask, 10, Vocabulary::kPad};
        std::vector<int64_t> cloze_labels = {-1, 9, -1, -1};
        DecoderOutput out = model.forward(in, masked, DecodeMode::kCloze, ctx);
        return cross_entropy_logits(out.logits, cloze_labels, -1);
    };
    auto rep2 = finite_diff_check(cloze_fn, params, 3e-4, 1e-3, 3, &sample_rng);
    CHECK_MESSAGE(rep2.passed, rep2.worst_label, " rel=", rep2.max_rel_error);
}

TEST_CASE("decode rejects malformed targets and modes") {
    ModelConfig c = tiny_config();
    Vocabulary vocab = tiny_vocab();
    KlvcgModel model(c, 3);
    PassContext ctx;
    ModelInput in = tiny_input(c, vocab, 5);

    CHECK_THROWS_AS(model.forward(in, {}, DecodeMode::kGeneration, ctx), ContractError);
    std::vector<int64_t> too_long(c.g + 1, 8);
    CHECK_THROWS_AS(model.forward(in, too_long, DecodeMode::kGeneration, ctx), ContractError);

    ModelInput bad_steps = in;
    bad_steps.steps.pop_back();
    CHECK_THROWS_AS(model.forward(bad_steps, {8}, DecodeMode::kGeneration, ctx), ContractError);

    ModelInput bad_frames = in;
    bad_frames.visual.frames = Tensor::zeros({3, c.visual_dim + 1});
    CHECK_THROWS_AS(model.forward(bad_frames, {8}, DecodeMode::kGeneration, ctx), ConfigError);

    CHECK(parse_decode_mode("generation") == DecodeMode::kGeneration);
    CHECK(parse_decode_mode("cloze") == DecodeMode::kCloze);
    CHECK_THROWS_AS(parse_decode_mode("free"), ContractError);
}

TEST_CASE("assemble_input wires windows, features, knowledge, and retrieval") {
    ModelConfig c = tiny_config();
    c.visual_dim = 4;
    Vocabulary vocab = tiny_vocab();

    Corpus corpus;
    corpus.videos.push_back({"v1", 4, "train", ""});
    corpus.comments.push_back({"v1", 0, "alpha beta"});
    corpus.comments.push_back({"v1", 1, "gamma"});
    corpus.rebuild_index();

    FeatureTable feats;
    feats.seconds = 4;
    feats.dim = 4;
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t j = 0; j < 4; ++j) feats.values.push_back(float(10 * t + j));

    auto windows = build_windows(corpus, "v1", c.l);
    REQUIRE(windows.size() == 2);
    const ContextWindow& w0 = windows[0];  // t=0: left frame out of range
    KnowledgeSequence k = empty_knowledge_sequence(c.m);

    ModelInput in = assemble_input(w0, feats, vocab, k, {}, c);
    CHECK(in.period == w0.period);
    CHECK(in.visual.frames.dim(0) == 3);
    CHECK(in.visual.valid == std::vector<uint8_t>{0, 1, 1});
    for (int64_t j = 0; j < 4; ++j) {
        CHECK(in.visual.frames.data()[j] == 0.0);            // padded frame
        CHECK(in.visual.frames.data()[4 + j] == double(j));  // second 0
        CHECK(in.visual.frames.data()[8 + j] == double(10 + j));
    }
    REQUIRE(in.steps.size() == 2);
    CHECK(in.steps[0].ids[1] == Vocabulary::kPad);  // invalid step: CLS+pads
    CHECK(in.steps[1].ids[1] == vocab.id("gamma"));

    // retrieval lands round-robin in the steps unless the channel is off
    ModelInput aug = assemble_input(w0, feats, vocab, k, {"epsi zeta"}, c);
    CHECK(aug.steps[0].ids[1] == vocab.id("epsi"));
    ModelConfig no_ac = c;
    no_ac.disable_ac = true;
    ModelInput plain = assemble_input(w0, feats, vocab, k, {"epsi zeta"}, no_ac);
    CHECK(plain.steps[0].ids == in.steps[0].ids);

    FeatureTable wrong = feats;
    wrong.dim = 5;
    CHECK_THROWS_AS(assemble_input(w0, wrong, vocab, k, {}, c), ConfigError);
    KnowledgeSequence short_k = empty_knowledge_sequence(c.m - 1);
    CHECK_THROWS_AS(assemble_input(w0, feats, vocab, short_k, {}, c), ContractError);
}
