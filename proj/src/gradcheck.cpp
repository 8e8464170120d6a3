#include "klvcg/gradcheck.hpp"

namespace klvcg {

namespace {

struct Suite {
    uint64_t seed;
    double op_tol;
    std::vector<GradCheckCase> cases;

    Rng rng(const std::string& name) const { return Rng(seed ^ fnv1a(name)); }

    void op(const std::string& name, const std::function<Tensor()>& loss_fn,
            const std::vector<Tensor>& inputs, double h = 1e-3) {
        cases.push_back({name, finite_diff_check(loss_fn, inputs, h, op_tol)});
    }
};

ModelConfig check_config() {
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

}  // namespace

std::vector<GradCheckCase> gradient_suite(uint64_t seed, double op_tol, double e2e_tol) {
    Suite s{seed, op_tol, {}};

    {
        Rng rng = s.rng("add");
        Tensor a = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        s.op("add", [&] { return sum(mul(add(a, b), w)); }, {a, b});
    }
    {
        Rng rng = s.rng("add_bias");
        Tensor a = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor b = Tensor::randn({4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        s.op("add_bias", [&] { return sum(mul(add_bias(a, b), w)); }, {a, b});
    }
    {
        Rng rng = s.rng("sub");
        Tensor a = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        s.op("sub", [&] { return sum(mul(sub(a, b), w)); }, {a, b});
    }
    {
        Rng rng = s.rng("mul");
        Tensor a = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        s.op("mul", [&] { return sum(mul(mul(a, b), w)); }, {a, b});
    }
    {
        Rng rng = s.rng("scale");
        Tensor a = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        s.op("scale", [&] { return sum(mul(scale(a, 1.7), w)); }, {a});
    }
    {
        Rng rng = s.rng("matmul");
        Tensor a = Tensor::randn({2, 3}, rng, 0.0, 1.0, true);
        Tensor b = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({2, 4}, rng);
        s.op("matmul", [&] { return sum(mul(matmul(a, b), w)); }, {a, b});
    }
    {
        Rng rng = s.rng("matmul_batched");
        Tensor a = Tensor::randn({2, 2, 3}, rng, 0.0, 1.0, true);
        Tensor b = Tensor::randn({2, 3, 2}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({2, 2, 2}, rng);
        s.op("matmul_batched", [&] { return sum(mul(matmul(a, b), w)); }, {a, b});
    }
    {
        Rng rng = s.rng("transpose_last2");
        Tensor a = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({4, 3}, rng);
        s.op("transpose_last2", [&] { return sum(mul(transpose_last2(a), w)); }, {a});
    }
    {
        Rng rng = s.rng("reshape");
        Tensor a = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({2, 6}, rng);
        s.op("reshape", [&] { return sum(mul(reshape(a, {2, 6}), w)); }, {a});
    }
    {
        Rng rng = s.rng("split_merge_heads");
        Tensor a = Tensor::randn({4, 8}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({4, 8}, rng);
        s.op("split_merge_heads",
             [&] { return sum(mul(merge_heads(split_heads(a, 2)), w)); }, {a});
    }
    {
        Rng rng = s.rng("softmax");
        Tensor x = Tensor::randn({2, 5}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({2, 5}, rng);
        s.op("softmax", [&] { return sum(mul(softmax(x, -1), w)); }, {x});
    }
    {
        Rng rng = s.rng("masked_softmax");
        Tensor x = Tensor::randn({2, 3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({2, 3, 4}, rng);
        std::vector<uint8_t> mask(12, 1);
        mask[3] = 0;
        mask[7] = 0;
        s.op("masked_softmax", [&] { return sum(mul(masked_softmax(x, mask, 3, 4), w)); },
             {x});
    }
    {
        Rng rng = s.rng("layer_norm");
        Tensor x = Tensor::randn({4, 6}, rng, 0.0, 1.0, true);
        Tensor g = Tensor::full({6}, 1.0, true);
        Tensor b = Tensor::zeros({6}, true);
        Tensor w = Tensor::randn({4, 6}, rng);
        s.op("layer_norm", [&] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b});
    }
    {
        Rng rng = s.rng("embedding_lookup");
        Tensor table = Tensor::randn({7, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({4, 4}, rng);
        s.op("embedding_lookup",
             [&] { return sum(mul(embedding_lookup(table, {1, 5, 5, 2}), w)); }, {table});
    }
    {
        Rng rng = s.rng("cross_entropy_logits");
        Tensor x = Tensor::randn({5, 7}, rng, 0.0, 1.0, true);
        std::vector<int64_t> targets = {2, 0, -1, 6, 3};
        s.op("cross_entropy_logits", [&] { return cross_entropy_logits(x, targets, -1); },
             {x});
    }
    {
        Rng rng = s.rng("gelu");
        Tensor x = Tensor::randn({10}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({10}, rng);
        s.op("gelu", [&] { return sum(mul(gelu(x), w)); }, {x});
    }
    {
        Rng rng = s.rng("dropout");
        Tensor x = Tensor::randn({6, 5}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({6, 5}, rng);
        uint64_t mask_seed = s.seed ^ fnv1a("dropout-mask");
        s.op("dropout",
             [&, mask_seed] {
                 Rng mask_rng(mask_seed);  // same mask on every rebuild
                 return sum(mul(dropout(x, 0.3, mask_rng, true), w));
             },
             {x});
    }
    {
        Rng rng = s.rng("concat_slice");
        Tensor a = Tensor::randn({2, 3}, rng, 0.0, 1.0, true);
        Tensor b = Tensor::randn({2, 3}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 3}, rng);
        s.op("concat_slice",
             [&] { return sum(mul(slice_rows(concat_rows({a, b}), 1, 3), w)); }, {a, b});
    }
    {
        Rng rng = s.rng("sum");
        Tensor x = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        s.op("sum", [&] { return sum(mul(x, w)); }, {x});
    }
    {
        Rng rng = s.rng("mean");
        Tensor x = Tensor::randn({3, 4}, rng, 0.0, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        s.op("mean", [&] { return mean(mul(x, w)); }, {x});
    }
    {
        Rng rng = s.rng("attention_composite");
        Tensor x = Tensor::randn({4, 8}, rng, 0.0, 0.8, true);
        Tensor wq = Tensor::randn({8, 8}, rng, 0.0, 0.4, true);
        Tensor wk = Tensor::randn({8, 8}, rng, 0.0, 0.4, true);
        Tensor wv = Tensor::randn({8, 8}, rng, 0.0, 0.4, true);
        Tensor wo = Tensor::randn({8, 5}, rng, 0.0, 0.4, true);
        Tensor g = Tensor::full({8}, 1.0, true);
        Tensor b = Tensor::zeros({8}, true);
        std::vector<int64_t> targets = {1, 4, -1, 0};
        std::vector<uint8_t> mask(16, 1);
        mask[3] = 0;
        s.op("attention_composite",
             [&] {
                 Tensor q = split_heads(matmul(x, wq), 2);
                 Tensor k = split_heads(matmul(x, wk), 2);
                 Tensor v = split_heads(matmul(x, wv), 2);
                 Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / 2.0);
                 Tensor att = masked_softmax(scores, mask, 4, 4);
                 Tensor ctx = merge_heads(matmul(att, v));
                 Tensor ln = layer_norm(add(ctx, x), g, b);
                 return cross_entropy_logits(matmul(gelu(ln), wo), targets, -1);
             },
             {x, wq, wk, wv, wo, g, b});
    }

    // end to end: the full tiny model, sampled parameters
    {
        ModelConfig c = check_config();
        Vocabulary vocab = Vocabulary::build(
            {"alpha beta gamma delta epsi zeta theta iota kappa nu xi rho sigma tau phi "
             "omega"},
            1, 0);
        KlvcgModel model(c, 3);
        PassContext ctx;

        Rng rng = s.rng("model_input");
        ModelInput in;
        in.visual.frames = Tensor::randn({2 * c.l + 1, c.visual_dim}, rng);
        in.visual.valid.assign(2 * c.l + 1, 1);
        in.steps.push_back(make_step_sequence(0, {"alpha beta"}, vocab, c.n));
        in.steps.push_back(make_step_sequence(2, {"gamma delta", "epsi"}, vocab, c.n));
        in.knowledge = empty_knowledge_sequence(c.m);
        in.knowledge.ids[0] = vocab.id("zeta");
        in.knowledge.valid[0] = 1;
        in.period = 2;

        std::vector<Tensor> params;
        for (const Parameter& p : model.params().params()) params.push_back(p.tensor);

        std::vector<int64_t> target = {Vocabulary::kBos, 8, 9, 10, 11, Vocabulary::kEos};
        std::vector<int64_t> labels = {8, 9, 10, 11, Vocabulary::kEos, Vocabulary::kPad};
        auto gen_fn = [&] {
            DecoderOutput out = model.forward(in, target, DecodeMode::kGeneration, ctx);
            return cross_entropy_logits(out.logits, labels, Vocabulary::kPad);
        };
        Rng sample_rng = s.rng("model_generation_samples");
        s.cases.push_back({"model_generation",
                           finite_diff_check(gen_fn, params, 1e-3, e2e_tol, 6, &sample_rng)});

        auto cloze_fn = [&] {
            std::vector<int64_t> masked = {8, Vocabulary::kMask, 10, Vocabulary::kPad};
            std::vector<int64_t> cloze_labels = {-1, 9, -1, -1};
            DecoderOutput out = model.forward(in, masked, DecodeMode::kCloze, ctx);
            return cross_entropy_logits(out.logits, cloze_labels, -1);
        };
        Rng cloze_rng = s.rng("model_cloze_samples");
        s.cases.push_back(
            {"model_cloze", finite_diff_check(cloze_fn, params, 3e-4, e2e_tol, 3, &cloze_rng)});
    }

    return s.cases;
}

bool all_passed(const std::vector<GradCheckCase>& cases) {
    for (const GradCheckCase& c : cases)
        if (!c.report.passed) return false;
    return !cases.empty();
}

}  // namespace klvcg
