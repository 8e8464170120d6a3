// Command-line front end: synthetic data, vocabulary, knowledge recall,
// the two training stages, generation, ranking evaluation, and a gradient
// self-check. Logs go to stderr; machine-readable artifacts only to files.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "klvcg/evaluate.hpp"
#include "klvcg/gradcheck.hpp"
#include "klvcg/synth.hpp"
#include "klvcg/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace klvcg;

namespace {

struct ConfigDoc {
    json model = json::object();
    json train = json::object();
    json synth = json::object();
    json recall = json::object();
};

ConfigDoc load_config_doc(const std::string& path) {
    ConfigDoc doc;
    if (path.empty()) return doc;
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path + ": invalid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file " + path + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "model")
            doc.model = value;
        else if (key == "train")
            doc.train = value;
        else if (key == "synth")
            doc.synth = value;
        else if (key == "recall")
            doc.recall = value;
        else
            throw ConfigError("config file " + path + ": unknown section '" + key + "'");
    }
    return doc;
}

struct LoadedData {
    Corpus corpus;
    std::unordered_map<std::string, FeatureTable> features;
};

// Merges the corpora under the given directories; feature tables load lazily
// relative to the directory owning each video. expected_dim < 0 skips them.
LoadedData load_data(const std::vector<std::string>& dirs, int64_t expected_dim) {
    LoadedData out;
    for (const std::string& dir : dirs) {
        Corpus c = load_corpus((fs::path(dir) / "comments.jsonl").string(),
                               (fs::path(dir) / "meta.json").string());
        fs::path splits = fs::path(dir) / "splits.json";
        if (fs::exists(splits)) apply_splits(c, load_splits(splits.string()));
        for (VideoMeta& v : c.videos) {
            if (expected_dim >= 0) {
                if (v.feature_path.empty())
                    throw ContractError("video '" + v.video_id + "' in " + dir +
                                        " has no feature table");
                out.features[v.video_id] = load_features_checked(
                    (fs::path(dir) / v.feature_path).string(), v, expected_dim);
            }
            out.corpus.videos.push_back(std::move(v));
        }
        for (CommentRecord& r : c.comments) out.corpus.comments.push_back(std::move(r));
    }
    out.corpus.rebuild_index();  // throws on duplicate video ids across dirs
    out.corpus.validate();
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << text;
}

void write_snapshot(const std::string& out_dir, const json& resolved) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "resolved-config.json", resolved.dump(2) + "\n");
}

json paths_json(const std::vector<std::string>& data, const std::string& vocab,
                const std::string& recall, const std::string& ckpt) {
    json p{{"data", data}};
    if (!vocab.empty()) p["vocab"] = vocab;
    if (!recall.empty()) p["recall"] = recall;
    if (!ckpt.empty()) p["checkpoint"] = ckpt;
    return p;
}

std::string default_under_first(const std::vector<std::string>& dirs, const char* name) {
    return (fs::path(dirs.front()) / name).string();
}

// ---- synth --------------------------------------------------------------------

struct SynthArgs {
    std::string out;
    uint64_t seed = 1;
    SynthSpec spec;
};

void apply_synth_overlay(SynthSpec& sp, const json& j) {
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "n_videos")
                sp.n_videos = value.get<int64_t>();
            else if (key == "duration_s")
                sp.duration_s = value.get<int64_t>();
            else if (key == "feature_dim")
                sp.feature_dim = value.get<int64_t>();
            else if (key == "n_topics")
                sp.n_topics = value.get<int64_t>();
            else if (key == "segment_s")
                sp.segment_s = value.get<int64_t>();
            else if (key == "topic_word_pool")
                sp.topic_word_pool = value.get<int64_t>();
            else if (key == "words_per_topic")
                sp.words_per_topic = value.get<int64_t>();
            else if (key == "comment_density")
                sp.comment_density = value.get<double>();
            else if (key == "min_comments_per_second")
                sp.min_comments_per_second = value.get<int64_t>();
            else if (key == "max_comments_per_second")
                sp.max_comments_per_second = value.get<int64_t>();
            else if (key == "comment_words_min")
                sp.comment_words_min = value.get<int64_t>();
            else if (key == "comment_words_max")
                sp.comment_words_max = value.get<int64_t>();
            else if (key == "n_entities")
                sp.n_entities = value.get<int64_t>();
            else if (key == "facts_per_entity")
                sp.facts_per_entity = value.get<int64_t>();
            else if (key == "entity_mention_rate")
                sp.entity_mention_rate = value.get<double>();
            else if (key == "fact_object_rate")
                sp.fact_object_rate = value.get<double>();
            else if (key == "recurring_phrase_rate")
                sp.recurring_phrase_rate = value.get<double>();
            else if (key == "stage_word_rate")
                sp.stage_word_rate = value.get<double>();
            else if (key == "feature_noise")
                sp.feature_noise = value.get<double>();
            else
                throw ConfigError("synth config: unknown key '" + key + "'");
        } catch (const json::exception&) {
            throw ConfigError("synth config: bad value for '" + key + "'");
        }
    }
}

json synth_spec_json(const SynthSpec& sp) {
    return json{{"n_videos", sp.n_videos},
                {"duration_s", sp.duration_s},
                {"feature_dim", sp.feature_dim},
                {"n_topics", sp.n_topics},
                {"segment_s", sp.segment_s},
                {"topic_word_pool", sp.topic_word_pool},
                {"words_per_topic", sp.words_per_topic},
                {"comment_density", sp.comment_density},
                {"min_comments_per_second", sp.min_comments_per_second},
                {"max_comments_per_second", sp.max_comments_per_second},
                {"comment_words_min", sp.comment_words_min},
                {"comment_words_max", sp.comment_words_max},
                {"n_entities", sp.n_entities},
                {"facts_per_entity", sp.facts_per_entity},
                {"entity_mention_rate", sp.entity_mention_rate},
                {"fact_object_rate", sp.fact_object_rate},
                {"recurring_phrase_rate", sp.recurring_phrase_rate},
                {"stage_word_rate", sp.stage_word_rate},
                {"feature_noise", sp.feature_noise}};
}

int cmd_synth(const SynthArgs& a) {
    SynthResult result = synthesize_corpus(a.seed, a.spec);
    write_synth_dir(result, a.out);
    write_snapshot(a.out, json{{"subcommand", "synth"},
                               {"seed", a.seed},
                               {"synth", synth_spec_json(a.spec)}});
    std::cerr << "synth: " << result.corpus.videos.size() << " videos, "
              << result.corpus.comments.size() << " comments, " << result.kb.size()
              << " facts -> " << a.out << "\n";
    return 0;
}

// ---- build-vocab ----------------------------------------------------------------

struct VocabArgs {
    std::vector<std::string> data;
    std::string out;
    int64_t min_freq = 2;
    int64_t max_size = 0;
};

int cmd_build_vocab(const VocabArgs& a) {
    LoadedData loaded = load_data(a.data, -1);
    std::vector<std::string> texts;
    for (const CommentRecord& r : loaded.corpus.comments)
        if (loaded.corpus.meta(r.video_id).split == "train") texts.push_back(r.text);
    Vocabulary vocab = Vocabulary::build(texts, a.min_freq, a.max_size);
    fs::create_directories(a.out);
    vocab.save((fs::path(a.out) / "vocab.txt").string());
    write_snapshot(a.out, json{{"subcommand", "build-vocab"},
                               {"min_freq", a.min_freq},
                               {"max_size", a.max_size},
                               {"paths", paths_json(a.data, "", "", "")},
                               {"vocab_size", vocab.size()}});
    std::cerr << "build-vocab: " << vocab.size() << " tokens (from " << texts.size()
              << " train comments) -> " << a.out << "\n";
    return 0;
}

// ---- recall ---------------------------------------------------------------------

struct RecallArgs {
    std::vector<std::string> data;
    std::string out;
    std::string config;
    std::string kb;
    int64_t l = -1;
    RecallConfig rc;
};

int cmd_recall(RecallArgs a) {
    ConfigDoc doc = load_config_doc(a.config);
    ModelConfig mc;
    apply_json_overlay(mc, doc.model.dump());
    if (!doc.recall.empty()) {
        for (const auto& [key, value] : doc.recall.items()) {
            try {
                if (key == "top_k")
                    a.rc.top_k = value.get<int64_t>();
                else if (key == "max_facts")
                    a.rc.max_facts = value.get<int64_t>();
                else if (key == "max_r")
                    a.rc.max_r = value.get<int64_t>();
                else
                    throw ConfigError("recall config: unknown key '" + key + "'");
            } catch (const json::exception&) {
                throw ConfigError("recall config: bad value for '" + key + "'");
            }
        }
    }
    int64_t l = a.l > 0 ? a.l : mc.l;

    LoadedData loaded = load_data(a.data, -1);
    if (a.kb.empty()) a.kb = default_under_first(a.data, "kb.tsv");
    KnowledgeBase kb = KnowledgeBase::load_tsv(a.kb);

    std::vector<std::string> targets;
    for (const VideoMeta& v : loaded.corpus.videos) targets.push_back(v.video_id);
    std::vector<RecallRecord> records = precompute_recall(loaded.corpus, kb, targets, l, a.rc);

    fs::create_directories(a.out);
    save_recall((fs::path(a.out) / "recall.jsonl").string(), records);
    write_snapshot(a.out, json{{"subcommand", "recall"},
                               {"l", l},
                               {"top_k", a.rc.top_k},
                               {"max_facts", a.rc.max_facts},
                               {"max_r", a.rc.max_r},
                               {"kb", a.kb},
                               {"paths", paths_json(a.data, "", "", "")}});
    std::cerr << "recall: " << records.size() << " records over " << targets.size()
              << " videos -> " << a.out << "\n";
    return 0;
}

// ---- pretrain / finetune ---------------------------------------------------------

struct TrainArgs {
    std::vector<std::string> data;
    std::string out;
    std::string config;
    std::string vocab;
    std::string recall;
    std::string init;
    std::vector<std::string> ablate;
};

void apply_ablate_flags(const std::vector<std::string>& ablate, TrainConfig& tc) {
    for (const std::string& a : ablate) {
        if (a == "mlm")
            tc.ablate_mlm = true;
        else if (a == "kg")
            tc.ablate_kg = true;
        else if (a == "ac")
            tc.ablate_ac = true;
        else if (a == "period")
            tc.ablate_period = true;
    }
}

int cmd_train(const std::string& stage, const TrainArgs& a, TrainConfig tc, ModelConfig mc) {
    tc.stage = stage;
    tc.data_dirs = a.data;
    tc.validate();
    if (tc.stage == "pretrain" && tc.ablate_mlm) {
        std::cerr << stage << ": masked-word stage ablated away, nothing to do\n";
        return 0;
    }

    std::string vocab_path =
        a.vocab.empty() ? default_under_first(a.data, "vocab.txt") : a.vocab;
    std::string recall_path =
        a.recall.empty() ? default_under_first(a.data, "recall.jsonl") : a.recall;
    Vocabulary vocab = Vocabulary::load(vocab_path);
    mc.vocab_size = vocab.size();
    apply_ablations(tc, mc);
    mc.validate();

    LoadedData loaded = load_data(a.data, mc.visual_dim);
    std::vector<RecallRecord> recall = load_recall(recall_path);

    std::vector<TrainExample> train_set =
        build_examples(loaded.corpus, loaded.features, recall, vocab, mc, "train");
    std::vector<TrainExample> valid_set =
        build_examples(loaded.corpus, loaded.features, recall, vocab, mc, "valid");
    std::cerr << stage << ": " << train_set.size() << " train / " << valid_set.size()
              << " valid examples, vocab " << vocab.size() << "\n";

    KlvcgModel model(mc, tc.seed);
    if (!a.init.empty()) {
        load_checkpoint(model.params(), a.init);
        std::cerr << stage << ": initialized parameters from " << a.init << "\n";
    }

    write_snapshot(a.out, json{{"subcommand", stage},
                               {"model", json::parse(to_json(mc))},
                               {"train", json::parse(to_json(tc))},
                               {"init", a.init},
                               {"paths", paths_json(a.data, vocab_path, recall_path, "")}});

    TrainResult result = train(model, train_set, valid_set, tc, a.out);
    std::cerr << stage << ": " << result.optimizer_steps << " optimizer steps";
    if (!result.epoch_train_loss.empty())
        std::cerr << ", final train loss " << result.epoch_train_loss.back();
    if (!result.epoch_val_loss.empty())
        std::cerr << ", best val loss " << result.best_val;
    std::cerr << " -> " << a.out << "\n";
    return 0;
}

// ---- generate / evaluate ----------------------------------------------------------

struct EvalArgs {
    std::vector<std::string> data;
    std::string out;
    std::string config;
    std::string vocab;
    std::string recall;
    std::string ckpt;
    std::string split = "test";
    std::vector<std::string> ablate;
    EvalOptions opts;
};

struct EvalSetup {
    Vocabulary vocab;
    ModelConfig mc;
    LoadedData loaded;
    std::vector<RecallRecord> recall;
    std::string vocab_path;
    std::string recall_path;
};

EvalSetup eval_setup(const EvalArgs& a, ModelConfig mc) {
    EvalSetup s;
    s.vocab_path = a.vocab.empty() ? default_under_first(a.data, "vocab.txt") : a.vocab;
    s.recall_path = a.recall.empty() ? default_under_first(a.data, "recall.jsonl") : a.recall;
    s.vocab = Vocabulary::load(s.vocab_path);
    mc.vocab_size = s.vocab.size();
    for (const std::string& name : a.ablate) {
        if (name == "kg")
            mc.disable_kg = true;
        else if (name == "ac")
            mc.disable_ac = true;
        else if (name == "period")
            mc.disable_period = true;
        else
            std::cerr << "note: --ablate " << name << " does not affect this command\n";
    }
    mc.validate();
    s.mc = mc;
    s.loaded = load_data(a.data, mc.visual_dim);
    s.recall = load_recall(s.recall_path);
    return s;
}

json eval_snapshot(const char* subcommand, const EvalArgs& a, const EvalSetup& s) {
    return json{{"subcommand", subcommand},
                {"model", json::parse(to_json(s.mc))},
                {"split", a.split},
                {"seed", a.opts.seed},
                {"density", a.opts.density},
                {"beam", a.opts.beam},
                {"threads", a.opts.threads},
                {"paths", paths_json(a.data, s.vocab_path, s.recall_path, a.ckpt)}};
}

int cmd_generate(const EvalArgs& a, const ModelConfig& base) {
    EvalSetup s = eval_setup(a, base);
    KlvcgModel model(s.mc, 1);
    load_checkpoint(model.params(), a.ckpt);

    std::vector<GeneratedComment> rows = generate_split(model, s.loaded.corpus, s.loaded.features,
                                                        s.recall, s.vocab, a.split, a.opts);
    std::string out;
    for (const GeneratedComment& r : rows)
        out += json{{"video_id", r.video_id}, {"t", r.t}, {"text", r.text}}.dump() + "\n";
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "generated.jsonl", out);
    write_snapshot(a.out, eval_snapshot("generate", a, s));
    std::cerr << "generate: " << rows.size() << " comments -> " << a.out << "\n";
    return 0;
}

int cmd_evaluate(const EvalArgs& a, const ModelConfig& base) {
    EvalSetup s = eval_setup(a, base);
    KlvcgModel model(s.mc, 1);
    load_checkpoint(model.params(), a.ckpt);

    EvalReport report = evaluate_split(model, s.loaded.corpus, s.loaded.features, s.recall,
                                       s.vocab, a.split, a.opts);
    fs::create_directories(a.out);
    write_text(fs::path(a.out) / "report.json", to_json(report));
    write_text(fs::path(a.out) / "details.jsonl", details_jsonl(report));
    write_snapshot(a.out, eval_snapshot("evaluate", a, s));
    std::cerr << format_report(report);
    std::cerr << "evaluate: report -> " << a.out << "\n";
    return 0;
}

// ---- gradcheck ---------------------------------------------------------------------

int cmd_gradcheck(const std::string& out, uint64_t seed) {
    std::vector<GradCheckCase> cases = gradient_suite(seed);
    json rows = json::array();
    for (const GradCheckCase& c : cases) {
        std::cerr << (c.report.passed ? "PASS " : "FAIL ") << c.name
                  << " (max_rel=" << c.report.max_rel_error << ", checked=" << c.report.checked
                  << ")\n";
        rows.push_back(json{{"name", c.name},
                            {"passed", c.report.passed},
                            {"max_rel_error", c.report.max_rel_error},
                            {"checked", c.report.checked},
                            {"worst", c.report.worst_label}});
    }
    bool ok = all_passed(cases);
    if (!out.empty()) {
        fs::create_directories(out);
        write_text(fs::path(out) / "gradcheck.json",
                   json{{"passed", ok}, {"cases", rows}}.dump(2) + "\n");
        write_snapshot(out, json{{"subcommand", "gradcheck"}, {"seed", seed}});
    }
    std::cerr << "gradcheck: " << (ok ? "all passed" : "FAILURES") << " (" << cases.size()
              << " cases)\n";
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-enhanced live-comment pipeline"};
    app.require_subcommand(1);

    // synth
    SynthArgs sy;
    std::string sy_config;
    CLI::App* synth = app.add_subcommand("synth", "write a synthetic corpus directory");
    synth->add_option("--out", sy.out, "output directory")->required();
    synth->add_option("--seed", sy.seed, "generation seed");
    synth->add_option("--config", sy_config, "JSON config file (synth section)");
    auto* sy_videos = synth->add_option("--videos", sy.spec.n_videos, "number of videos");
    auto* sy_duration = synth->add_option("--duration", sy.spec.duration_s, "seconds per video");
    auto* sy_dim = synth->add_option("--feature-dim", sy.spec.feature_dim, "frame feature width");
    auto* sy_topics = synth->add_option("--topics", sy.spec.n_topics, "topic count");
    auto* sy_entities = synth->add_option("--entities", sy.spec.n_entities, "entity count");
    auto* sy_density =
        synth->add_option("--comment-density", sy.spec.comment_density, "commented-second rate");

    // build-vocab
    VocabArgs vo;
    CLI::App* vocab = app.add_subcommand("build-vocab", "build a vocabulary from train comments");
    vocab->add_option("--data", vo.data, "corpus directory (repeatable)")->required();
    vocab->add_option("--out", vo.out, "output directory")->required();
    vocab->add_option("--min-freq", vo.min_freq, "minimum token frequency");
    vocab->add_option("--max-size", vo.max_size, "cap on vocabulary size (0 = none)");

    // recall
    RecallArgs re;
    CLI::App* recall = app.add_subcommand("recall", "precompute knowledge and retrieval sidecars");
    recall->add_option("--data", re.data, "corpus directory (repeatable)")->required();
    recall->add_option("--out", re.out, "output directory")->required();
    recall->add_option("--config", re.config, "JSON config file (model/recall sections)");
    recall->add_option("--kb", re.kb, "knowledge-base TSV (default <data>/kb.tsv)");
    recall->add_option("--l", re.l, "context radius in seconds (default from model config)");
    recall->add_option("--keywords", re.rc.top_k, "keywords per window");
    recall->add_option("--max-facts", re.rc.max_facts, "linked facts per window");
    recall->add_option("--max-retrieved", re.rc.max_r, "retrieved comments per window");

    // pretrain / finetune share their surface
    TrainArgs ta[2];
    TrainConfig tc_flags;
    uint64_t tr_seed = tc_flags.seed;
    double tr_lr = tc_flags.lr;
    int64_t tr_epochs = tc_flags.epochs, tr_batch = tc_flags.batch_size,
            tr_accum = tc_flags.grad_accum, tr_limit = tc_flags.limit_epochs;
    double tr_warmup = tc_flags.warmup_frac;
    bool tr_resume = false;
    CLI::Option* tr_opts[2][8];
    CLI::App* stages[2];
    const char* stage_names[2] = {"pretrain", "finetune"};
    const char* stage_help[2] = {"masked-word pre-training stage",
                                 "autoregressive fine-tuning stage"};
    for (int i = 0; i < 2; ++i) {
        CLI::App* cmd = app.add_subcommand(stage_names[i], stage_help[i]);
        cmd->add_option("--data", ta[i].data, "corpus directory (repeatable)")->required();
        cmd->add_option("--out", ta[i].out, "output directory")->required();
        cmd->add_option("--config", ta[i].config, "JSON config file (model/train sections)");
        cmd->add_option("--vocab", ta[i].vocab, "vocabulary file (default <data>/vocab.txt)");
        cmd->add_option("--recall", ta[i].recall,
                        "recall sidecar (default <data>/recall.jsonl)");
        cmd->add_option("--init", ta[i].init, "checkpoint to initialize parameters from");
        cmd->add_option("--ablate", ta[i].ablate, "disable a pathway: mlm|kg|ac|period")
            ->check(CLI::IsMember({"mlm", "kg", "ac", "period"}));
        tr_opts[i][0] = cmd->add_option("--seed", tr_seed, "training seed");
        tr_opts[i][1] = cmd->add_option("--lr", tr_lr, "peak learning rate");
        tr_opts[i][2] = cmd->add_option("--epochs", tr_epochs, "total epochs");
        tr_opts[i][3] = cmd->add_option("--batch-size", tr_batch, "samples per batch");
        tr_opts[i][4] = cmd->add_option("--grad-accum", tr_accum, "batches per optimizer step");
        tr_opts[i][5] = cmd->add_option("--warmup-frac", tr_warmup, "warmup fraction of steps");
        tr_opts[i][6] = cmd->add_option("--limit-epochs", tr_limit,
                                        "stop after this many additional epochs (0 = all)");
        tr_opts[i][7] = cmd->add_flag("--resume", tr_resume, "continue from the out directory");
        stages[i] = cmd;
    }

    // generate / evaluate share their surface
    EvalArgs ea[2];
    CLI::App* evals[2];
    const char* eval_names[2] = {"generate", "evaluate"};
    const char* eval_help[2] = {"beam-search comments for a split",
                                "rank candidates and report retrieval metrics"};
    for (int i = 0; i < 2; ++i) {
        CLI::App* cmd = app.add_subcommand(eval_names[i], eval_help[i]);
        cmd->add_option("--data", ea[i].data, "corpus directory (repeatable)")->required();
        cmd->add_option("--out", ea[i].out, "output directory")->required();
        cmd->add_option("--ckpt", ea[i].ckpt, "model checkpoint")->required();
        cmd->add_option("--config", ea[i].config, "JSON config file (model section)");
        cmd->add_option("--vocab", ea[i].vocab, "vocabulary file (default <data>/vocab.txt)");
        cmd->add_option("--recall", ea[i].recall,
                        "recall sidecar (default <data>/recall.jsonl)");
        cmd->add_option("--split", ea[i].split, "corpus split to run on");
        cmd->add_option("--seed", ea[i].opts.seed, "sampling seed");
        cmd->add_option("--threads", ea[i].opts.threads, "worker threads");
        cmd->add_option("--density", ea[i].opts.density, "context keep probability in (0,1]");
        cmd->add_option("--beam", ea[i].opts.beam, "beam width");
        cmd->add_option("--ablate", ea[i].ablate, "disable a pathway: mlm|kg|ac|period")
            ->check(CLI::IsMember({"mlm", "kg", "ac", "period"}));
        evals[i] = cmd;
    }

    // gradcheck
    std::string gc_out;
    uint64_t gc_seed = 1;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient self-check");
    gradcheck->add_option("--out", gc_out, "optional report directory");
    gradcheck->add_option("--seed", gc_seed, "perturbation seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            ConfigDoc doc = load_config_doc(sy_config);
            SynthSpec sp;
            apply_synth_overlay(sp, doc.synth);
            // flags win over the config file
            if (sy_videos->count()) sp.n_videos = sy.spec.n_videos;
            if (sy_duration->count()) sp.duration_s = sy.spec.duration_s;
            if (sy_dim->count()) sp.feature_dim = sy.spec.feature_dim;
            if (sy_topics->count()) sp.n_topics = sy.spec.n_topics;
            if (sy_entities->count()) sp.n_entities = sy.spec.n_entities;
            if (sy_density->count()) sp.comment_density = sy.spec.comment_density;
            sy.spec = sp;
            return cmd_synth(sy);
        }
        if (vocab->parsed()) return cmd_build_vocab(vo);
        if (recall->parsed()) return cmd_recall(re);
        for (int i = 0; i < 2; ++i) {
            if (!stages[i]->parsed()) continue;
            ConfigDoc doc = load_config_doc(ta[i].config);
            TrainConfig tc;
            apply_json_overlay(tc, doc.train.dump());
            ModelConfig mc;
            apply_json_overlay(mc, doc.model.dump());
            if (tr_opts[i][0]->count()) tc.seed = tr_seed;
            if (tr_opts[i][1]->count()) tc.lr = tr_lr;
            if (tr_opts[i][2]->count()) tc.epochs = tr_epochs;
            if (tr_opts[i][3]->count()) tc.batch_size = tr_batch;
            if (tr_opts[i][4]->count()) tc.grad_accum = tr_accum;
            if (tr_opts[i][5]->count()) tc.warmup_frac = tr_warmup;
            if (tr_opts[i][6]->count()) tc.limit_epochs = tr_limit;
            if (tr_opts[i][7]->count()) tc.resume = tr_resume;
            apply_ablate_flags(ta[i].ablate, tc);
            return cmd_train(stage_names[i], ta[i], tc, mc);
        }
        for (int i = 0; i < 2; ++i) {
            if (!evals[i]->parsed()) continue;
            ConfigDoc doc = load_config_doc(ea[i].config);
            ModelConfig mc;
            apply_json_overlay(mc, doc.model.dump());
            return i == 0 ? cmd_generate(ea[i], mc) : cmd_evaluate(ea[i], mc);
        }
        if (gradcheck->parsed()) return cmd_gradcheck(gc_out, gc_seed);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
