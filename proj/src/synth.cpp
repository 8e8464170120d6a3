#include "klvcg/synth.hpp"

#include <algorithm>
#include <filesystem>
#include <unordered_set>

namespace klvcg {

namespace {

// Pronounceable unique pseudo-words so every comment survives tokenization
// verbatim (lowercase ASCII letters only).
class WordMint {
public:
    explicit WordMint(Rng& rng) : rng_(rng) {}

    std::string next() {
        static const char* consonants = "bdfgklmnprstvz";
        static const char* vowels = "aeiou";
        for (int attempt = 0; attempt < 10000; ++attempt) {
            std::string w;
            int64_t syllables = 2 + rng_.index(2);
            for (int64_t s = 0; s < syllables; ++s) {
                w.push_back(consonants[rng_.index(14)]);
                w.push_back(vowels[rng_.index(5)]);
            }
            if (used_.insert(w).second) return w;
        }
        throw Error("word mint exhausted");
    }

private:
    Rng& rng_;
    std::unordered_set<std::string> used_;
};

std::string video_name(int64_t i) {
    std::string n = std::to_string(i);
    while (n.size() < 3) n.insert(n.begin(), '0');
    return "v" + n;
}

}  // namespace

SynthResult synthesize_corpus(uint64_t seed, const SynthSpec& spec) {
    if (spec.n_videos < 1 || spec.duration_s < 1 || spec.feature_dim < 1 ||
        spec.n_topics < 1 || spec.segment_s < 1 || spec.n_entities < 1)
        throw ConfigError("synth spec values must be positive");
    if (spec.min_comments_per_second < 1 ||
        spec.max_comments_per_second < spec.min_comments_per_second)
        throw ConfigError("synth spec comment counts are inconsistent");
    if (spec.comment_words_min < 1 || spec.comment_words_max < spec.comment_words_min)
        throw ConfigError("synth spec comment lengths are inconsistent");

    Rng rng(seed);
    WordMint mint(rng);

    // vocabulary building blocks
    std::vector<std::string> pool;
    for (int64_t i = 0; i < spec.topic_word_pool; ++i) pool.push_back(mint.next());
    std::vector<std::vector<std::string>> topic_words(spec.n_topics);
    for (auto& words : topic_words)
        for (int64_t j = 0; j < spec.words_per_topic; ++j)
            words.push_back(pool[rng.index(spec.topic_word_pool)]);

    std::vector<std::string> entities;
    for (int64_t i = 0; i < spec.n_entities; ++i) entities.push_back(mint.next());

    static const char* kRelations[] = {"likes", "plays", "visits"};
    std::vector<KnowledgeFact> kb;
    std::vector<std::vector<std::string>> entity_objects(spec.n_entities);
    for (int64_t e = 0; e < spec.n_entities; ++e) {
        for (int64_t f = 0; f < spec.facts_per_entity; ++f) {
            std::string object = mint.next();
            kb.push_back({entities[e], kRelations[f % 3], object});
            entity_objects[e].push_back(object);
        }
    }

    // one fixed phrase per entity, recurring across videos
    std::vector<std::string> entity_phrase(spec.n_entities);
    for (int64_t e = 0; e < spec.n_entities; ++e)
        entity_phrase[e] = entities[e] + " " + mint.next() + " " + mint.next();

    std::vector<std::string> stage_words;
    for (int64_t s = 0; s < 5; ++s) stage_words.push_back(mint.next());

    // topic centroids
    std::vector<std::vector<double>> centroids(spec.n_topics,
                                               std::vector<double>(spec.feature_dim));
    for (auto& c : centroids)
        for (double& x : c) x = rng.normal(0.0, 1.0);

    // a topic-weighted word draw: earlier words in a topic list are likelier
    auto draw_topic_word = [&](int64_t topic) -> const std::string& {
        const auto& words = topic_words[topic];
        int64_t a = rng.index(static_cast<int64_t>(words.size()));
        int64_t b = rng.index(static_cast<int64_t>(words.size()));
        return words[std::min(a, b)];
    };

    SynthResult result;
    int64_t n_train = spec.n_videos * 8 / 10;
    int64_t n_trainvalid = spec.n_videos * 9 / 10;

    for (int64_t v = 0; v < spec.n_videos; ++v) {
        VideoMeta meta;
        meta.video_id = video_name(v);
        meta.duration_s = spec.duration_s;
        meta.split = v < n_train ? "train" : (v < n_trainvalid ? "valid" : "test");
        meta.feature_path = "features/" + meta.video_id + ".klvf";
        result.corpus.videos.push_back(meta);

        // per-video entity cast, recurring across the whole corpus
        int64_t n_cast = 1 + rng.index(2);
        std::vector<int64_t> cast;
        while (static_cast<int64_t>(cast.size()) < std::min(n_cast, spec.n_entities)) {
            int64_t e = rng.index(spec.n_entities);
            if (std::find(cast.begin(), cast.end(), e) == cast.end()) cast.push_back(e);
        }

        int64_t n_segments = (spec.duration_s + spec.segment_s - 1) / spec.segment_s;
        std::vector<int64_t> segment_topic(n_segments);
        for (auto& t : segment_topic) t = rng.index(spec.n_topics);

        FeatureTable table;
        table.seconds = spec.duration_s;
        table.dim = spec.feature_dim;
        table.values.resize(spec.duration_s * spec.feature_dim);
        for (int64_t t = 0; t < spec.duration_s; ++t) {
            int64_t topic = segment_topic[t / spec.segment_s];
            for (int64_t d = 0; d < spec.feature_dim; ++d)
                table.values[t * spec.feature_dim + d] = static_cast<float>(
                    centroids[topic][d] + spec.feature_noise * rng.normal(0.0, 1.0));
        }
        result.features.emplace(meta.video_id, std::move(table));

        for (int64_t t = 0; t < spec.duration_s; ++t) {
            if (rng.uniform() >= spec.comment_density) continue;
            int64_t topic = segment_topic[t / spec.segment_s];
            int64_t span = spec.max_comments_per_second - spec.min_comments_per_second + 1;
            int64_t k = spec.min_comments_per_second + rng.index(span);
            for (int64_t c = 0; c < k; ++c) {
                int64_t entity = cast[rng.index(static_cast<int64_t>(cast.size()))];
                std::string text;
                if (rng.uniform() < spec.recurring_phrase_rate) {
                    text = entity_phrase[entity];
                } else {
                    std::vector<std::string> words;
                    int64_t len = spec.comment_words_min +
                                  rng.index(spec.comment_words_max - spec.comment_words_min + 1);
                    for (int64_t w = 0; w < len; ++w) words.push_back(draw_topic_word(topic));
                    if (rng.uniform() < spec.entity_mention_rate) {
                        words[rng.index(static_cast<int64_t>(words.size()))] = entities[entity];
                        if (rng.uniform() < spec.fact_object_rate) {
                            const auto& objs = entity_objects[entity];
                            words.push_back(objs[rng.index(static_cast<int64_t>(objs.size()))]);
                        }
                    }
                    if (rng.uniform() < spec.stage_word_rate)
                        words.push_back(stage_words[period_stage(t, spec.duration_s)]);
                    for (size_t w = 0; w < words.size(); ++w) {
                        if (w) text += ' ';
                        text += words[w];
                    }
                }
                result.corpus.comments.push_back({meta.video_id, t, text});
            }
        }
    }

    result.kb = std::move(kb);
    result.corpus.rebuild_index();
    result.corpus.validate();
    return result;
}

void write_synth_dir(const SynthResult& result, const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "features", ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());

    save_comments((fs::path(dir) / "comments.jsonl").string(), result.corpus.comments);
    save_meta((fs::path(dir) / "meta.json").string(), result.corpus.videos);
    save_splits((fs::path(dir) / "splits.json").string(), result.corpus.videos);
    KnowledgeBase::from_facts(result.kb).save_tsv((fs::path(dir) / "kb.tsv").string());
    for (const VideoMeta& v : result.corpus.videos)
        save_features((fs::path(dir) / v.feature_path).string(),
                      result.features.at(v.video_id));
}

}  // namespace klvcg
