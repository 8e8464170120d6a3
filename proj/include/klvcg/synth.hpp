#pragma once

#include "klvcg/knowledge.hpp"

namespace klvcg {

// Knobs for the synthetic desk-scale corpus. Each video is a sequence of
// topic segments; feature vectors are topic centroids plus noise; comments
// mix topic words with entity mentions, fact objects (knowledge signal),
// recurring cross-video phrases (retrieval signal), and stage words
// (viewing-period signal).
struct SynthSpec {
    int64_t n_videos = 10;
    int64_t duration_s = 80;
    int64_t feature_dim = 32;

    int64_t n_topics = 5;
    int64_t segment_s = 20;
    int64_t topic_word_pool = 60;
    int64_t words_per_topic = 12;

    double comment_density = 0.6;  // probability a second bears comments
    int64_t min_comments_per_second = 1;
    int64_t max_comments_per_second = 3;
    int64_t comment_words_min = 3;
    int64_t comment_words_max = 6;

    int64_t n_entities = 8;
    int64_t facts_per_entity = 2;
    double entity_mention_rate = 0.5;   // comments naming one of the video's entities
    double fact_object_rate = 0.6;      // of those, also containing a fact object
    double recurring_phrase_rate = 0.2; // comments that are an entity's fixed phrase
    double stage_word_rate = 0.3;       // comments carrying a viewing-stage word

    double feature_noise = 0.1;
};

struct SynthResult {
    Corpus corpus;
    std::unordered_map<std::string, FeatureTable> features;
    std::vector<KnowledgeFact> kb;
};

// Fully determined by (seed, spec); byte-identical across runs and platforms.
SynthResult synthesize_corpus(uint64_t seed, const SynthSpec& spec);

// Writes comments.jsonl, meta.json, splits.json, kb.tsv, features/<id>.klvf.
void write_synth_dir(const SynthResult& result, const std::string& dir);

}  // namespace klvcg
