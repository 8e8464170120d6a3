#pragma once

#include "klvcg/corpus.hpp"

namespace klvcg {

struct KnowledgeFact {
    std::string entity1;
    std::string relation;
    std::string entity2;

    bool operator==(const KnowledgeFact& o) const {
        return entity1 == o.entity1 && relation == o.relation && entity2 == o.entity2;
    }
};

// Lowercase, trim, collapse internal whitespace. Entity matching is exact
// over this normal form; no fuzzy matching.
std::string normalize_entity(const std::string& s);

class KnowledgeBase {
public:
    static KnowledgeBase from_facts(std::vector<KnowledgeFact> facts);
    static KnowledgeBase load_tsv(const std::string& path);
    void save_tsv(const std::string& path) const;

    const std::vector<KnowledgeFact>& facts() const { return facts_; }
    // Ascending fact indices whose entity1 or entity2 normalizes to the key.
    const std::vector<int64_t>* lookup(const std::string& normalized) const;

private:
    std::vector<KnowledgeFact> facts_;
    std::unordered_map<std::string, std::vector<int64_t>> index_;
};

bool is_stopword(const std::string& token);

struct ScoredTerm {
    std::string term;
    double score;
};

struct KeywordSet {
    std::string video_id;
    std::vector<ScoredTerm> terms;  // score non-increasing, ties lexicographic
};

// Per-video TF-IDF where one document is the concatenation of a video's
// comments: tf = count/total tokens in the video, idf = ln(N_videos/df).
class TfidfModel {
public:
    static TfidfModel build(const Corpus& corpus, const std::vector<std::string>& video_ids);
    static TfidfModel build(const Corpus& corpus);  // statistics over every video

    int64_t num_documents() const { return n_videos_; }
    double idf(const std::string& term) const;
    double score(const std::string& video_id, const std::string& term) const;
    KeywordSet keywords(const std::string& video_id, int64_t top_k = 20) const;

    // TF-IDF weights of an arbitrary token bag under this model's statistics.
    std::unordered_map<std::string, double> vectorize(
        const std::vector<std::string>& tokens) const;
    // Weight map of one modeled video's document.
    std::unordered_map<std::string, double> video_vector(const std::string& video_id) const;

private:
    int64_t n_videos_ = 0;
    std::unordered_map<std::string, int64_t> df_;
    std::unordered_map<std::string, std::unordered_map<std::string, double>> tf_;
};

double tfidf_cosine(const std::unordered_map<std::string, double>& a,
                    const std::unordered_map<std::string, double>& b);

// Keywords in rank order; facts whose entity1/entity2 equals the keyword's
// normal form; deduped; capped at max_facts.
std::vector<KnowledgeFact> link_facts(const KeywordSet& keywords, const KnowledgeBase& kb,
                                      int64_t max_facts = 8);

struct KnowledgeSequence {
    std::vector<int64_t> ids;     // length exactly m
    std::vector<uint8_t> valid;   // 0 on padding
};

// "[CLS] e1 rel e2 [SEP] e1 rel e2 ..." truncated/padded to m. No facts ->
// CLS sentinel + padding.
KnowledgeSequence serialize_facts(const std::vector<KnowledgeFact>& facts,
                                  const Vocabulary& vocab, int64_t m);
// The no-facts sequence: CLS sentinel followed by padding.
KnowledgeSequence empty_knowledge_sequence(int64_t m);

// Distinct comment texts of the source videos with per-video instance
// counts; retrieval matches keyword substrings over normalized text.
class CommentIndex {
public:
    static CommentIndex build(const Corpus& corpus, const std::vector<std::string>& video_ids);

    const std::vector<std::string>& source_videos() const { return sources_; }
    // Ranked by (keyword rank, instance count excluding the query video desc,
    // text lexicographic); at most max_r texts, each containing a keyword.
    std::vector<std::string> retrieve(const KeywordSet& keywords,
                                      const std::string& exclude_video, int64_t max_r = 3) const;

private:
    struct Entry {
        std::string text;
        std::string normalized;
        std::unordered_map<std::string, int64_t> per_video;
        int64_t total = 0;
    };
    std::vector<Entry> entries_;  // sorted by text
    std::vector<std::string> sources_;
};

// Appends retrieved comments round-robin onto the 2l context steps,
// starting at step t-l. The window's own targets are never touched.
ContextWindow augment_context(const ContextWindow& window,
                              const std::vector<std::string>& retrieved);

// ---- offline recall pass -----------------------------------------------------

struct RecallRecord {
    std::string video_id;
    int64_t t = 0;
    std::vector<KnowledgeFact> facts;
    std::vector<std::string> retrieved;
};

struct RecallConfig {
    int64_t top_k = 20;
    int64_t max_facts = 8;
    int64_t max_r = 3;
};

// Keyword/fact/retrieval precomputation for every window of the target
// videos. TF-IDF statistics span the whole corpus; the retrieval source is
// the training split only, and a video never retrieves from itself.
std::vector<RecallRecord> precompute_recall(const Corpus& corpus, const KnowledgeBase& kb,
                                            const std::vector<std::string>& target_videos,
                                            int64_t l, const RecallConfig& cfg = {});

void save_recall(const std::string& path, const std::vector<RecallRecord>& records);
std::vector<RecallRecord> load_recall(const std::string& path);

}  // namespace klvcg
