#pragma once

#include "klvcg/model.hpp"

namespace klvcg {

// ---- decoding against a fixed context -----------------------------------------

// Next-token interface shared by beam search and candidate scoring. The
// decoder input always starts with BOS; row i of the result scores the token
// following position i.
class SequenceScorer {
public:
    virtual ~SequenceScorer() = default;
    virtual Tensor logits(const std::vector<int64_t>& decoder_input) const = 0;
    virtual int64_t vocab_size() const = 0;
    virtual int64_t max_len() const = 0;  // decoder budget, BOS included
};

// Binds a model to one assembled input. The context is encoded once up
// front; every logits() call runs only the decoder, without gradients.
class ModelScorer : public SequenceScorer {
public:
    ModelScorer(const KlvcgModel& model, const ModelInput& input);

    Tensor logits(const std::vector<int64_t>& decoder_input) const override;
    int64_t vocab_size() const override { return model_->config().vocab_size; }
    int64_t max_len() const override { return model_->config().g; }

private:
    const KlvcgModel* model_;
    Tensor context_;
    mutable Rng rng_;  // never drawn from: dropout is off at evaluation time
};

// Standard beam search from BOS. A hypothesis finishes on EOS or at the
// length budget; hypotheses are ranked by mean log-probability per generated
// token (EOS included), ties broken by lexicographic token order. Returns
// the winner as [BOS, words..., EOS?] — EOS present iff generated in budget.
// PAD is never proposed.
std::vector<int64_t> beam_search(const SequenceScorer& scorer, int64_t beam_size = 5);

// Generated words only: the ids strictly between BOS and the end/EOS.
std::vector<int64_t> generated_words(const std::vector<int64_t>& tokens);

// Teacher-forced mean cross-entropy per candidate token, terminal EOS
// included. Words beyond the decoder budget are dropped first.
double score_candidate(const SequenceScorer& scorer, const std::vector<int64_t>& words);

// ---- the 100-candidate ranking protocol ----------------------------------------

enum class Provenance { kGt, kPopular, kPlausible, kRandom };
std::string provenance_tag(Provenance p);

struct Candidate {
    std::string text;
    std::vector<int64_t> ids;  // encoded words, no BOS/EOS
    Provenance provenance = Provenance::kRandom;
    double score = 0.0;  // mean per-token CE; lower ranks higher
};

struct CandidateSet {
    std::string video_id;
    int64_t t = 0;
    std::vector<Candidate> candidates;  // exactly 100, texts unique
};

// Builds per-window candidate sets from the training-split comment pool:
// up to 5 ground-truth texts, the 20 most frequent pool texts (ties
// lexicographic), the 20 highest TF-IDF-cosine matches to the window's
// context comments, and seeded random picks to reach 100. Texts never
// repeat across groups; a ground-truth shortfall grows the random quota.
class CandidateBuilder {
public:
    static constexpr int64_t kTotal = 100;
    static constexpr int64_t kGtQuota = 5;
    static constexpr int64_t kPopularQuota = 20;
    static constexpr int64_t kPlausibleQuota = 20;

    CandidateBuilder(const Corpus& corpus, const Vocabulary& vocab);

    // Throws Error naming the shortfall when the pool cannot reach 100.
    CandidateSet build(const ContextWindow& window, Rng& rng) const;

    int64_t pool_size() const { return static_cast<int64_t>(texts_.size()); }

private:
    const Vocabulary* vocab_;
    std::vector<std::string> texts_;  // distinct train texts, lexicographic
    std::vector<int64_t> freq_;       // instance counts, aligned with texts_
    std::vector<int64_t> by_freq_;    // indices by (count desc, text asc)
    TfidfModel tfidf_;
    std::vector<std::unordered_map<std::string, double>> vectors_;
};

// ---- metric reduction -----------------------------------------------------------

struct WindowRanking {
    std::string video_id;
    int64_t t = 0;
    std::vector<int64_t> gt_ranks;  // 1-based, ascending
};

struct EvalReport {
    double r_at_1 = 0.0, r_at_5 = 0.0, r_at_10 = 0.0;  // percent
    double mean_rank = 0.0;
    double mrr = 0.0;
    int64_t windows = 0;
    std::vector<WindowRanking> details;
};

// Sorts every set ascending by score (stable: ties keep candidate order),
// ranks 1-based. R@k averages |gt in top-k| / min(k, #gt) over windows; MR
// and MRR average over every ground-truth candidate.
EvalReport rank_and_metrics(const std::vector<CandidateSet>& scored);

std::string to_json(const EvalReport& r);       // summary document
std::string format_report(const EvalReport& r); // aligned text table
std::string details_jsonl(const EvalReport& r); // one row per window

// ---- sparse-context robustness ---------------------------------------------------

// Keeps each context comment independently with probability `density`;
// target comments are untouched. density 1.0 returns the window unchanged
// without consuming randomness.
ContextWindow sparse_context(const ContextWindow& window, double density, Rng& rng);

// ---- split-level drivers ----------------------------------------------------------

struct EvalOptions {
    double density = 1.0;
    uint64_t seed = 1;
    int64_t threads = 1;
    int64_t beam = 5;  // generation only
};

// Ranks the candidate protocol over every window of the split. Each window
// derives its own RNG stream from (seed, video, t) and results are reduced
// in window order, so thread count never changes the outcome.
EvalReport evaluate_split(const KlvcgModel& model, const Corpus& corpus,
                          const std::unordered_map<std::string, FeatureTable>& features,
                          const std::vector<RecallRecord>& recall, const Vocabulary& vocab,
                          const std::string& split, const EvalOptions& opts);

struct GeneratedComment {
    std::string video_id;
    int64_t t = 0;
    std::string text;
};

// Beam-searches one comment per window of the split.
std::vector<GeneratedComment> generate_split(
    const KlvcgModel& model, const Corpus& corpus,
    const std::unordered_map<std::string, FeatureTable>& features,
    const std::vector<RecallRecord>& recall, const Vocabulary& vocab, const std::string& split,
    const EvalOptions& opts);

}  // namespace klvcg
