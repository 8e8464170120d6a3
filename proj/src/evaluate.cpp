#include "klvcg/evaluate.hpp"

#include "klvcg/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <limits>
#include <mutex>
#include <set>
#include <thread>

namespace klvcg {

using nlohmann::json;

// ---- decoding -----------------------------------------------------------------

ModelScorer::ModelScorer(const KlvcgModel& model, const ModelInput& input)
    : model_(&model), rng_(0) {
    NoGradGuard ng;
    PassContext ctx{0.0, &rng_, false};
    context_ = model.encode_context(input, ctx);
}

Tensor ModelScorer::logits(const std::vector<int64_t>& decoder_input) const {
    NoGradGuard ng;
    PassContext ctx{0.0, &rng_, false};
    return model_->decode(context_, decoder_input, DecodeMode::kGeneration, ctx).logits;
}

namespace {

// log-softmax of one logits row, on plain doubles
std::vector<double> row_log_probs(const Tensor& logits, int64_t row) {
    int64_t v = logits.dim(1);
    const auto& d = logits.data();
    const double* x = d.data() + row * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < v; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
    double lz = mx + std::log(z);
    std::vector<double> lp(v);
    for (int64_t j = 0; j < v; ++j) lp[j] = x[j] - lz;
    return lp;
}

struct Hypothesis {
    std::vector<int64_t> words;  // generated tokens; EOS, when present, is last
    double sum = 0.0;
    bool finished = false;

    double mean() const {
        return words.empty() ? 0.0 : sum / static_cast<double>(words.size());
    }
};

bool better(const Hypothesis& a, const Hypothesis& b) {
    double ma = a.mean(), mb = b.mean();
    if (ma != mb) return ma > mb;
    return a.words < b.words;
}

}  // namespace

std::vector<int64_t> beam_search(const SequenceScorer& scorer, int64_t beam_size) {
    if (beam_size < 1) throw ContractError("beam_search: beam size must be >= 1");
    int64_t v = scorer.vocab_size();
    if (v <= Vocabulary::kEos) throw ContractError("beam_search: vocabulary lacks EOS");
    const int64_t word_budget = scorer.max_len() - 1;  // BOS takes one slot

    NoGradGuard ng;
    std::vector<Hypothesis> beams = {Hypothesis{}};
    while (true) {
        std::vector<Hypothesis> pool;
        bool any_live = false;
        for (const Hypothesis& h : beams) {
            if (h.finished) {
                pool.push_back(h);
                continue;
            }
            any_live = true;
            std::vector<int64_t> prefix;
            prefix.reserve(h.words.size() + 1);
            prefix.push_back(Vocabulary::kBos);
            prefix.insert(prefix.end(), h.words.begin(), h.words.end());
            Tensor lg = scorer.logits(prefix);
            std::vector<double> lp = row_log_probs(lg, lg.dim(0) - 1);
            for (int64_t tok = 0; tok < v; ++tok) {
                if (tok == Vocabulary::kPad) continue;  // structurally reserved
                Hypothesis next = h;
                next.words.push_back(tok);
                next.sum += lp[tok];
                next.finished = tok == Vocabulary::kEos ||
                                static_cast<int64_t>(next.words.size()) == word_budget;
                pool.push_back(std::move(next));
            }
        }
        if (!any_live) break;
        std::sort(pool.begin(), pool.end(), better);
        if (static_cast<int64_t>(pool.size()) > beam_size) pool.resize(beam_size);
        beams = std::move(pool);
    }

    const Hypothesis* best = &beams[0];
    for (const Hypothesis& h : beams)
        if (better(h, *best)) best = &h;

    std::vector<int64_t> out;
    out.push_back(Vocabulary::kBos);
    out.insert(out.end(), best->words.begin(), best->words.end());
    return out;
}

std::vector<int64_t> generated_words(const std::vector<int64_t>& tokens) {
    std::vector<int64_t> out;
    size_t i = !tokens.empty() && tokens[0] == Vocabulary::kBos ? 1 : 0;
    for (; i < tokens.size(); ++i) {
        if (tokens[i] == Vocabulary::kEos) break;
        out.push_back(tokens[i]);
    }
    return out;
}

double score_candidate(const SequenceScorer& scorer, const std::vector<int64_t>& words) {
    int64_t keep = std::min<int64_t>(static_cast<int64_t>(words.size()), scorer.max_len() - 1);
    std::vector<int64_t> input, labels;
    input.reserve(keep + 1);
    labels.reserve(keep + 1);
    input.push_back(Vocabulary::kBos);
    for (int64_t i = 0; i < keep; ++i) {
        input.push_back(words[i]);
        labels.push_back(words[i]);
    }
    labels.push_back(Vocabulary::kEos);

    NoGradGuard ng;
    Tensor lg = scorer.logits(input);
    return cross_entropy_logits(lg, labels, kIgnoreId).item();
}

// ---- candidate protocol ---------------------------------------------------------

std::string provenance_tag(Provenance p) {
    switch (p) {
        case Provenance::kGt: return "gt";
        case Provenance::kPopular: return "popular";
        case Provenance::kPlausible: return "plausible";
        case Provenance::kRandom: return "random";
    }
    throw ContractError("unknown provenance value");
}

CandidateBuilder::CandidateBuilder(const Corpus& corpus, const Vocabulary& vocab)
    : vocab_(&vocab) {
    std::vector<std::string> train_ids = corpus.videos_in_split("train");
    if (train_ids.empty()) throw Error("candidate pool: the corpus has no training split");
    tfidf_ = TfidfModel::build(corpus, train_ids);

    std::map<std::string, int64_t> counts;
    for (const CommentRecord& c : corpus.comments)
        if (corpus.meta(c.video_id).split == "train") ++counts[c.text];
    texts_.reserve(counts.size());
    freq_.reserve(counts.size());
    for (const auto& [text, count] : counts) {
        texts_.push_back(text);
        freq_.push_back(count);
    }

    by_freq_.resize(texts_.size());
    for (size_t i = 0; i < texts_.size(); ++i) by_freq_[i] = static_cast<int64_t>(i);
    std::sort(by_freq_.begin(), by_freq_.end(), [&](int64_t a, int64_t b) {
        if (freq_[a] != freq_[b]) return freq_[a] > freq_[b];
        return texts_[a] < texts_[b];
    });

    vectors_.reserve(texts_.size());
    for (const std::string& text : texts_) vectors_.push_back(tfidf_.vectorize(tokenize(text)));
}

CandidateSet CandidateBuilder::build(const ContextWindow& window, Rng& rng) const {
    const std::string where = window.video_id + "@" + std::to_string(window.t);

    CandidateSet set;
    set.video_id = window.video_id;
    set.t = window.t;

    std::set<std::string> used;
    for (const std::string& text : window.targets) {
        if (static_cast<int64_t>(set.candidates.size()) == kGtQuota) break;
        if (!used.insert(text).second) continue;
        set.candidates.push_back(
            {text, vocab_->encode(tokenize(text)), Provenance::kGt, 0.0});
    }
    if (set.candidates.empty())
        throw ContractError("candidates: window " + where + " has no target comments");

    std::vector<int64_t> available;
    for (size_t i = 0; i < texts_.size(); ++i)
        if (!used.count(texts_[i])) available.push_back(static_cast<int64_t>(i));
    int64_t needed = kTotal - static_cast<int64_t>(set.candidates.size());
    if (static_cast<int64_t>(available.size()) < needed)
        throw Error("candidate pool exhausted for window " + where + ": need " +
                    std::to_string(needed) + " distinct non-target training comments, have " +
                    std::to_string(available.size()));

    auto take = [&](int64_t idx, Provenance prov) {
        used.insert(texts_[idx]);
        set.candidates.push_back(
            {texts_[idx], vocab_->encode(tokenize(texts_[idx])), prov, 0.0});
    };

    int64_t taken = 0;
    for (int64_t idx : by_freq_) {
        if (taken == kPopularQuota) break;
        if (used.count(texts_[idx])) continue;
        take(idx, Provenance::kPopular);
        ++taken;
    }

    std::vector<std::string> ctx_tokens;
    for (const auto& step : window.step_comments)
        for (const std::string& text : step) {
            std::vector<std::string> toks = tokenize(text);
            ctx_tokens.insert(ctx_tokens.end(), toks.begin(), toks.end());
        }
    std::unordered_map<std::string, double> ctx_vec = tfidf_.vectorize(ctx_tokens);

    std::vector<std::pair<double, int64_t>> scored;
    for (size_t i = 0; i < texts_.size(); ++i) {
        if (used.count(texts_[i])) continue;
        scored.emplace_back(tfidf_cosine(ctx_vec, vectors_[i]), static_cast<int64_t>(i));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;  // texts_ is lexicographic, so index order is too
    });
    for (int64_t i = 0; i < kPlausibleQuota; ++i) take(scored[i].second, Provenance::kPlausible);

    std::vector<int64_t> rest;
    for (size_t i = 0; i < texts_.size(); ++i)
        if (!used.count(texts_[i])) rest.push_back(static_cast<int64_t>(i));
    int64_t quota = kTotal - static_cast<int64_t>(set.candidates.size());
    for (int64_t j = 0; j < quota; ++j) {
        int64_t k = j + rng.index(static_cast<int64_t>(rest.size()) - j);
        std::swap(rest[j], rest[k]);
        take(rest[j], Provenance::kRandom);
    }

    std::set<std::string> uniq;
    for (const Candidate& c : set.candidates) uniq.insert(c.text);
    if (static_cast<int64_t>(set.candidates.size()) != kTotal ||
        static_cast<int64_t>(uniq.size()) != kTotal)
        throw Error("candidate set for window " + where + " is not 100 unique texts");
    return set;
}

// ---- metric reduction -------------------------------------------------------------

EvalReport rank_and_metrics(const std::vector<CandidateSet>& scored) {
    if (scored.empty()) throw ContractError("rank_and_metrics: no windows");

    EvalReport r;
    r.windows = static_cast<int64_t>(scored.size());
    double sum1 = 0.0, sum5 = 0.0, sum10 = 0.0, mr_sum = 0.0, mrr_sum = 0.0;
    int64_t gt_total = 0;

    for (const CandidateSet& set : scored) {
        const std::string where = set.video_id + "@" + std::to_string(set.t);
        if (set.candidates.empty())
            throw ContractError("rank_and_metrics: window " + where + " has no candidates");
        for (const Candidate& c : set.candidates)
            if (!std::isfinite(c.score))
                throw Error("rank_and_metrics: non-finite score in window " + where);

        std::vector<int64_t> order(set.candidates.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
        std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            double sa = set.candidates[a].score, sb = set.candidates[b].score;
            if (sa != sb) return sa < sb;
            return a < b;
        });

        std::vector<int64_t> gt_ranks;
        for (size_t p = 0; p < order.size(); ++p)
            if (set.candidates[order[p]].provenance == Provenance::kGt)
                gt_ranks.push_back(static_cast<int64_t>(p) + 1);
        if (gt_ranks.empty())
            throw ContractError("rank_and_metrics: window " + where +
                                " has no ground-truth candidates");

        auto recall_at = [&](int64_t k) {
            int64_t hits = 0;
            for (int64_t rank : gt_ranks)
                if (rank <= k) ++hits;
            int64_t denom = std::min<int64_t>(k, static_cast<int64_t>(gt_ranks.size()));
            return 100.0 * static_cast<double>(hits) / static_cast<double>(denom);
        };
        sum1 += recall_at(1);
        sum5 += recall_at(5);
        sum10 += recall_at(10);
        for (int64_t rank : gt_ranks) {
            mr_sum += static_cast<double>(rank);
            mrr_sum += 1.0 / static_cast<double>(rank);
            ++gt_total;
        }
        r.details.push_back({set.video_id, set.t, gt_ranks});
    }

    double w = static_cast<double>(r.windows);
    r.r_at_1 = sum1 / w;
    r.r_at_5 = sum5 / w;
    r.r_at_10 = sum10 / w;
    r.mean_rank = mr_sum / static_cast<double>(gt_total);
    r.mrr = mrr_sum / static_cast<double>(gt_total);
    return r;
}

std::string to_json(const EvalReport& r) {
    json j{{"r_at_1", r.r_at_1},  {"r_at_5", r.r_at_5}, {"r_at_10", r.r_at_10},
           {"mr", r.mean_rank},   {"mrr", r.mrr},       {"windows", r.windows}};
    return j.dump(2) + "\n";
}

std::string format_report(const EvalReport& r) {
    char buf[64];
    std::string out;
    auto line = [&](const char* name, double value) {
        std::snprintf(buf, sizeof(buf), "%-8s %10.4f\n", name, value);
        out += buf;
    };
    line("R@1", r.r_at_1);
    line("R@5", r.r_at_5);
    line("R@10", r.r_at_10);
    line("MR", r.mean_rank);
    line("MRR", r.mrr);
    std::snprintf(buf, sizeof(buf), "%-8s %10lld\n", "windows",
                  static_cast<long long>(r.windows));
    out += buf;
    return out;
}

std::string details_jsonl(const EvalReport& r) {
    std::string out;
    for (const WindowRanking& w : r.details) {
        json j{{"video_id", w.video_id}, {"t", w.t}, {"gt_ranks", w.gt_ranks}};
        out += j.dump();
        out += "\n";
    }
    return out;
}

// ---- sparse context ----------------------------------------------------------------

ContextWindow sparse_context(const ContextWindow& window, double density, Rng& rng) {
    if (density <= 0.0 || density > 1.0)
        throw ConfigError("sparse_context: density must lie in (0, 1]");
    if (density == 1.0) return window;
    ContextWindow out = window;
    for (auto& comments : out.step_comments) {
        std::vector<std::string> kept;
        for (std::string& text : comments)
            if (rng.uniform() < density) kept.push_back(std::move(text));
        comments = std::move(kept);
    }
    return out;
}

// ---- split-level drivers -------------------------------------------------------------

namespace {

struct WindowTask {
    std::string video_id;
    ContextWindow window;
};

std::vector<WindowTask> split_windows(
    const Corpus& corpus, const std::unordered_map<std::string, FeatureTable>& features,
    int64_t l, const std::string& split) {
    std::vector<WindowTask> tasks;
    for (const std::string& vid : corpus.videos_in_split(split)) {
        if (!features.count(vid))
            throw ContractError("evaluate: no feature table for video '" + vid + "'");
        for (ContextWindow& win : build_windows(corpus, vid, l))
            tasks.push_back({vid, std::move(win)});
    }
    if (tasks.empty()) throw ContractError("evaluate: split '" + split + "' has no windows");
    return tasks;
}

using RecallMap =
    std::unordered_map<std::string, std::unordered_map<int64_t, const RecallRecord*>>;

RecallMap index_recall(const std::vector<RecallRecord>& recall) {
    RecallMap map;
    for (const RecallRecord& rec : recall) map[rec.video_id][rec.t] = &rec;
    return map;
}

const RecallRecord& recall_for(const RecallMap& map, const std::string& vid, int64_t t) {
    auto vit = map.find(vid);
    if (vit != map.end()) {
        auto tit = vit->second.find(t);
        if (tit != vit->second.end()) return *tit->second;
    }
    throw ContractError("evaluate: no recall record for '" + vid + "' at t=" +
                        std::to_string(t));
}

// Runs fn(i) for every task index across `threads` workers; the first
// exception wins and is rethrown on the caller.
void parallel_for(int64_t count, int64_t threads, const std::function<void(int64_t)>& fn) {
    if (threads <= 1) {
        for (int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::mutex mu;
    std::exception_ptr first;
    auto worker = [&] {
        while (true) {
            int64_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first) first = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    int64_t n = std::min<int64_t>(threads, count);
    pool.reserve(n);
    for (int64_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
    if (first) std::rethrow_exception(first);
}

}  // namespace

EvalReport evaluate_split(const KlvcgModel& model, const Corpus& corpus,
                          const std::unordered_map<std::string, FeatureTable>& features,
                          const std::vector<RecallRecord>& recall, const Vocabulary& vocab,
                          const std::string& split, const EvalOptions& opts) {
    const ModelConfig& cfg = model.config();
    CandidateBuilder builder(corpus, vocab);
    RecallMap rmap = index_recall(recall);
    std::vector<WindowTask> tasks = split_windows(corpus, features, cfg.l, split);

    std::vector<CandidateSet> results(tasks.size());
    parallel_for(static_cast<int64_t>(tasks.size()), opts.threads, [&](int64_t i) {
        const WindowTask& task = tasks[i];
        Rng wrng(opts.seed ^ fnv1a(task.video_id + "@" + std::to_string(task.window.t)));
        ContextWindow sw = sparse_context(task.window, opts.density, wrng);
        CandidateSet set = builder.build(sw, wrng);

        const RecallRecord& rec = recall_for(rmap, task.video_id, task.window.t);
        KnowledgeSequence k = serialize_facts(rec.facts, vocab, cfg.m);
        ModelInput input =
            assemble_input(sw, features.at(task.video_id), vocab, k, rec.retrieved, cfg);
        ModelScorer scorer(model, input);
        for (Candidate& c : set.candidates) c.score = score_candidate(scorer, c.ids);
        results[i] = std::move(set);
    });
    return rank_and_metrics(results);
}

std::vector<GeneratedComment> generate_split(
    const KlvcgModel& model, const Corpus& corpus,
    const std::unordered_map<std::string, FeatureTable>& features,
    const std::vector<RecallRecord>& recall, const Vocabulary& vocab, const std::string& split,
    const EvalOptions& opts) {
    const ModelConfig& cfg = model.config();
    RecallMap rmap = index_recall(recall);
    std::vector<WindowTask> tasks = split_windows(corpus, features, cfg.l, split);

    std::vector<GeneratedComment> results(tasks.size());
    parallel_for(static_cast<int64_t>(tasks.size()), opts.threads, [&](int64_t i) {
        const WindowTask& task = tasks[i];
        Rng wrng(opts.seed ^ fnv1a(task.video_id + "@" + std::to_string(task.window.t)));
        ContextWindow sw = sparse_context(task.window, opts.density, wrng);

        const RecallRecord& rec = recall_for(rmap, task.video_id, task.window.t);
        KnowledgeSequence k = serialize_facts(rec.facts, vocab, cfg.m);
        ModelInput input =
            assemble_input(sw, features.at(task.video_id), vocab, k, rec.retrieved, cfg);
        ModelScorer scorer(model, input);

        std::vector<int64_t> tokens = beam_search(scorer, opts.beam);
        std::string text;
        for (int64_t id : generated_words(tokens)) {
            if (!text.empty()) text += ' ';
            text += vocab.token(id);
        }
        results[i] = {task.video_id, task.window.t, text};
    });
    return results;
}

}  // namespace klvcg
