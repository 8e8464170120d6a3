#include "klvcg/knowledge.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_set>

namespace klvcg {

using nlohmann::json;

std::string normalize_entity(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char ch : s) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c + 0x20) : ch);
    }
    return out;
}

KnowledgeBase KnowledgeBase::from_facts(std::vector<KnowledgeFact> facts) {
    KnowledgeBase kb;
    kb.facts_ = std::move(facts);
    for (size_t i = 0; i < kb.facts_.size(); ++i) {
        const KnowledgeFact& f = kb.facts_[i];
        std::string e1 = normalize_entity(f.entity1);
        std::string rel = normalize_entity(f.relation);
        std::string e2 = normalize_entity(f.entity2);
        if (e1.empty() || rel.empty() || e2.empty())
            throw IoError("knowledge fact " + std::to_string(i) +
                          " has an empty field after normalization");
        auto add = [&](const std::string& key) {
            auto& v = kb.index_[key];
            if (v.empty() || v.back() != static_cast<int64_t>(i))
                v.push_back(static_cast<int64_t>(i));
        };
        add(e1);
        add(e2);
    }
    return kb;
}

KnowledgeBase KnowledgeBase::load_tsv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open knowledge base: " + path);
    std::vector<KnowledgeFact> facts;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        size_t tab1 = line.find('\t');
        size_t tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
        if (tab1 == std::string::npos || tab2 == std::string::npos ||
            line.find('\t', tab2 + 1) != std::string::npos)
            throw IoError("knowledge base " + path + ":" + std::to_string(line_no) +
                          ": expected exactly three tab-separated fields");
        facts.push_back({line.substr(0, tab1), line.substr(tab1 + 1, tab2 - tab1 - 1),
                         line.substr(tab2 + 1)});
    }
    return from_facts(std::move(facts));
}

void KnowledgeBase::save_tsv(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    for (const KnowledgeFact& f : facts_)
        os << f.entity1 << '\t' << f.relation << '\t' << f.entity2 << '\n';
    if (!os) throw IoError("write failed: " + path);
}

const std::vector<int64_t>* KnowledgeBase::lookup(const std::string& normalized) const {
    auto it = index_.find(normalized);
    return it == index_.end() ? nullptr : &it->second;
}

bool is_stopword(const std::string& token) {
    static const std::unordered_set<std::string> kStopwords = {
        "a",    "an",   "and",  "are", "as",   "at",   "be",   "but", "by",   "for", "from",
        "had",  "has",  "have", "he",  "her",  "his",  "i",    "if",  "in",   "is",  "it",
        "its",  "me",   "my",   "no",  "not",  "of",   "on",   "or",  "our",  "she", "so",
        "that", "the",  "their", "them", "they", "this", "to",  "too", "was",  "we",  "were",
        "what", "will", "with", "you", "your"};
    return kStopwords.count(token) > 0;
}

TfidfModel TfidfModel::build(const Corpus& corpus, const std::vector<std::string>& video_ids) {
    if (video_ids.empty()) throw Error("tf-idf: no videos given");
    TfidfModel model;
    model.n_videos_ = static_cast<int64_t>(video_ids.size());

    int64_t total_tokens = 0;
    for (const std::string& vid : video_ids) {
        corpus.meta(vid);  // existence check
        std::unordered_map<std::string, int64_t> counts;
        int64_t total = 0;
        auto it = corpus.by_video_time.find(vid);
        if (it != corpus.by_video_time.end()) {
            for (const auto& [t, idxs] : it->second)
                for (int64_t idx : idxs)
                    for (const std::string& tok : tokenize(corpus.comments[idx].text)) {
                        ++counts[tok];
                        ++total;
                    }
        }
        total_tokens += total;
        auto& tf = model.tf_[vid];
        for (auto& [tok, count] : counts) {
            tf[tok] = static_cast<double>(count) / static_cast<double>(total);
            ++model.df_[tok];
        }
    }
    if (total_tokens == 0) throw Error("tf-idf: corpus holds no tokens");
    return model;
}

TfidfModel TfidfModel::build(const Corpus& corpus) {
    std::vector<std::string> ids;
    ids.reserve(corpus.videos.size());
    for (const VideoMeta& v : corpus.videos) ids.push_back(v.video_id);
    return build(corpus, ids);
}

double TfidfModel::idf(const std::string& term) const {
    auto it = df_.find(term);
    if (it == df_.end()) return 0.0;
    return std::log(static_cast<double>(n_videos_) / static_cast<double>(it->second));
}

double TfidfModel::score(const std::string& video_id, const std::string& term) const {
    auto vit = tf_.find(video_id);
    if (vit == tf_.end()) throw Error("tf-idf: video not in model: " + video_id);
    auto tit = vit->second.find(term);
    if (tit == vit->second.end()) return 0.0;
    return tit->second * idf(term);
}

KeywordSet TfidfModel::keywords(const std::string& video_id, int64_t top_k) const {
    if (top_k < 1) throw ConfigError("keywords: top_k must be >= 1");
    auto vit = tf_.find(video_id);
    if (vit == tf_.end()) throw Error("tf-idf: video not in model: " + video_id);
    std::vector<ScoredTerm> terms;
    for (const auto& [term, tf] : vit->second) {
        if (is_stopword(term)) continue;
        double s = tf * idf(term);
        if (s > 0.0) terms.push_back({term, s});
    }
    std::sort(terms.begin(), terms.end(), [](const ScoredTerm& a, const ScoredTerm& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.term < b.term;
    });
    if (static_cast<int64_t>(terms.size()) > top_k) terms.resize(top_k);
    return {video_id, std::move(terms)};
}

std::unordered_map<std::string, double> TfidfModel::vectorize(
    const std::vector<std::string>& tokens) const {
    std::unordered_map<std::string, double> out;
    if (tokens.empty()) return out;
    std::unordered_map<std::string, int64_t> counts;
    for (const std::string& t : tokens) ++counts[t];
    for (auto& [term, count] : counts) {
        double w = (static_cast<double>(count) / tokens.size()) * idf(term);
        if (w > 0.0) out[term] = w;
    }
    return out;
}

std::unordered_map<std::string, double> TfidfModel::video_vector(
    const std::string& video_id) const {
    auto vit = tf_.find(video_id);
    if (vit == tf_.end()) throw Error("tf-idf: video not in model: " + video_id);
    std::unordered_map<std::string, double> out;
    for (const auto& [term, tf] : vit->second) {
        double w = tf * idf(term);
        if (w > 0.0) out[term] = w;
    }
    return out;
}

double tfidf_cosine(const std::unordered_map<std::string, double>& a,
                    const std::unordered_map<std::string, double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (auto& [k, v] : a) {
        na += v * v;
        auto it = b.find(k);
        if (it != b.end()) dot += v * it->second;
    }
    for (auto& [k, v] : b) nb += v * v;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<KnowledgeFact> link_facts(const KeywordSet& keywords, const KnowledgeBase& kb,
                                      int64_t max_facts) {
    if (max_facts < 1) throw ConfigError("link_facts: max_facts must be >= 1");
    std::vector<KnowledgeFact> out;
    std::set<int64_t> used;
    for (const ScoredTerm& kw : keywords.terms) {
        const std::vector<int64_t>* hits = kb.lookup(normalize_entity(kw.term));
        if (!hits) continue;
        for (int64_t idx : *hits) {
            if (static_cast<int64_t>(out.size()) >= max_facts) return out;
            if (used.insert(idx).second) out.push_back(kb.facts()[idx]);
        }
        if (static_cast<int64_t>(out.size()) >= max_facts) return out;
    }
    return out;
}

KnowledgeSequence serialize_facts(const std::vector<KnowledgeFact>& facts,
                                  const Vocabulary& vocab, int64_t m) {
    if (m < 1) throw ConfigError("knowledge sequence length m must be >= 1");
    std::vector<int64_t> ids;
    ids.push_back(Vocabulary::kCls);
    for (size_t i = 0; i < facts.size(); ++i) {
        if (i > 0) ids.push_back(Vocabulary::kSep);
        std::string rendered = facts[i].entity1 + " " + facts[i].relation + " " +
                               facts[i].entity2;
        for (int64_t id : vocab.encode_text(rendered)) ids.push_back(id);
    }
    if (static_cast<int64_t>(ids.size()) > m) ids.resize(m);
    KnowledgeSequence seq;
    seq.ids = std::move(ids);
    seq.valid.assign(seq.ids.size(), 1);
    while (static_cast<int64_t>(seq.ids.size()) < m) {
        seq.ids.push_back(Vocabulary::kPad);
        seq.valid.push_back(0);
    }
    return seq;
}

KnowledgeSequence empty_knowledge_sequence(int64_t m) {
    if (m < 1) throw ConfigError("knowledge sequence length m must be >= 1");
    KnowledgeSequence seq;
    seq.ids.assign(m, Vocabulary::kPad);
    seq.valid.assign(m, 0);
    seq.ids[0] = Vocabulary::kCls;
    seq.valid[0] = 1;
    return seq;
}

CommentIndex CommentIndex::build(const Corpus& corpus, const std::vector<std::string>& video_ids) {
    CommentIndex index;
    index.sources_ = video_ids;
    std::map<std::string, Entry> by_text;  // ordered -> deterministic entries_
    std::unordered_set<std::string> wanted(video_ids.begin(), video_ids.end());
    for (const std::string& vid : video_ids) corpus.meta(vid);  // existence check
    for (const CommentRecord& c : corpus.comments) {
        if (!wanted.count(c.video_id)) continue;
        Entry& e = by_text[c.text];
        if (e.text.empty()) {
            e.text = c.text;
            e.normalized = normalize_entity(c.text);
        }
        ++e.per_video[c.video_id];
        ++e.total;
    }
    index.entries_.reserve(by_text.size());
    for (auto& [text, entry] : by_text) index.entries_.push_back(std::move(entry));
    return index;
}

std::vector<std::string> CommentIndex::retrieve(const KeywordSet& keywords,
                                                const std::string& exclude_video,
                                                int64_t max_r) const {
    if (max_r < 1) throw ConfigError("retrieve: max_r must be >= 1");
    struct Hit {
        int64_t keyword_rank;
        int64_t freq;
        const std::string* text;
    };
    std::vector<Hit> hits;
    std::unordered_set<const Entry*> seen;
    for (size_t rank = 0; rank < keywords.terms.size(); ++rank) {
        std::string needle = normalize_entity(keywords.terms[rank].term);
        if (needle.empty()) continue;
        for (const Entry& e : entries_) {
            if (seen.count(&e)) continue;
            if (e.normalized.find(needle) == std::string::npos) continue;
            int64_t freq = e.total;
            auto it = e.per_video.find(exclude_video);
            if (it != e.per_video.end()) freq -= it->second;
            if (freq <= 0) continue;
            hits.push_back({static_cast<int64_t>(rank), freq, &e.text});
            seen.insert(&e);
        }
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
        if (a.keyword_rank != b.keyword_rank) return a.keyword_rank < b.keyword_rank;
        if (a.freq != b.freq) return a.freq > b.freq;
        return *a.text < *b.text;
    });
    std::vector<std::string> out;
    for (const Hit& h : hits) {
        if (static_cast<int64_t>(out.size()) >= max_r) break;
        out.push_back(*h.text);
    }
    return out;
}

ContextWindow augment_context(const ContextWindow& window,
                              const std::vector<std::string>& retrieved) {
    ContextWindow out = window;
    if (out.step_comments.empty()) {
        if (!retrieved.empty())
            throw ContractError("augment_context: window has no context steps");
        return out;
    }
    for (size_t i = 0; i < retrieved.size(); ++i)
        out.step_comments[i % out.step_comments.size()].push_back(retrieved[i]);
    return out;
}

std::vector<RecallRecord> precompute_recall(const Corpus& corpus, const KnowledgeBase& kb,
                                            const std::vector<std::string>& target_videos,
                                            int64_t l, const RecallConfig& cfg) {
    std::vector<std::string> all_ids;
    for (const VideoMeta& v : corpus.videos) all_ids.push_back(v.video_id);
    TfidfModel tfidf = TfidfModel::build(corpus, all_ids);

    std::vector<std::string> sources = corpus.videos_in_split("train");
    for (const std::string& s : sources) {
        const std::string& split = corpus.meta(s).split;
        if (split != "train")
            throw ContractError("retrieval source " + s + " is tagged '" + split + "'");
    }
    CommentIndex index = CommentIndex::build(corpus, sources);

    std::vector<RecallRecord> records;
    for (const std::string& vid : target_videos) {
        KeywordSet kw = tfidf.keywords(vid, cfg.top_k);
        std::vector<KnowledgeFact> facts = link_facts(kw, kb, cfg.max_facts);
        std::vector<std::string> retrieved = index.retrieve(kw, vid, cfg.max_r);
        for (const ContextWindow& w : build_windows(corpus, vid, l))
            records.push_back({vid, w.t, facts, retrieved});
    }
    return records;
}

void save_recall(const std::string& path, const std::vector<RecallRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    for (const RecallRecord& r : records) {
        json facts = json::array();
        for (const KnowledgeFact& f : r.facts)
            facts.push_back(json::array({f.entity1, f.relation, f.entity2}));
        json rec = {{"video_id", r.video_id}, {"t", r.t}, {"facts", facts},
                    {"retrieved", r.retrieved}};
        os << rec.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

std::vector<RecallRecord> load_recall(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open recall file: " + path);
    std::vector<RecallRecord> out;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            json rec = json::parse(line);
            RecallRecord r;
            r.video_id = rec.at("video_id").get<std::string>();
            r.t = rec.at("t").get<int64_t>();
            for (const json& f : rec.at("facts"))
                r.facts.push_back({f.at(0).get<std::string>(), f.at(1).get<std::string>(),
                                   f.at(2).get<std::string>()});
            for (const json& s : rec.at("retrieved")) r.retrieved.push_back(s.get<std::string>());
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw IoError("bad recall record at " + path + ":" + std::to_string(line_no) + ": " +
                          e.what());
        }
    }
    return out;
}

}  // namespace klvcg
