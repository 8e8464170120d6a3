#include "klvcg/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace klvcg {

using nlohmann::json;

// ---- tokenizer --------------------------------------------------------------

namespace {

constexpr uint32_t kReplacement = 0xFFFD;

std::vector<uint32_t> decode_utf8(const std::string& s) {
    std::vector<uint32_t> cps;
    cps.reserve(s.size());
    size_t i = 0;
    while (i < s.size()) {
        unsigned char b0 = s[i];
        uint32_t cp = kReplacement;
        size_t len = 1;
        if (b0 < 0x80) {
            cp = b0;
        } else if ((b0 >> 5) == 0x6 && i + 1 < s.size() && (s[i + 1] & 0xC0) == 0x80) {
            cp = (b0 & 0x1F) << 6 | (s[i + 1] & 0x3F);
            len = 2;
            if (cp < 0x80) cp = kReplacement;
        } else if ((b0 >> 4) == 0xE && i + 2 < s.size() && (s[i + 1] & 0xC0) == 0x80 &&
                   (s[i + 2] & 0xC0) == 0x80) {
            cp = (b0 & 0x0F) << 12 | (s[i + 1] & 0x3F) << 6 | (s[i + 2] & 0x3F);
            len = 3;
            if (cp < 0x800 || (cp >= 0xD800 && cp <= 0xDFFF)) cp = kReplacement;
        } else if ((b0 >> 3) == 0x1E && i + 3 < s.size() && (s[i + 1] & 0xC0) == 0x80 &&
                   (s[i + 2] & 0xC0) == 0x80 && (s[i + 3] & 0xC0) == 0x80) {
            cp = (b0 & 0x07) << 18 | (s[i + 1] & 0x3F) << 12 | (s[i + 2] & 0x3F) << 6 |
                 (s[i + 3] & 0x3F);
            len = 4;
            if (cp < 0x10000 || cp > 0x10FFFF) cp = kReplacement;
        }
        cps.push_back(cp);
        i += len;
    }
    return cps;
}

void encode_utf8(uint32_t cp, std::string& out) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

bool is_space_cp(uint32_t c) {
    switch (c) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return c >= 0x2000 && c <= 0x200A;
    }
}

bool is_punct_cp(uint32_t c) {
    if (c < 0x80)
        return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
               (c >= 0x7B && c <= 0x7E);
    if (c >= 0xA1 && c <= 0xBF) return true;           // Latin-1 punctuation block
    if (c == 0xD7 || c == 0xF7) return true;           // multiplication/division signs
    if (c >= 0x2010 && c <= 0x205E) return !is_space_cp(c);  // general punctuation
    if (c >= 0x3001 && c <= 0x303F) return true;       // CJK punctuation
    if (c == 0x30FB) return true;                      // katakana middle dot
    if (c >= 0xFE30 && c <= 0xFE4F) return true;       // CJK compatibility forms
    if (c >= 0xFF01 && c <= 0xFF0F) return true;       // fullwidth ASCII punct ranges
    if (c >= 0xFF1A && c <= 0xFF20) return true;
    if (c >= 0xFF3B && c <= 0xFF40) return true;
    if (c >= 0xFF5B && c <= 0xFF65) return true;
    return false;
}

bool is_cjk_cp(uint32_t c) {
    return (c >= 0x3040 && c <= 0x30FF && c != 0x30FB) ||  // hiragana + katakana
           (c >= 0x3400 && c <= 0x4DBF) ||                 // ideograph extension A
           (c >= 0x4E00 && c <= 0x9FFF) ||                 // unified ideographs
           (c >= 0xF900 && c <= 0xFAFF) ||                 // compatibility ideographs
           (c >= 0xAC00 && c <= 0xD7AF) ||                 // hangul syllables
           (c >= 0x20000 && c <= 0x2A6DF);                 // ideograph extension B
}

uint32_t lower_cp(uint32_t c) {
    if (c >= 'A' && c <= 'Z') return c + 0x20;
    if (c >= 0xC0 && c <= 0xDE && c != 0xD7) return c + 0x20;  // Latin-1 uppercase
    return c;
}

bool is_combining(uint32_t c) { return c >= 0x0300 && c <= 0x036F; }

// Canonical composition for the frequent Latin base+mark pairs; everything
// else keeps its combining mark inline. Full Unicode normalization is out of
// scope for this artifact.
uint32_t compose(uint32_t base, uint32_t mark) {
    switch (mark) {
        case 0x0300:  // grave
            switch (base) { case 'a': return 0xE0; case 'e': return 0xE8; case 'i': return 0xEC;
                            case 'o': return 0xF2; case 'u': return 0xF9; }
            break;
        case 0x0301:  // acute
            switch (base) { case 'a': return 0xE1; case 'e': return 0xE9; case 'i': return 0xED;
                            case 'o': return 0xF3; case 'u': return 0xFA; case 'y': return 0xFD; }
            break;
        case 0x0302:  // circumflex
            switch (base) { case 'a': return 0xE2; case 'e': return 0xEA; case 'i': return 0xEE;
                            case 'o': return 0xF4; case 'u': return 0xFB; }
            break;
        case 0x0303:  // tilde
            switch (base) { case 'a': return 0xE3; case 'n': return 0xF1; case 'o': return 0xF5; }
            break;
        case 0x0308:  // diaeresis
            switch (base) { case 'a': return 0xE4; case 'e': return 0xEB; case 'i': return 0xEF;
                            case 'o': return 0xF6; case 'u': return 0xFC; case 'y': return 0xFF; }
            break;
        case 0x030A:  // ring
            if (base == 'a') return 0xE5;
            break;
        case 0x0327:  // cedilla
            if (base == 'c') return 0xE7;
            break;
        default:
            break;
    }
    return 0;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<uint32_t> cps = decode_utf8(text);
    for (uint32_t& c : cps) c = lower_cp(c);

    std::vector<uint32_t> comp;
    comp.reserve(cps.size());
    for (uint32_t c : cps) {
        if (!comp.empty() && is_combining(c)) {
            if (uint32_t fused = compose(comp.back(), c)) {
                comp.back() = fused;
                continue;
            }
        }
        comp.push_back(c);
    }

    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (uint32_t c : comp) {
        if (is_space_cp(c) || is_punct_cp(c)) {
            flush();
        } else if (is_cjk_cp(c)) {
            flush();
            std::string one;
            encode_utf8(c, one);
            out.push_back(one);
        } else {
            encode_utf8(c, cur);
        }
    }
    flush();
    return out;
}

// ---- vocabulary --------------------------------------------------------------

namespace {
const char* kSpecialTokens[] = {"[PAD]", "[UNK]", "[BOS]", "[EOS]", "[CLS]", "[SEP]", "[MASK]"};
constexpr const char* kVocabHeader = "klvcg-vocab 1";
}  // namespace

Vocabulary::Vocabulary() {
    for (const char* s : kSpecialTokens) push_token(s);
}

void Vocabulary::push_token(const std::string& token) {
    token_to_id_.emplace(token, static_cast<int64_t>(id_to_token_.size()));
    id_to_token_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, int64_t min_freq,
                             int64_t max_size) {
    if (max_size != 0 && max_size < kNumSpecials)
        throw ConfigError("vocabulary max_size below the special-token count");
    std::unordered_map<std::string, int64_t> freq;
    for (const std::string& text : texts)
        for (const std::string& tok : tokenize(text)) ++freq[tok];

    std::vector<std::pair<std::string, int64_t>> ranked;
    ranked.reserve(freq.size());
    for (auto& [tok, count] : freq)
        if (count >= min_freq) ranked.emplace_back(tok, count);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary v;
    for (auto& [tok, count] : ranked) {
        if (max_size != 0 && v.size() >= max_size) break;
        v.push_token(tok);
    }
    return v;
}

int64_t Vocabulary::id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const {
    return token_to_id_.count(token) > 0;
}

const std::string& Vocabulary::token(int64_t id) const {
    if (id < 0 || id >= size())
        throw Error("vocabulary id " + std::to_string(id) + " out of range [0," +
                    std::to_string(size()) + ")");
    return id_to_token_[id];
}

std::vector<int64_t> Vocabulary::encode(const std::vector<std::string>& tokens) const {
    std::vector<int64_t> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(id(t));
    return ids;
}

std::vector<int64_t> Vocabulary::encode_text(const std::string& text) const {
    return encode(tokenize(text));
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << kVocabHeader << "\n";
    for (int64_t i = kNumSpecials; i < size(); ++i) os << id_to_token_[i] << "\n";
    if (!os) throw IoError("write failed: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open vocabulary: " + path);
    std::string line;
    if (!std::getline(is, line) || line != kVocabHeader)
        throw IoError("bad vocabulary header in " + path);
    Vocabulary v;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (v.token_to_id_.count(line)) throw IoError("duplicate vocabulary token: " + line);
        v.push_token(line);
    }
    return v;
}

// ---- corpus -------------------------------------------------------------------

namespace {

std::string trim_copy(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool known_split(const std::string& s) { return s == "train" || s == "valid" || s == "test"; }

}  // namespace

bool Corpus::has_video(const std::string& video_id) const { return video_pos.count(video_id) > 0; }

const VideoMeta& Corpus::meta(const std::string& video_id) const {
    auto it = video_pos.find(video_id);
    if (it == video_pos.end()) throw Error("unknown video: " + video_id);
    return videos[it->second];
}

std::vector<std::string> Corpus::videos_in_split(const std::string& split) const {
    std::vector<std::string> out;
    for (const VideoMeta& v : videos)
        if (v.split == split) out.push_back(v.video_id);
    return out;
}

std::vector<std::string> Corpus::texts_at(const std::string& video_id, int64_t t) const {
    meta(video_id);  // existence check
    std::vector<std::string> out;
    auto vit = by_video_time.find(video_id);
    if (vit == by_video_time.end()) return out;
    auto tit = vit->second.find(t);
    if (tit == vit->second.end()) return out;
    for (int64_t idx : tit->second) out.push_back(comments[idx].text);
    return out;
}

void Corpus::rebuild_index() {
    video_pos.clear();
    by_video_time.clear();
    for (size_t i = 0; i < videos.size(); ++i) {
        if (!video_pos.emplace(videos[i].video_id, static_cast<int64_t>(i)).second)
            throw IoError("duplicate video id in metadata: " + videos[i].video_id);
    }
    for (size_t i = 0; i < comments.size(); ++i)
        by_video_time[comments[i].video_id][comments[i].time_s].push_back(
            static_cast<int64_t>(i));
}

void Corpus::validate() const {
    bool any_split = false;
    for (const VideoMeta& v : videos) {
        if (v.duration_s <= 0)
            throw IoError("video " + v.video_id + " has non-positive duration");
        if (!v.split.empty()) {
            any_split = true;
            if (!known_split(v.split))
                throw IoError("video " + v.video_id + " has unknown split tag '" + v.split + "'");
        }
    }
    if (any_split)
        for (const VideoMeta& v : videos)
            if (v.split.empty())
                throw IoError("video " + v.video_id + " is missing a split tag");
    for (const CommentRecord& c : comments) {
        const VideoMeta& v = meta(c.video_id);
        if (c.time_s < 0 || c.time_s >= v.duration_s)
            throw IoError("comment at t=" + std::to_string(c.time_s) + " is outside video " +
                          c.video_id + " duration " + std::to_string(v.duration_s));
        if (trim_copy(c.text).empty())
            throw IoError("empty comment text in video " + c.video_id + " at t=" +
                          std::to_string(c.time_s));
    }
}

Corpus load_corpus(const std::string& comments_path, const std::string& meta_path) {
    Corpus corpus;

    std::ifstream ms(meta_path);
    if (!ms) throw IoError("cannot open metadata: " + meta_path);
    json meta_doc;
    try {
        ms >> meta_doc;
    } catch (const json::exception& e) {
        throw IoError("bad metadata JSON in " + meta_path + ": " + e.what());
    }
    if (!meta_doc.is_array()) throw IoError("metadata must be a JSON list: " + meta_path);
    for (const json& item : meta_doc) {
        VideoMeta v;
        try {
            v.video_id = item.at("video_id").get<std::string>();
            v.duration_s = item.at("duration_s").get<int64_t>();
            if (item.contains("split")) v.split = item["split"].get<std::string>();
            if (item.contains("feature_path"))
                v.feature_path = item["feature_path"].get<std::string>();
        } catch (const json::exception& e) {
            throw IoError("bad video record in " + meta_path + ": " + e.what());
        }
        corpus.videos.push_back(std::move(v));
    }

    std::ifstream cs(comments_path);
    if (!cs) throw IoError("cannot open comments: " + comments_path);
    std::string line;
    int64_t line_no = 0;
    while (std::getline(cs, line)) {
        ++line_no;
        if (trim_copy(line).empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
            CommentRecord c;
            c.video_id = rec.at("video_id").get<std::string>();
            c.time_s = rec.at("time_s").get<int64_t>();
            c.text = rec.at("text").get<std::string>();
            corpus.comments.push_back(std::move(c));
        } catch (const json::exception& e) {
            throw IoError("bad comment record at " + comments_path + ":" +
                          std::to_string(line_no) + ": " + e.what());
        }
    }

    corpus.rebuild_index();
    corpus.validate();
    return corpus;
}

std::unordered_map<std::string, std::string> load_splits(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open splits: " + path);
    json doc;
    try {
        is >> doc;
    } catch (const json::exception& e) {
        throw IoError("bad splits JSON in " + path + ": " + e.what());
    }
    if (!doc.is_object()) throw IoError("splits must be a JSON object: " + path);
    std::unordered_map<std::string, std::string> out;
    for (auto& [k, v] : doc.items()) out[k] = v.get<std::string>();
    return out;
}

void apply_splits(Corpus& corpus, const std::unordered_map<std::string, std::string>& splits) {
    for (VideoMeta& v : corpus.videos) {
        auto it = splits.find(v.video_id);
        if (it == splits.end()) throw IoError("splits file does not cover video " + v.video_id);
        if (!known_split(it->second))
            throw IoError("unknown split tag '" + it->second + "' for video " + v.video_id);
        v.split = it->second;
    }
}

void save_comments(const std::string& path, const std::vector<CommentRecord>& comments) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    for (const CommentRecord& c : comments) {
        json rec = {{"video_id", c.video_id}, {"time_s", c.time_s}, {"text", c.text}};
        os << rec.dump() << "\n";
    }
    if (!os) throw IoError("write failed: " + path);
}

void save_meta(const std::string& path, const std::vector<VideoMeta>& videos) {
    json doc = json::array();
    for (const VideoMeta& v : videos) {
        json item = {{"video_id", v.video_id}, {"duration_s", v.duration_s}};
        if (!v.split.empty()) item["split"] = v.split;
        if (!v.feature_path.empty()) item["feature_path"] = v.feature_path;
        doc.push_back(item);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << doc.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path);
}

void save_splits(const std::string& path, const std::vector<VideoMeta>& videos) {
    json doc = json::object();
    for (const VideoMeta& v : videos) doc[v.video_id] = v.split;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << doc.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path);
}

// ---- visual features ------------------------------------------------------------

namespace {
constexpr uint32_t kFeatureVersion = 1;
}

const float* FeatureTable::row(int64_t t) const {
    if (t < 0 || t >= seconds)
        throw ContractError("feature row " + std::to_string(t) + " out of range [0," +
                            std::to_string(seconds) + ")");
    return values.data() + t * dim;
}

FeatureTable load_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open feature file: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "KLVF", 4) != 0)
        throw IoError("bad feature-file magic in " + path);
    uint32_t version = 0, seconds = 0, dim = 0;
    if (!is.read(reinterpret_cast<char*>(&version), 4) ||
        !is.read(reinterpret_cast<char*>(&seconds), 4) ||
        !is.read(reinterpret_cast<char*>(&dim), 4))
        throw IoError("truncated feature header in " + path);
    if (version != kFeatureVersion)
        throw IoError("unsupported feature-file version " + std::to_string(version) + " in " +
                      path);
    FeatureTable t;
    t.seconds = seconds;
    t.dim = dim;
    t.values.resize(static_cast<size_t>(seconds) * dim);
    if (!is.read(reinterpret_cast<char*>(t.values.data()),
                 static_cast<std::streamsize>(t.values.size() * sizeof(float))))
        throw IoError("truncated feature data in " + path);
    return t;
}

void save_features(const std::string& path, const FeatureTable& table) {
    if (static_cast<int64_t>(table.values.size()) != table.seconds * table.dim)
        throw ContractError("feature table data does not match its declared shape");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write("KLVF", 4);
    uint32_t version = kFeatureVersion, seconds = static_cast<uint32_t>(table.seconds),
             dim = static_cast<uint32_t>(table.dim);
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&seconds), 4);
    os.write(reinterpret_cast<const char*>(&dim), 4);
    os.write(reinterpret_cast<const char*>(table.values.data()),
             static_cast<std::streamsize>(table.values.size() * sizeof(float)));
    if (!os) throw IoError("write failed: " + path);
}

FeatureTable load_features_checked(const std::string& path, const VideoMeta& meta,
                                   int64_t expected_dim) {
    FeatureTable t = load_features(path);
    if (t.seconds != meta.duration_s)
        throw IoError("feature table for video " + meta.video_id + ": " +
                      std::to_string(t.seconds) + " seconds for duration " +
                      std::to_string(meta.duration_s));
    if (t.dim != expected_dim)
        throw IoError("feature table for video " + meta.video_id + ": dim " +
                      std::to_string(t.dim) + ", expected " + std::to_string(expected_dim));
    return t;
}

// ---- windows ---------------------------------------------------------------------

int64_t period_stage(int64_t t, int64_t duration) {
    if (duration <= 0 || t < 0 || t >= duration)
        throw ContractError("period_stage: t=" + std::to_string(t) + " outside [0," +
                            std::to_string(duration) + ")");
    return std::min<int64_t>(4, 5 * t / duration);
}

std::vector<ContextWindow> build_windows(const Corpus& corpus, const std::string& video_id,
                                         int64_t l, int64_t min_targets) {
    if (l < 1) throw ConfigError("context half-width l must be >= 1");
    if (min_targets < 1) throw ConfigError("min_targets must be >= 1");
    const VideoMeta& v = corpus.meta(video_id);

    std::vector<ContextWindow> out;
    auto vit = corpus.by_video_time.find(video_id);
    if (vit == corpus.by_video_time.end()) return out;

    for (const auto& [t, idxs] : vit->second) {
        if (static_cast<int64_t>(idxs.size()) < min_targets) continue;
        ContextWindow w;
        w.video_id = video_id;
        w.t = t;
        w.duration = v.duration_s;
        w.l = l;
        w.period = period_stage(t, v.duration_s);
        for (int64_t s = t - l; s <= t + l; ++s) {
            bool ok = s >= 0 && s < v.duration_s;
            w.frame_seconds.push_back(ok ? s : -1);
            w.frame_valid.push_back(ok ? 1 : 0);
        }
        for (int64_t s = t - l; s <= t + l; ++s) {
            if (s == t) continue;
            bool ok = s >= 0 && s < v.duration_s;
            w.step_seconds.push_back(ok ? s : -1);
            w.step_valid.push_back(ok ? 1 : 0);
            w.step_comments.push_back(ok ? corpus.texts_at(video_id, s)
                                         : std::vector<std::string>{});
        }
        for (int64_t idx : idxs) w.targets.push_back(corpus.comments[idx].text);
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace klvcg
