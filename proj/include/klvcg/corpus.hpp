#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "klvcg/common.hpp"

namespace klvcg {

// ---- tokenizer --------------------------------------------------------------

// Deterministic, language-neutral tokenization: canonical composition of
// common combining marks, lowercasing (ASCII + Latin-1), CJK codepoints
// emitted as single-character tokens, everything split on whitespace and
// punctuation. Idempotent on its own joined output.
std::vector<std::string> tokenize(const std::string& text);

// ---- vocabulary --------------------------------------------------------------

class Vocabulary {
public:
    static constexpr int64_t kPad = 0;
    static constexpr int64_t kUnk = 1;
    static constexpr int64_t kBos = 2;
    static constexpr int64_t kEos = 3;
    static constexpr int64_t kCls = 4;
    static constexpr int64_t kSep = 5;
    static constexpr int64_t kMask = 6;
    static constexpr int64_t kNumSpecials = 7;

    Vocabulary();  // specials only

    // Frequency-ranked (ties lexicographic) over tokenized `texts`; tokens
    // below min_freq are dropped; max_size==0 means uncapped and otherwise
    // bounds the total id count including specials.
    static Vocabulary build(const std::vector<std::string>& texts, int64_t min_freq = 2,
                            int64_t max_size = 0);

    int64_t size() const { return static_cast<int64_t>(id_to_token_.size()); }
    int64_t id(const std::string& token) const;  // kUnk when absent
    bool contains(const std::string& token) const;
    const std::string& token(int64_t id) const;
    bool is_special(int64_t id) const { return id >= 0 && id < kNumSpecials; }

    std::vector<int64_t> encode(const std::vector<std::string>& tokens) const;
    std::vector<int64_t> encode_text(const std::string& text) const;

    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int64_t> token_to_id_;
    void push_token(const std::string& token);
};

// ---- domain types ------------------------------------------------------------

struct CommentRecord {
    std::string video_id;
    int64_t time_s = 0;
    std::string text;
};

struct VideoMeta {
    std::string video_id;
    int64_t duration_s = 0;
    std::string split;         // train / valid / test
    std::string feature_path;  // relative to the meta file's directory
};

struct Corpus {
    std::vector<VideoMeta> videos;
    std::vector<CommentRecord> comments;

    std::unordered_map<std::string, int64_t> video_pos;
    // video_id -> second -> indices into `comments`, seconds kept sorted
    std::unordered_map<std::string, std::map<int64_t, std::vector<int64_t>>> by_video_time;

    bool has_video(const std::string& video_id) const;
    const VideoMeta& meta(const std::string& video_id) const;
    std::vector<std::string> videos_in_split(const std::string& split) const;
    // Comment texts at (video, t) in file order; empty when none.
    std::vector<std::string> texts_at(const std::string& video_id, int64_t t) const;

    void rebuild_index();
    void validate() const;
};

Corpus load_corpus(const std::string& comments_path, const std::string& meta_path);
std::unordered_map<std::string, std::string> load_splits(const std::string& path);
void apply_splits(Corpus& corpus, const std::unordered_map<std::string, std::string>& splits);

void save_comments(const std::string& path, const std::vector<CommentRecord>& comments);
void save_meta(const std::string& path, const std::vector<VideoMeta>& videos);
void save_splits(const std::string& path, const std::vector<VideoMeta>& videos);

// ---- per-second visual features ----------------------------------------------

struct FeatureTable {
    int64_t seconds = 0;
    int64_t dim = 0;
    std::vector<float> values;  // row-major [seconds, dim]

    const float* row(int64_t t) const;
};

FeatureTable load_features(const std::string& path);
void save_features(const std::string& path, const FeatureTable& table);
// Load + check the table covers exactly [0, duration) with the expected dim.
FeatureTable load_features_checked(const std::string& path, const VideoMeta& meta,
                                   int64_t expected_dim);

// ---- context windows -----------------------------------------------------------

// Position of t within the video quantized into five viewing-period stages.
int64_t period_stage(int64_t t, int64_t duration);

struct ContextWindow {
    std::string video_id;
    int64_t t = 0;
    int64_t duration = 0;
    int64_t l = 0;
    int64_t period = 0;
    // seconds t-l..t+l; -1 marks out-of-range (padding) rows
    std::vector<int64_t> frame_seconds;
    std::vector<uint8_t> frame_valid;
    // seconds t-l..t-1, t+1..t+l (target second excluded by construction)
    std::vector<int64_t> step_seconds;
    std::vector<uint8_t> step_valid;
    // comment texts at each context step, aligned with step_seconds
    std::vector<std::vector<std::string>> step_comments;
    // comments at second t, corpus order; each is one training target
    std::vector<std::string> targets;
};

std::vector<ContextWindow> build_windows(const Corpus& corpus, const std::string& video_id,
                                         int64_t l, int64_t min_targets = 1);

}  // namespace klvcg
