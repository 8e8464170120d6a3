#include "klvcg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace klvcg {

using nlohmann::json;
namespace fs = std::filesystem;

void shuffle_indices(std::vector<int64_t>& idx, Rng& rng) {
    for (int64_t i = static_cast<int64_t>(idx.size()) - 1; i > 0; --i) {
        std::swap(idx[i], idx[rng.index(i + 1)]);
    }
}

MaskingOutcome mask_target(const std::vector<int64_t>& tokens, int64_t vocab_size, Rng& rng) {
    if (tokens.empty()) throw ContractError("mask_target: empty token sequence");
    if (vocab_size <= Vocabulary::kNumSpecials)
        throw ContractError("mask_target: vocabulary holds no maskable tokens");

    std::vector<int64_t> maskable;
    for (int64_t i = 0; i < static_cast<int64_t>(tokens.size()); ++i) {
        if (tokens[i] >= Vocabulary::kNumSpecials) maskable.push_back(i);
    }
    if (maskable.empty()) throw ContractError("mask_target: no maskable positions");

    int64_t want = std::max<int64_t>(
        1, std::llround(0.3 * static_cast<double>(maskable.size())));

    // Partial Fisher-Yates: the first `want` slots end up a uniform sample.
    for (int64_t i = 0; i < want; ++i) {
        int64_t j = i + rng.index(static_cast<int64_t>(maskable.size()) - i);
        std::swap(maskable[i], maskable[j]);
    }
    maskable.resize(want);
    std::sort(maskable.begin(), maskable.end());

    MaskingOutcome out;
    out.input = tokens;
    out.masked_positions = maskable;
    out.labels.assign(tokens.size(), kIgnoreId);
    for (int64_t pos : maskable) {
        out.labels[pos] = tokens[pos];
        double u = rng.uniform();
        if (u < 0.8) {
            out.input[pos] = Vocabulary::kMask;
        } else if (u < 0.9) {
            out.input[pos] =
                Vocabulary::kNumSpecials + rng.index(vocab_size - Vocabulary::kNumSpecials);
        }  // else: keep the original token, label it anyway
    }
    return out;
}

double lr_at(int64_t step, int64_t total_steps, double peak_lr, double warmup_frac) {
    if (total_steps < 1) throw ConfigError("lr_at: total_steps must be >= 1");
    if (peak_lr <= 0.0) throw ConfigError("lr_at: peak_lr must be positive");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw ConfigError("lr_at: warmup_frac must lie in [0, 1)");
    if (step < 0 || step > total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
    double w = warmup_frac * static_cast<double>(total_steps);
    if (static_cast<double>(step) <= w)
        return w == 0.0 ? peak_lr : peak_lr * static_cast<double>(step) / w;
    return peak_lr * static_cast<double>(total_steps - step) /
           (static_cast<double>(total_steps) - w);
}

SampleTensors finetune_sample(const std::vector<int64_t>& words, int64_t g) {
    if (g < 2) throw ContractError("finetune_sample: g must be >= 2");
    std::vector<int64_t> w(words.begin(),
                           words.begin() + std::min<int64_t>(words.size(), g - 1));
    SampleTensors st;
    st.ignore_id = Vocabulary::kPad;
    st.input.assign(g, Vocabulary::kPad);
    st.labels.assign(g, Vocabulary::kPad);
    st.input[0] = Vocabulary::kBos;
    for (size_t i = 0; i < w.size(); ++i) {
        st.input[i + 1] = w[i];
        st.labels[i] = w[i];
    }
    st.labels[w.size()] = Vocabulary::kEos;
    return st;
}

SampleTensors pretrain_sample(const std::vector<int64_t>& words, int64_t g, int64_t vocab_size,
                              Rng& rng) {
    if (g < 1) throw ContractError("pretrain_sample: g must be >= 1");
    std::vector<int64_t> w(words.begin(),
                           words.begin() + std::min<int64_t>(words.size(), g));
    MaskingOutcome mo = mask_target(w, vocab_size, rng);
    SampleTensors st;
    st.ignore_id = kIgnoreId;
    st.input = mo.input;
    st.input.resize(g, Vocabulary::kPad);
    st.labels = mo.labels;
    st.labels.resize(g, kIgnoreId);
    return st;
}

void TrainConfig::validate() const {
    if (stage != "pretrain" && stage != "finetune")
        throw ConfigError("train config: stage must be 'pretrain' or 'finetune', got '" + stage +
                          "'");
    if (lr <= 0.0) throw ConfigError("train config: lr must be positive");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (grad_accum < 1) throw ConfigError("train config: grad_accum must be >= 1");
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
        throw ConfigError("train config: warmup_frac must lie in [0, 1)");
    if (limit_epochs < 0) throw ConfigError("train config: limit_epochs must be >= 0");
}

namespace {

json train_config_to_json(const TrainConfig& c) {
    return json{{"stage", c.stage},
                {"lr", c.lr},
                {"batch_size", c.batch_size},
                {"grad_accum", c.grad_accum},
                {"epochs", c.epochs},
                {"warmup_frac", c.warmup_frac},
                {"seed", c.seed},
                {"resume", c.resume},
                {"limit_epochs", c.limit_epochs},
                {"ablate_mlm", c.ablate_mlm},
                {"ablate_kg", c.ablate_kg},
                {"ablate_ac", c.ablate_ac},
                {"ablate_period", c.ablate_period},
                {"data_dirs", c.data_dirs}};
}

void overlay(TrainConfig& c, const json& j) {
    if (!j.is_object()) throw ConfigError("train config document must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "stage") c.stage = value.get<std::string>();
            else if (key == "lr") c.lr = value.get<double>();
            else if (key == "batch_size") c.batch_size = value.get<int64_t>();
            else if (key == "grad_accum") c.grad_accum = value.get<int64_t>();
            else if (key == "epochs") c.epochs = value.get<int64_t>();
            else if (key == "warmup_frac") c.warmup_frac = value.get<double>();
            else if (key == "seed") c.seed = value.get<uint64_t>();
            else if (key == "resume") c.resume = value.get<bool>();
            else if (key == "limit_epochs") c.limit_epochs = value.get<int64_t>();
            else if (key == "ablate_mlm") c.ablate_mlm = value.get<bool>();
            else if (key == "ablate_kg") c.ablate_kg = value.get<bool>();
            else if (key == "ablate_ac") c.ablate_ac = value.get<bool>();
            else if (key == "ablate_period") c.ablate_period = value.get<bool>();
            else if (key == "data_dirs") c.data_dirs = value.get<std::vector<std::string>>();
            else throw ConfigError("train config: unknown key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("train config: bad value for '" + key + "': " + e.what());
        }
    }
}

}  // namespace

std::string to_json(const TrainConfig& cfg) { return train_config_to_json(cfg).dump(2) + "\n"; }

void apply_json_overlay(TrainConfig& cfg, const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: invalid JSON: ") + e.what());
    }
    overlay(cfg, j);
}

void apply_ablations(const TrainConfig& tc, ModelConfig& mc) {
    if (tc.ablate_kg) mc.disable_kg = true;
    if (tc.ablate_ac) mc.disable_ac = true;
    if (tc.ablate_period) mc.disable_period = true;
}

std::vector<TrainExample> build_examples(
    const Corpus& corpus, const std::unordered_map<std::string, FeatureTable>& features,
    const std::vector<RecallRecord>& recall, const Vocabulary& vocab, const ModelConfig& cfg,
    const std::string& split) {
    std::unordered_map<std::string, std::unordered_map<int64_t, const RecallRecord*>> by_key;
    for (const auto& rec : recall) by_key[rec.video_id][rec.t] = &rec;

    std::vector<TrainExample> out;
    for (const std::string& vid : corpus.videos_in_split(split)) {
        auto fit = features.find(vid);
        if (fit == features.end())
            throw ContractError("build_examples: no feature table for video '" + vid + "'");
        for (const ContextWindow& win : build_windows(corpus, vid, cfg.l)) {
            const RecallRecord* rec = nullptr;
            auto vit = by_key.find(vid);
            if (vit != by_key.end()) {
                auto tit = vit->second.find(win.t);
                if (tit != vit->second.end()) rec = tit->second;
            }
            if (rec == nullptr)
                throw ContractError("build_examples: no recall record for '" + vid + "' at t=" +
                                    std::to_string(win.t));
            KnowledgeSequence k = serialize_facts(rec->facts, vocab, cfg.m);
            ModelInput input = assemble_input(win, fit->second, vocab, k, rec->retrieved, cfg);
            for (const std::string& text : win.targets) {
                out.push_back(TrainExample{input, vocab.encode_text(text)});
            }
        }
    }
    return out;
}

Tensor sample_loss(const KlvcgModel& model, const TrainExample& ex, bool pretrain, Rng& mask_rng,
                   const PassContext& ctx) {
    const ModelConfig& mc = model.config();
    SampleTensors st = pretrain ? pretrain_sample(ex.words, mc.g, mc.vocab_size, mask_rng)
                                : finetune_sample(ex.words, mc.g);
    DecodeMode mode = pretrain ? DecodeMode::kCloze : DecodeMode::kGeneration;
    DecoderOutput out = model.forward(ex.input, st.input, mode, ctx);
    return cross_entropy_logits(out.logits, st.labels, st.ignore_id);
}

namespace {

bool has_maskable(const std::vector<int64_t>& words) {
    for (int64_t id : words)
        if (id >= Vocabulary::kNumSpecials) return true;
    return false;
}

struct TrainState {
    int64_t epochs_done = 0;
    int64_t global_step = 0;
    double best_val = 0.0;
    bool have_best = false;
    std::string stage;
};

void save_state(const std::string& path, const TrainState& s) {
    json j{{"stage", s.stage},
           {"epochs_done", s.epochs_done},
           {"global_step", s.global_step},
           {"have_best", s.have_best},
           {"best_val", s.have_best ? json(s.best_val) : json(nullptr)}};
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path);
}

TrainState load_state(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open training state: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    json j;
    try {
        j = json::parse(ss.str());
        TrainState s;
        s.stage = j.at("stage").get<std::string>();
        s.epochs_done = j.at("epochs_done").get<int64_t>();
        s.global_step = j.at("global_step").get<int64_t>();
        s.have_best = j.at("have_best").get<bool>();
        if (s.have_best) s.best_val = j.at("best_val").get<double>();
        return s;
    } catch (const json::exception& e) {
        throw IoError("malformed training state " + path + ": " + e.what());
    }
}

// One metrics line; nlohmann's shortest-round-trip doubles keep the file
// byte-stable across identically seeded runs.
void metrics_line(std::ofstream& os, const std::string& stage, int64_t step, double lr,
                  double loss) {
    json j{{"stage", stage}, {"step", step}, {"lr", lr}, {"loss", loss}};
    os << j.dump() << "\n";
}

}  // namespace

TrainResult train(KlvcgModel& model, const std::vector<TrainExample>& train_set,
                  const std::vector<TrainExample>& valid_set, const TrainConfig& cfg,
                  const std::string& out_dir) {
    cfg.validate();
    const bool pretrain = cfg.stage == "pretrain";

    // Comments made purely of specials (all-OOV) carry no masked-word signal.
    std::vector<const TrainExample*> train_ptrs, valid_ptrs;
    for (const auto& ex : train_set)
        if (!pretrain || has_maskable(ex.words)) train_ptrs.push_back(&ex);
    for (const auto& ex : valid_set)
        if (!pretrain || has_maskable(ex.words)) valid_ptrs.push_back(&ex);
    if (train_ptrs.empty()) throw ContractError("train: no usable training samples");

    fs::create_directories(out_dir);
    const std::string last_path = out_dir + "/last.ckpt";
    const std::string best_path = out_dir + "/best.ckpt";
    const std::string adam_path = out_dir + "/adam.ckpt";
    const std::string state_path = out_dir + "/state.json";

    const int64_t n = static_cast<int64_t>(train_ptrs.size());
    const int64_t chunk = cfg.batch_size * cfg.grad_accum;
    const int64_t steps_per_epoch = (n + chunk - 1) / chunk;
    const int64_t total_steps = steps_per_epoch * cfg.epochs;

    Adam adam(model.params());
    TrainState state;
    state.stage = cfg.stage;
    if (cfg.resume) {
        TrainState prev = load_state(state_path);
        if (prev.stage != cfg.stage)
            throw ConfigError("train: cannot resume stage '" + cfg.stage +
                              "' from a '" + prev.stage + "' run");
        load_checkpoint(model.params(), last_path);
        adam.load(adam_path);
        state = prev;
    }

    std::ofstream metrics(out_dir + "/metrics.jsonl",
                          cfg.resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot open for writing: " + out_dir + "/metrics.jsonl");

    TrainResult result;
    result.best_val = state.best_val;

    int64_t end_epoch = cfg.epochs;
    if (cfg.limit_epochs > 0)
        end_epoch = std::min(cfg.epochs, state.epochs_done + cfg.limit_epochs);

    for (int64_t epoch = state.epochs_done; epoch < end_epoch; ++epoch) {
        // Fresh per-epoch stream (shuffle, masking, dropout): resuming at an
        // epoch boundary replays exactly what an uninterrupted run would do.
        Rng erng(cfg.seed ^ fnv1a("epoch-" + std::to_string(epoch)));
        std::vector<int64_t> order(n);
        for (int64_t i = 0; i < n; ++i) order[i] = i;
        shuffle_indices(order, erng);

        PassContext tctx{model.config().dropout, &erng, true};
        double epoch_loss_sum = 0.0;
        int64_t epoch_steps = 0;
        for (int64_t start = 0; start < n; start += chunk) {
            int64_t count = std::min(chunk, n - start);
            double inv = 1.0 / static_cast<double>(count);
            model.params().zero_grad();
            double loss_sum = 0.0;
            for (int64_t i = 0; i < count; ++i) {
                Tensor loss = sample_loss(model, *train_ptrs[order[start + i]], pretrain, erng,
                                          tctx);
                loss_sum += loss.item();
                backward(scale(loss, inv));
            }
            ++state.global_step;
            double lr = lr_at(std::min(state.global_step, total_steps), total_steps, cfg.lr,
                              cfg.warmup_frac);
            adam.step(lr);
            double mean_loss = loss_sum * inv;
            metrics_line(metrics, cfg.stage, state.global_step, lr, mean_loss);
            epoch_loss_sum += mean_loss;
            ++epoch_steps;
            ++result.optimizer_steps;
        }
        result.epoch_train_loss.push_back(epoch_loss_sum / static_cast<double>(epoch_steps));

        if (!valid_ptrs.empty()) {
            NoGradGuard ng;
            // Fixed stream: every validation pass masks identically, so the
            // cloze CE is comparable across epochs.
            Rng vrng(cfg.seed ^ fnv1a("valid"));
            PassContext vctx{0.0, &vrng, false};
            double total = 0.0;
            for (const TrainExample* ex : valid_ptrs)
                total += sample_loss(model, *ex, pretrain, vrng, vctx).item();
            double val = total / static_cast<double>(valid_ptrs.size());
            metrics_line(metrics, cfg.stage + "-val", state.global_step, 0.0, val);
            result.epoch_val_loss.push_back(val);
            if (!state.have_best || val < state.best_val) {
                state.best_val = val;
                state.have_best = true;
                save_checkpoint(model.params(), best_path);
            }
        } else {
            // No validation set: the freshest parameters are the best known.
            save_checkpoint(model.params(), best_path);
        }

        state.epochs_done = epoch + 1;
        save_checkpoint(model.params(), last_path);
        adam.save(adam_path);
        save_state(state_path, state);
        metrics.flush();
    }

    result.best_val = state.best_val;
    return result;
}

}  // namespace klvcg
