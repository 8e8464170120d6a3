#pragma once

#include "klvcg/model.hpp"

namespace klvcg {

// Label value cross-entropy skips at unmasked cloze positions.
constexpr int64_t kIgnoreId = -1;

// Deterministic Fisher-Yates (std::shuffle is implementation-defined).
void shuffle_indices(std::vector<int64_t>& idx, Rng& rng);

struct MaskingOutcome {
    std::vector<int64_t> input;             // ids after masking
    std::vector<int64_t> masked_positions;  // ascending
    std::vector<int64_t> labels;            // original id at masked slots, kIgnoreId elsewhere
};

// Selects round(0.3 * maskable) positions (at least one); of those 80% become
// MASK, 10% a uniform random non-special token, 10% stay unchanged. Special
// tokens are never maskable.
MaskingOutcome mask_target(const std::vector<int64_t>& tokens, int64_t vocab_size, Rng& rng);

// Linear warmup from 0 over the first warmup_frac of steps, then linear
// decay to 0 at step == total_steps.
double lr_at(int64_t step, int64_t total_steps, double peak_lr, double warmup_frac = 0.1);

// Decoder-side tensors for one sample, always padded to length g.
struct SampleTensors {
    std::vector<int64_t> input;
    std::vector<int64_t> labels;
    int64_t ignore_id = Vocabulary::kPad;
};
// input [BOS] w1..wk, labels w1..wk [EOS]; words beyond g-1 are dropped.
SampleTensors finetune_sample(const std::vector<int64_t>& words, int64_t g);
// Masked-word prediction: input is the masked comment, labels only at masks.
SampleTensors pretrain_sample(const std::vector<int64_t>& words, int64_t g, int64_t vocab_size,
                              Rng& rng);

struct TrainExample {
    ModelInput input;
    std::vector<int64_t> words;  // encoded target comment, unpadded
};

struct TrainConfig {
    std::string stage = "finetune";  // pretrain | finetune
    double lr = 1e-4;
    int64_t batch_size = 32;
    int64_t grad_accum = 4;  // optimizer steps see batch_size*grad_accum samples
    int64_t epochs = 1;
    double warmup_frac = 0.1;
    uint64_t seed = 1;
    bool resume = false;
    // Stop this invocation after so many additional epochs (0 = run to
    // `epochs`); the schedule always spans the full `epochs` horizon, so a
    // sliced run resumed to completion matches an uninterrupted one.
    int64_t limit_epochs = 0;
    // Ablation switches; kg/ac/period map onto the model config, mlm means
    // the pre-training stage is skipped entirely.
    bool ablate_mlm = false;
    bool ablate_kg = false;
    bool ablate_ac = false;
    bool ablate_period = false;
    // Corpus directories; more than one merges them ("+"-style pre-training).
    std::vector<std::string> data_dirs;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};
std::string to_json(const TrainConfig& cfg);
void apply_json_overlay(TrainConfig& cfg, const std::string& text);
// Copies the kg/ac/period switches onto the model config.
void apply_ablations(const TrainConfig& tc, ModelConfig& mc);

// One (window, target comment) pair per target of every window of the given
// split, with knowledge and retrieval looked up from the recall records.
std::vector<TrainExample> build_examples(
    const Corpus& corpus, const std::unordered_map<std::string, FeatureTable>& features,
    const std::vector<RecallRecord>& recall, const Vocabulary& vocab, const ModelConfig& cfg,
    const std::string& split);

// Loss of one sample under the stage objective. Pretraining draws its mask
// from mask_rng; fine-tuning never touches it.
Tensor sample_loss(const KlvcgModel& model, const TrainExample& ex, bool pretrain, Rng& mask_rng,
                   const PassContext& ctx);

struct TrainResult {
    int64_t optimizer_steps = 0;
    double best_val = 0.0;
    std::vector<double> epoch_train_loss;
    std::vector<double> epoch_val_loss;
};

// Runs cfg.epochs of the chosen stage. Writes into out_dir: metrics.jsonl
// (one line per optimizer step plus one per validation), last.ckpt,
// adam.ckpt, state.json every epoch, and best.ckpt when validation improves.
// With cfg.resume, picks up from state.json/last.ckpt/adam.ckpt.
TrainResult train(KlvcgModel& model, const std::vector<TrainExample>& train_set,
                  const std::vector<TrainExample>& valid_set, const TrainConfig& cfg,
                  const std::string& out_dir);

}  // namespace klvcg
