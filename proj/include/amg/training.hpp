#pragma once

#include "amg/model.hpp"
#include "amg/table.hpp"

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace amg {

struct TrainConfig {
  real lr = real(5e-5);
  real weight_decay = real(0.01);
  int batch_size = 4;
  int grad_accum = 11;  // effective batch 44
  int pretrain_epochs = 30;
  int finetune_epochs = 50;
  real pretrain_mask_rate = real(0.20);
  real finetune_mask_rate = real(0.70);
  std::uint64_t seed = 17;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& json);
};

enum class Stage { Phase1, Phase2, Finetune };
std::string stage_name(Stage s);

// --- corruption ---

struct Corruption {
  std::vector<int> input_ids;        // with [MASK]s
  std::vector<int> label_positions;  // ascending
};

// Masks ceil(rate * eligible) positions chosen uniformly without replacement.
// Eligible: everything except [CLS]/[SEP]/[E_CLS]/[E_SEP] (and [PAD]/[MASK]).
Corruption corrupt_table(const std::vector<int>& ids, double rate, std::mt19937_64& rng);
// Same ceiling rule; [E_CLS]/[E_SEP] are eligible here (the model must learn
// to emit them), only [CLS]/[SEP]/[PAD]/[MASK] are excluded.
Corruption corrupt_reference(const std::vector<int>& ids, double rate, std::mt19937_64& rng);

// --- optimizer ---

struct OptimizerState {
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
  long step = 0;
  std::map<std::string, std::pair<std::vector<real>, std::vector<real>>> moments;  // m, v
};

// Adam with bias correction and decoupled weight decay on decay-flagged
// tensors. Throws RuntimeError naming the parameter on a non-finite gradient.
void adam_step(const std::vector<ParamRef>& params, OptimizerState& state, real lr,
               real weight_decay);

// --- loss construction ---

// One frozen-encoder pass over the uncorrupted sequence; per-event span means.
// Valid because the seq2seq mask makes hidden states at position p independent
// of tokens after p.
std::vector<SlotHistory> teacher_forced_histories(
    const FrozenEncoder& frozen, const std::vector<int>& full_ids, int src_len,
    const std::vector<std::pair<int, int>>& event_spans);

// Frozen-dependent pieces of one example, cached per stage.
struct PreparedExample {
  std::string id;
  TableEncoding table_enc;
  std::vector<int> ref_ids;  // finetune: uncorrupted reference (no trailing [SEP])
  TargetEncoding tgt_enc;
  int src_len = 0;
  int total_len = 0;
  std::vector<int> slot_of;                       // full sequence, gold labels
  std::vector<std::pair<int, int>> events;        // (global close position, slot)
  std::vector<std::pair<int, int>> event_spans;   // global value spans per event
  MemoryBank mem0;
  std::vector<SlotHistory> histories;  // teacher-forced, one per event
  Tensor mask_ta, mask_slot;
};

PreparedExample prepare_example(const Example& ex, const Vocabulary& vocab,
                                const FrozenEncoder& frozen, const ModelConfig& cfg,
                                Stage stage);

// Fully assembled forward input + labels for one corrupted example.
struct SequenceItem {
  ForwardInput input;
  std::vector<int> labels;
  std::vector<std::uint8_t> label_mask;
  int masked_count = 0;
};

// Applies corruption and replays the teacher-forced memory schedule with the
// current parameters. `memory_updates` is false in phase 1 (bank frozen at
// its init values).
SequenceItem make_training_item(const ModelParams& params, const PreparedExample& prep,
                                Stage stage, double mask_rate, bool memory_updates,
                                std::mt19937_64& rng);

// Mean cross entropy over all masked positions of the batch.
Tensor mlm_loss(const ModelParams& params, const std::vector<SequenceItem>& batch,
                real dropout_rate = 0, std::mt19937_64* rng = nullptr);

// --- stage driver ---

struct TrainLogEntry {
  long step;
  double loss;
  double lr;
  std::string stage;
};

struct TrainResult {
  ModelParams params;
  OptimizerState opt;
  std::vector<TrainLogEntry> log;
  double final_train_loss = 0;
  double best_val_loss = 0;
};

// Runs one stage for [start_epoch, epochs). RNG streams derive from
// (seed, stage, epoch, example), so a run resumed from a saved (params, opt)
// pair at an epoch boundary is bit-identical to an uninterrupted one, provided
// the caller passes the stage-entry parameters as `frozen_source` (the frozen
// encoder is snapshotted once per stage, not per resume). When null, `params`
// at entry is the snapshot source. Finetune keeps the checkpoint with the
// best validation loss when `val` is nonempty.
TrainResult train_stage(ModelParams params, Stage stage, const std::vector<Example>& train,
                        const std::vector<Example>& val, const Vocabulary& vocab,
                        const TrainConfig& cfg, int epochs, int start_epoch = 0,
                        OptimizerState opt = {},
                        const std::function<void(const TrainLogEntry&)>& on_log = nullptr,
                        const ModelParams* frozen_source = nullptr);

// Argmax reconstruction accuracy at masked positions under deterministic
// per-example corruption streams. `frozen_source` selects the parameters
// backing the frozen memory encoder (the stage-entry snapshot the model was
// trained against); defaults to `params`.
double masked_reconstruction_accuracy(const ModelParams& params,
                                      const std::vector<Example>& data,
                                      const Vocabulary& vocab, Stage stage, double mask_rate,
                                      std::uint64_t seed,
                                      const ModelParams* frozen_source = nullptr);

// Deterministic validation loss (fixed per-example corruption streams).
double validation_loss(const ModelParams& params, const FrozenEncoder& frozen,
                       const std::vector<Example>& val, const Vocabulary& vocab, Stage stage,
                       double mask_rate, std::uint64_t seed);

}  // namespace amg
