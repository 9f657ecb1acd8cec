#include "amg/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace amg {

void TrainConfig::validate() const {
  if (lr < 0) throw ValidationError("train config: negative learning rate");
  if (weight_decay < 0) throw ValidationError("train config: negative weight decay");
  if (batch_size < 1 || grad_accum < 1)
    throw ValidationError("train config: batch size and accumulation must be >= 1");
  if (pretrain_mask_rate <= 0 || pretrain_mask_rate >= 1 || finetune_mask_rate <= 0 ||
      finetune_mask_rate >= 1)
    throw ValidationError("train config: mask rates must be in (0,1)");
  if (pretrain_epochs < 0 || finetune_epochs < 0)
    throw ValidationError("train config: negative epoch count");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["grad_accum"] = grad_accum;
  j["pretrain_epochs"] = pretrain_epochs;
  j["finetune_epochs"] = finetune_epochs;
  j["pretrain_mask_rate"] = pretrain_mask_rate;
  j["finetune_mask_rate"] = finetune_mask_rate;
  j["seed"] = seed;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  TrainConfig cfg;
  cfg.lr = j.value("lr", cfg.lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.grad_accum = j.value("grad_accum", cfg.grad_accum);
  cfg.pretrain_epochs = j.value("pretrain_epochs", cfg.pretrain_epochs);
  cfg.finetune_epochs = j.value("finetune_epochs", cfg.finetune_epochs);
  cfg.pretrain_mask_rate = j.value("pretrain_mask_rate", cfg.pretrain_mask_rate);
  cfg.finetune_mask_rate = j.value("finetune_mask_rate", cfg.finetune_mask_rate);
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Phase1: return "phase1";
    case Stage::Phase2: return "phase2";
    case Stage::Finetune: return "finetuned";
  }
  return "?";
}

namespace {

Corruption corrupt_impl(const std::vector<int>& ids, double rate, std::mt19937_64& rng,
                        bool boundary_eligible) {
  if (rate <= 0 || rate >= 1)
    throw ValidationError("corrupt: rate must be in (0,1), got " + std::to_string(rate));
  std::vector<int> eligible;
  for (size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id == kCls || id == kSep || id == kPad || id == kMask) continue;
    if (!boundary_eligible && (id == kECls || id == kESep)) continue;
    eligible.push_back(static_cast<int>(i));
  }
  Corruption out;
  out.input_ids = ids;
  if (eligible.empty()) return out;
  const size_t k = static_cast<size_t>(
      std::ceil(rate * static_cast<double>(eligible.size())));
  // Partial Fisher-Yates: first k entries are a uniform sample without
  // replacement.
  for (size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  eligible.resize(k);
  std::sort(eligible.begin(), eligible.end());
  for (int pos : eligible) {
    out.input_ids[pos] = kMask;
    out.label_positions.push_back(pos);
  }
  return out;
}

}  // namespace

Corruption corrupt_table(const std::vector<int>& ids, double rate, std::mt19937_64& rng) {
  return corrupt_impl(ids, rate, rng, false);
}

Corruption corrupt_reference(const std::vector<int>& ids, double rate, std::mt19937_64& rng) {
  return corrupt_impl(ids, rate, rng, true);
}

void adam_step(const std::vector<ParamRef>& params, OptimizerState& state, real lr,
               real weight_decay) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (const auto& ref : params) {
    auto& value = ref.tensor.node()->value;
    auto& grad = ref.tensor.node()->grad;
    auto& [m, v] = state.moments[ref.name];
    if (m.empty()) {
      m.assign(value.size(), real(0));
      v.assign(value.size(), real(0));
    }
    for (size_t i = 0; i < value.size(); ++i) {
      const real g = grad.empty() ? real(0) : grad[i];
      if (!std::isfinite(g))
        throw RuntimeError("adam_step: non-finite gradient in parameter '" + ref.name + "'");
      m[i] = state.beta1 * m[i] + (real(1) - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (real(1) - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double update = lr * mhat / (std::sqrt(vhat) + state.eps);
      if (ref.decay) update += static_cast<double>(lr) * weight_decay * value[i];
      value[i] = static_cast<real>(value[i] - update);
    }
  }
}

std::vector<SlotHistory> teacher_forced_histories(
    const FrozenEncoder& frozen, const std::vector<int>& full_ids, int src_len,
    const std::vector<std::pair<int, int>>& event_spans) {
  std::vector<SlotHistory> out;
  if (event_spans.empty()) return out;
  const int n = static_cast<int>(full_ids.size());
  Tensor hidden = frozen.encode(full_ids, build_seq2seq_mask(src_len, n - src_len));
  for (const auto& [begin, end] : event_spans) {
    if (begin >= end)
      throw RuntimeError("teacher_forced_histories: empty span at position " +
                         std::to_string(begin));
    SlotHistory h;
    h.his = mean_rows(hidden, begin, end);
    h.valid = true;
    out.push_back(std::move(h));
  }
  return out;
}

PreparedExample prepare_example(const Example& ex, const Vocabulary& vocab,
                                const FrozenEncoder& frozen, const ModelConfig& cfg,
                                Stage stage) {
  validate_table(ex.table, cfg.slot_n);
  PreparedExample prep;
  prep.id = ex.id;
  prep.table_enc = encode_table(ex.table, vocab, cfg.max_src);
  prep.src_len = static_cast<int>(prep.table_enc.token_ids.size());

  if (stage == Stage::Finetune) {
    prep.ref_ids = tokenize(ex.reference, vocab);
    const int tgt_len = static_cast<int>(prep.ref_ids.size()) + 1;  // trailing [SEP]
    if (tgt_len > cfg.max_tgt)
      throw ValidationError("example '" + ex.id + "': reference length " +
                            std::to_string(tgt_len) + " exceeds max target length " +
                            std::to_string(cfg.max_tgt));
    prep.tgt_enc = parse_target(prep.ref_ids, prep.table_enc);
    prep.total_len = prep.src_len + tgt_len;
    prep.slot_of = prep.table_enc.slot_of;
    prep.slot_of.insert(prep.slot_of.end(), prep.tgt_enc.slot_of.begin(),
                        prep.tgt_enc.slot_of.end());
    prep.slot_of.push_back(-1);  // [SEP]
    // Recover global value spans for each close event.
    int open = -1;
    for (size_t i = 0; i < prep.ref_ids.size(); ++i) {
      if (prep.ref_ids[i] == kECls) open = static_cast<int>(i);
      if (prep.ref_ids[i] == kESep) {
        prep.event_spans.push_back({prep.src_len + open + 1, prep.src_len + static_cast<int>(i)});
        open = -1;
      }
    }
    for (const auto& [pos, slot] : prep.tgt_enc.complete_slot_events)
      prep.events.push_back({prep.src_len + pos, slot});
  } else {
    // Pre-training uses the corrupted table alone, bidirectionally; the
    // table's own [E_SEP]s act as the memory schedule.
    prep.total_len = prep.src_len;
    prep.slot_of = prep.table_enc.slot_of;
    for (size_t j = 0; j < prep.table_enc.slot_spans.size(); ++j) {
      const auto [begin, end] = prep.table_enc.slot_spans[j];
      prep.events.push_back({end, static_cast<int>(j)});  // end == [E_SEP] position
      prep.event_spans.push_back({begin, end});
    }
  }

  std::vector<int> full_ids = prep.table_enc.token_ids;
  if (stage == Stage::Finetune) {
    full_ids.insert(full_ids.end(), prep.ref_ids.begin(), prep.ref_ids.end());
    full_ids.push_back(kSep);
  }
  const int mask_src = stage == Stage::Finetune ? prep.src_len : prep.total_len;
  prep.mem0 = init_memory(prep.table_enc, frozen, cfg.slot_n);
  prep.histories = teacher_forced_histories(frozen, full_ids, mask_src, prep.event_spans);
  prep.mask_ta = build_seq2seq_mask(mask_src, prep.total_len - mask_src);
  prep.mask_slot = build_slot_mask(prep.mask_ta, mask_src, prep.slot_of);
  return prep;
}

SequenceItem make_training_item(const ModelParams& params, const PreparedExample& prep,
                                Stage stage, double mask_rate, bool memory_updates,
                                std::mt19937_64& rng) {
  SequenceItem item;
  item.labels.assign(prep.total_len, 0);
  item.label_mask.assign(prep.total_len, 0);

  if (stage == Stage::Finetune) {
    Corruption c = corrupt_reference(prep.ref_ids, mask_rate, rng);
    item.input.ids = prep.table_enc.token_ids;
    item.input.ids.insert(item.input.ids.end(), c.input_ids.begin(), c.input_ids.end());
    for (int pos : c.label_positions) {
      item.labels[prep.src_len + pos] = prep.ref_ids[pos];
      item.label_mask[prep.src_len + pos] = 1;
    }
    // The terminal [SEP] is always predicted so the model learns to stop.
    item.input.ids.push_back(kMask);
    item.labels[prep.total_len - 1] = kSep;
    item.label_mask[prep.total_len - 1] = 1;
  } else {
    Corruption c = corrupt_table(prep.table_enc.token_ids, mask_rate, rng);
    item.input.ids = c.input_ids;
    for (int pos : c.label_positions) {
      item.labels[pos] = prep.table_enc.token_ids[pos];
      item.label_mask[pos] = 1;
    }
  }
  for (auto m : item.label_mask) item.masked_count += m;

  item.input.mask_ta = prep.mask_ta;
  item.input.mask_slot = prep.mask_slot;

  // Memory schedule: state presented at position p reflects all close events
  // strictly before p.
  item.input.mem_states.push_back(prep.mem0.M);
  if (memory_updates && params.config.use_memory) {
    MemoryBank bank = prep.mem0;
    for (const auto& his : prep.histories) {
      bank = update_memory(params, bank, his);
      item.input.mem_states.push_back(bank.M);
    }
  }
  const int max_time = static_cast<int>(item.input.mem_states.size()) - 1;
  item.input.mem_refs.resize(prep.total_len);
  for (int p = 0; p < prep.total_len; ++p) {
    SlotRef ref;
    ref.slot = prep.slot_of[p];
    if (ref.slot >= 0) {
      int t = 0;
      for (const auto& [pos, slot] : prep.events)
        if (pos < p) ++t;
      ref.time = std::min(t, max_time);
    }
    item.input.mem_refs[p] = ref;
  }
  return item;
}

Tensor mlm_loss(const ModelParams& params, const std::vector<SequenceItem>& batch,
                real dropout_rate, std::mt19937_64* rng) {
  if (batch.empty()) throw ValidationError("mlm_loss: empty batch");
  long total = 0;
  for (const auto& item : batch) total += item.masked_count;
  if (total == 0) throw RuntimeError("mlm_loss: batch has no masked positions");
  Tensor loss;
  for (const auto& item : batch) {
    if (item.masked_count == 0) continue;
    Tensor logits = model_forward(params, item.input, dropout_rate, rng);
    Tensor ce = cross_entropy_masked(logits, item.labels, item.label_mask);
    Tensor weighted = scale(ce, static_cast<real>(item.masked_count) / total);
    loss = loss.defined() ? add(loss, weighted) : weighted;
  }
  return loss;
}

namespace {

std::uint64_t stage_stream(Stage stage) {
  switch (stage) {
    case Stage::Phase1: return 1;
    case Stage::Phase2: return 2;
    case Stage::Finetune: return 3;
  }
  return 0;
}

ModelParams clone_params(const ModelParams& p) {
  return ModelParams::from_tensors(p.config, p.to_tensors());
}

double prepared_validation_loss(const ModelParams& params,
                                const std::vector<PreparedExample>& prepared, Stage stage,
                                double mask_rate, bool memory_updates, std::uint64_t seed) {
  double total_loss = 0;
  long total_count = 0;
  for (size_t i = 0; i < prepared.size(); ++i) {
    std::mt19937_64 rng(derive_seed(seed, 0xa1 + i));
    SequenceItem item =
        make_training_item(params, prepared[i], stage, mask_rate, memory_updates, rng);
    if (item.masked_count == 0) continue;
    Tensor loss = mlm_loss(params, {item});
    total_loss += loss.at(0) * item.masked_count;
    total_count += item.masked_count;
  }
  return total_count ? total_loss / total_count : 0.0;
}

}  // namespace

TrainResult train_stage(ModelParams params, Stage stage, const std::vector<Example>& train,
                        const std::vector<Example>& val, const Vocabulary& vocab,
                        const TrainConfig& cfg, int epochs, int start_epoch,
                        OptimizerState opt,
                        const std::function<void(const TrainLogEntry&)>& on_log,
                        const ModelParams* frozen_source) {
  cfg.validate();
  if (train.empty()) throw ValidationError("train_stage: empty training set");
  const double mask_rate =
      stage == Stage::Finetune ? cfg.finetune_mask_rate : cfg.pretrain_mask_rate;
  const bool memory_updates = stage != Stage::Phase1;

  FrozenEncoder frozen(frozen_source ? *frozen_source : params);
  std::vector<PreparedExample> prepared;
  for (const auto& ex : train)
    prepared.push_back(prepare_example(ex, vocab, frozen, params.config, stage));
  std::vector<PreparedExample> val_prepared;
  if (stage == Stage::Finetune)
    for (const auto& ex : val)
      val_prepared.push_back(prepare_example(ex, vocab, frozen, params.config, stage));

  TrainResult result;
  result.opt = std::move(opt);
  result.best_val_loss = 1e300;
  std::vector<NamedTensor> best_tensors;

  auto refs = params.named_params();
  auto zero_grads = [&refs]() {
    for (auto& r : refs) r.tensor.node()->grad.assign(r.tensor.value().size(), real(0));
  };

  const int group_size = cfg.batch_size * cfg.grad_accum;
  for (int epoch = start_epoch; epoch < epochs; ++epoch) {
    std::vector<size_t> order(prepared.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, stage_stream(stage) * 1000003 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0;
    long epoch_batches = 0;
    for (size_t g = 0; g < order.size(); g += group_size) {
      const size_t g_end = std::min(order.size(), g + group_size);
      const int micros =
          static_cast<int>((g_end - g + cfg.batch_size - 1) / cfg.batch_size);
      zero_grads();
      double group_loss = 0;
      for (size_t b = g; b < g_end; b += cfg.batch_size) {
        const size_t b_end = std::min(g_end, b + static_cast<size_t>(cfg.batch_size));
        std::vector<SequenceItem> batch;
        std::mt19937_64 drop_rng(
            derive_seed(cfg.seed, stage_stream(stage) * 7777777 + epoch * 131071 + b));
        for (size_t i = b; i < b_end; ++i) {
          const size_t idx = order[i];
          std::mt19937_64 rng(derive_seed(
              cfg.seed, stage_stream(stage) * 1000033 + epoch * 524287 + idx));
          batch.push_back(make_training_item(params, prepared[idx], stage, mask_rate,
                                             memory_updates, rng));
        }
        Tensor loss = mlm_loss(params, batch, params.config.dropout, &drop_rng);
        group_loss += loss.at(0);
        backward(scale(loss, real(1) / micros));
      }
      adam_step(refs, result.opt, cfg.lr, cfg.weight_decay);
      const double mean_loss = group_loss / micros;
      epoch_loss += mean_loss;
      ++epoch_batches;
      TrainLogEntry entry{result.opt.step, mean_loss, cfg.lr, stage_name(stage)};
      result.log.push_back(entry);
      if (on_log) on_log(entry);
    }
    if (epoch_batches) result.final_train_loss = epoch_loss / epoch_batches;

    if (stage == Stage::Finetune && !val_prepared.empty()) {
      const double vloss = prepared_validation_loss(params, val_prepared, stage, mask_rate,
                                                    memory_updates, cfg.seed);
      if (vloss < result.best_val_loss) {
        result.best_val_loss = vloss;
        best_tensors = params.to_tensors();
      }
    }
  }

  if (stage == Stage::Finetune && !best_tensors.empty())
    params = ModelParams::from_tensors(params.config, best_tensors);
  result.params = std::move(params);
  return result;
}

double masked_reconstruction_accuracy(const ModelParams& params,
                                      const std::vector<Example>& data,
                                      const Vocabulary& vocab, Stage stage, double mask_rate,
                                      std::uint64_t seed, const ModelParams* frozen_source) {
  FrozenEncoder frozen(frozen_source ? *frozen_source : params);
  const bool memory_updates = stage != Stage::Phase1;
  long correct = 0, total = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    PreparedExample prep = prepare_example(data[i], vocab, frozen, params.config, stage);
    std::mt19937_64 rng(derive_seed(seed, 0xacc0 + i));
    SequenceItem item =
        make_training_item(params, prep, stage, mask_rate, memory_updates, rng);
    Tensor logits = model_forward(params, item.input);
    const int v = logits.cols();
    for (int p = 0; p < logits.rows(); ++p) {
      if (!item.label_mask[p]) continue;
      int argmax = 0;
      for (int j = 1; j < v; ++j)
        if (logits.at(p, j) > logits.at(p, argmax)) argmax = j;
      correct += argmax == item.labels[p];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / total : 0.0;
}

double validation_loss(const ModelParams& params, const FrozenEncoder& frozen,
                       const std::vector<Example>& val, const Vocabulary& vocab, Stage stage,
                       double mask_rate, std::uint64_t seed) {
  std::vector<PreparedExample> prepared;
  for (const auto& ex : val)
    prepared.push_back(prepare_example(ex, vocab, frozen, params.config, stage));
  return prepared_validation_loss(params, prepared, stage, mask_rate,
                                  stage != Stage::Phase1, seed);
}

}  // namespace amg
