#pragma once

#include "amg/checkpoint.hpp"
#include "amg/masks.hpp"
#include "amg/table.hpp"
#include "amg/tensor.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace amg {

struct ModelConfig {
  int d_h = 64;
  int n_layers = 4;
  int n_heads = 4;
  int slot_layers = 2;  // top layers with slot attention
  int slot_n = 10;
  int vocab_size = 0;
  int max_src = 300;
  int max_tgt = 64;
  real dropout = real(0.1);
  bool use_slot_attention = true;  // off = "w/o span" ablation
  bool use_memory = true;          // off = "w/o mem" ablation (bank frozen at init)

  int d_k() const { return d_h / n_heads; }
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& json);
};

struct LayerParams {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor Wq, Wk, Wv, Wo;          // token attention projections
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  bool has_slot = false;
  Tensor Wq_sa, Wk_sa, Wv_sa;     // slot attention projections (top layers only)
};

struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = false;  // decoupled weight decay applies to matrices only
};

struct ModelParams {
  ModelConfig config;
  Tensor tok_emb;   // vocab x d_h, tied with the MLM head
  Tensor pos_emb;   // (max_src + max_tgt) x d_h
  Tensor final_ln_g, final_ln_b;
  std::vector<LayerParams> layers;
  Tensor mem_null;                        // learned row for slot-less positions
  Tensor mem_Wa, mem_Wb, mem_Wc, mem_Wd;  // gated update, each d_h x d_h
  Tensor mem_ba, mem_bb, mem_bc, mem_bd;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
  std::vector<ParamRef> named_params() const;

  std::vector<NamedTensor> to_tensors() const;
  static ModelParams from_tensors(const ModelConfig& cfg,
                                  const std::vector<NamedTensor>& tensors);
};

// Checkpoint = AMGT container + sidecar metadata JSON (<path>.meta.json) with
// the ModelConfig and a stage tag: "init" | "phase1" | "phase2" | "finetuned".
// When given, the stage-entry snapshot backing the frozen memory encoder is
// stored alongside the trained weights under "frozen/" tensor names, so
// decoding can rebuild the exact encoder the model was trained against.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::string& stage,
                     const ModelParams* frozen_source = nullptr);
struct Checkpoint {
  ModelParams params;
  std::string stage;
  std::optional<ModelParams> frozen_source;
};
Checkpoint load_checkpoint(const std::string& path);

struct MemoryBank {
  Tensor M;                  // slot_n x d_h; row j holds slot j's memory vector
  std::vector<char> active;  // true for rows backing a real slot
};

struct SlotHistory {
  Tensor his;  // d_h
  bool valid = false;
};

// Immutable forward-only snapshot of the parameters; runs token attention in
// every layer and never receives gradients.
class FrozenEncoder {
 public:
  explicit FrozenEncoder(const ModelParams& source);
  // Final hidden states (post final layer norm), N x d_h.
  Tensor encode(const std::vector<int>& ids, const Tensor& mask_ta) const;
  const ModelConfig& config() const { return params_.config; }

 private:
  ModelParams params_;
};

// --- attention building blocks (exposed for oracle tests) ---

Tensor token_attention(const ModelConfig& cfg, const LayerParams& layer, const Tensor& x,
                       const Tensor& mask_ta, real dropout_rate = 0,
                       std::mt19937_64* rng = nullptr);
Tensor slot_attention(const ModelConfig& cfg, const LayerParams& layer, const Tensor& x,
                      const Tensor& scattered_memory, const Tensor& mask_slot,
                      real dropout_rate = 0, std::mt19937_64* rng = nullptr);
Tensor fuse(const Tensor& token_out, const Tensor& slot_out);

// M_j^0 = mean of frozen final hidden states over slot j's value span;
// padding rows zero.
MemoryBank init_memory(const TableEncoding& table, const FrozenEncoder& frozen, int slot_n);

// his = mean of frozen final hidden states over [span_begin, span_end) of the
// given sequence (table context plus target prefix, seq2seq mask).
SlotHistory extract_history(const std::vector<int>& context_ids, int src_len, int span_begin,
                            int span_end, const FrozenEncoder& frozen);

// Gated update on active rows: M_j <- (1-z_j) * M_j + z_j * tanh-candidate.
MemoryBank update_memory(const ModelParams& params, const MemoryBank& memory,
                         const SlotHistory& his);

// --- full network forward ---

struct ForwardInput {
  std::vector<int> ids;  // N tokens, [MASK] at positions to predict
  Tensor mask_ta;
  Tensor mask_slot;                // may be undefined when slot attention is off
  std::vector<Tensor> mem_states;  // M^0..M^E memory banks
  std::vector<SlotRef> mem_refs;   // per position (slot, time); empty -> all null
};

// Logits over the vocabulary at every position, N x vocab.
Tensor model_forward(const ModelParams& params, const ForwardInput& input,
                     real dropout_rate = 0, std::mt19937_64* rng = nullptr);

}  // namespace amg
