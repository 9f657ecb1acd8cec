#pragma once

#include "amg/model.hpp"
#include "amg/table.hpp"

#include <string>
#include <vector>

namespace amg {

struct DecodeOptions {
  int beam_size = 3;
  double length_penalty = 1.0;
  int max_tgt = 64;
};

// One live beam entry. Memory banks are cloned on branch, so hypotheses with
// identical token prefixes have bit-identical memory states.
struct Hypothesis {
  std::vector<int> tokens;  // generated target tokens, [SEP] last when finished
  double logprob = 0;
  std::vector<double> step_logprobs;
  std::vector<int> slot_of;                 // per generated token
  std::vector<std::pair<int, int>> events;  // (global [E_SEP] position, slot)
  std::vector<Tensor> mem_states;           // M^0..M^E
  int open_pos = -1;   // index in `tokens` of the pending [E_CLS], -1 if none
  int open_slot = -1;  // provisional match for the open span
  bool finished = false;
  bool truncated = false;
};

struct DecodeResult {
  std::vector<int> tokens;  // raw generated sequence
  std::string text;         // surface form, boundary tokens stripped
  double logprob = 0;
  double score = 0;  // logprob / length^penalty
  bool truncated = false;
  bool malformed_span = false;  // unclosed [E_CLS]; its span is dropped from `text`
  int update_count = 0;         // memory updates fired (== emitted [E_SEP]s)
};

class Decoder {
 public:
  Decoder(const ModelParams& params, const Vocabulary& vocab);
  // Decode with a memory encoder taken from different parameters (the
  // stage-entry snapshot the model was trained against).
  Decoder(const ModelParams& params, const ModelParams& frozen_source,
          const Vocabulary& vocab);

  // Log-softmax over the vocabulary for the next position. Structurally
  // impossible tokens ([PAD]/[UNK]/[CLS]/[MASK], [E_CLS] inside a span,
  // [E_SEP] outside one or right after [E_CLS]) are -inf.
  std::vector<double> step(const TableEncoding& table, const Hypothesis& hyp) const;

  // Appends `token`; an [E_SEP] closes the open span, extracts its history
  // and updates the hypothesis's memory bank.
  Hypothesis advance(const TableEncoding& table, const Hypothesis& hyp, int token,
                     double token_logprob) const;

  DecodeResult beam_search(const Table& table, const DecodeOptions& opt) const;
  DecodeResult decode_encoding(const TableEncoding& table, const DecodeOptions& opt) const;

  const ModelParams& params() const { return params_; }

 private:
  Hypothesis initial(const TableEncoding& table) const;

  ModelParams params_;
  FrozenEncoder frozen_;
  const Vocabulary& vocab_;
};

// Reads JSONL tables ({"id","table"}), writes one {"id","prediction",
// "malformed_span"} per line, order preserved. Returns the number of
// predictions written. Warns on stderr when `stage` is not "finetuned".
long generate_file(const ModelParams& params, const std::string& stage,
                   const Vocabulary& vocab, const std::string& input_path,
                   const std::string& output_path, const DecodeOptions& opt,
                   const ModelParams* frozen_source = nullptr);

}  // namespace amg
