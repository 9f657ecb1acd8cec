#pragma once

#include "amg/common.hpp"

#include <array>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace amg {

// Reserved token ids, fixed order at the bottom of every vocabulary.
enum ReservedId : int {
  kPad = 0,
  kUnk = 1,
  kCls = 2,
  kSep = 3,
  kMask = 4,
  kECls = 5,  // slot value start
  kESep = 6,  // slot value end
};
constexpr int kNumReserved = 7;
extern const std::array<std::string, kNumReserved> kReservedTokens;

struct Slot {
  std::string attribute;           // normalized (lowercase, collapsed whitespace)
  std::vector<std::string> value;  // surface tokens
};

struct Table {
  std::string id;
  std::vector<Slot> slots;
};

std::string normalize_attribute(const std::string& raw);

// Lowercases and splits on whitespace and punctuation boundaries; bracketed
// reserved tokens ([E_CLS] etc.) stay atomic. '_' counts as a word character.
std::vector<std::string> split_tokens(const std::string& text);

// Throws ValidationError on any violated table invariant.
void validate_table(const Table& table, int max_slots);

class Vocabulary {
 public:
  // Reserved tokens first, then corpus tokens by (descending count,
  // lexicographic); tokens below min_count dropped.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, int min_count);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int id(const std::string& token) const;  // kUnk for out-of-vocabulary
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(id_to_token_.size()); }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  void index();
};

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

struct TableEncoding {
  std::vector<int> token_ids;                     // [CLS] ... [SEP]
  std::vector<int> slot_of;                       // per position, -1 for structural tokens
  std::vector<std::pair<int, int>> slot_spans;    // per-slot half-open value ranges
};

// Per slot i emits `a_i is [E_CLS] v_i... [E_SEP] ;`, wrapped in [CLS]/[SEP].
std::vector<std::string> linearize_tokens(const Table& table);
TableEncoding encode_table(const Table& table, const Vocabulary& vocab, int max_src = 300);

struct TargetEncoding {
  std::vector<int> token_ids;
  std::vector<int> slot_of;  // -1 outside bracketed spans
  std::vector<std::pair<int, int>> complete_slot_events;  // ([E_SEP] position, slot)
};

// Matches each [E_CLS]..[E_SEP] span to the table slot with maximal token
// overlap (ties -> lowest slot index). Unbalanced boundary tokens raise a
// ValidationError naming the first offending position.
TargetEncoding parse_target(const std::vector<int>& reference_ids, const TableEncoding& table);

// JSONL dataset: one {"id", "table", "reference"} object per line.
struct Example {
  std::string id;
  Table table;
  std::string reference;
};

std::vector<Example> load_jsonl(const std::string& path);
void save_jsonl(const std::string& path, const std::vector<Example>& examples);

}  // namespace amg
