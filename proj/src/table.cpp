#include "amg/table.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace amg {

const std::array<std::string, kNumReserved> kReservedTokens = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[E_CLS]", "[E_SEP]"};

namespace {

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

std::string to_lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

// Returns the reserved token matched case-insensitively at position i, or -1.
int match_reserved(const std::string& text, size_t i) {
  for (int r = 0; r < kNumReserved; ++r) {
    const std::string& tok = kReservedTokens[r];
    if (i + tok.size() > text.size()) continue;
    bool ok = true;
    for (size_t k = 0; k < tok.size(); ++k) {
      if (std::tolower(static_cast<unsigned char>(text[i + k])) !=
          std::tolower(static_cast<unsigned char>(tok[k]))) {
        ok = false;
        break;
      }
    }
    if (ok) return r;
  }
  return -1;
}

}  // namespace

std::string normalize_attribute(const std::string& raw) {
  std::string out;
  bool pending_space = false;
  for (char c : raw) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!out.empty()) pending_space = true;
    } else {
      if (pending_space) {
        out += ' ';
        pending_space = false;
      }
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
  }
  return out;
}

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (c == '[') {
      const int r = match_reserved(text, i);
      if (r >= 0) {
        tokens.push_back(kReservedTokens[r]);
        i += kReservedTokens[r].size();
        continue;
      }
    }
    if (is_word_char(c)) {
      size_t j = i;
      while (j < text.size() && is_word_char(text[j])) ++j;
      tokens.push_back(to_lower(text.substr(i, j - i)));
      i = j;
    } else {
      tokens.push_back(std::string(1, c));
      ++i;
    }
  }
  return tokens;
}

void validate_table(const Table& table, int max_slots) {
  const size_t m = table.slots.size();
  if (m < 1)
    throw ValidationError("table '" + table.id + "': must have at least one slot");
  if (static_cast<int>(m) > max_slots)
    throw ValidationError("table '" + table.id + "': " + std::to_string(m) +
                          " slots exceed max-slots " + std::to_string(max_slots));
  std::set<std::string> seen;
  for (const auto& slot : table.slots) {
    if (slot.attribute.empty())
      throw ValidationError("table '" + table.id + "': empty attribute name");
    if (slot.value.empty())
      throw ValidationError("table '" + table.id + "': empty value for attribute '" +
                            slot.attribute + "'");
    for (const auto& tok : slot.value)
      for (const auto& res : kReservedTokens)
        if (to_lower(tok) == to_lower(res))
          throw ValidationError("table '" + table.id + "': reserved token '" + res +
                                "' in value of '" + slot.attribute + "'");
    if (!seen.insert(normalize_attribute(slot.attribute)).second)
      throw ValidationError("table '" + table.id + "': duplicate attribute '" +
                            slot.attribute + "'");
  }
}

void Vocabulary::index() {
  token_to_id_.clear();
  for (size_t i = 0; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& corpus,
                             int min_count) {
  if (corpus.empty()) throw ValidationError("build_vocab: empty corpus");
  std::map<std::string, long> counts;
  std::set<std::string> reserved(kReservedTokens.begin(), kReservedTokens.end());
  for (const auto& doc : corpus)
    for (const auto& tok : doc)
      if (!reserved.count(tok)) ++counts[tok];
  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.id_to_token_.assign(kReservedTokens.begin(), kReservedTokens.end());
  for (const auto& [tok, cnt] : items)
    if (cnt >= min_count) v.id_to_token_.push_back(tok);
  v.index();
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("vocab: cannot open " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) v.id_to_token_.push_back(line);
  for (int i = 0; i < kNumReserved; ++i)
    if (static_cast<size_t>(i) >= v.id_to_token_.size() ||
        v.id_to_token_[i] != kReservedTokens[i])
      throw ValidationError("vocab: " + path + " does not start with the reserved tokens");
  v.index();
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("vocab: cannot open " + path + " for writing");
  for (const auto& tok : id_to_token_) out << tok << "\n";
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw RuntimeError("vocab: id " + std::to_string(id) + " out of range");
  return id_to_token_[id];
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (const auto& tok : split_tokens(text)) ids.push_back(vocab.id(tok));
  return ids;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

std::vector<std::string> linearize_tokens(const Table& table) {
  std::vector<std::string> tokens;
  tokens.push_back(kReservedTokens[kCls]);
  for (const auto& slot : table.slots) {
    for (const auto& t : split_tokens(slot.attribute)) tokens.push_back(t);
    tokens.push_back("is");
    tokens.push_back(kReservedTokens[kECls]);
    for (const auto& t : slot.value) tokens.push_back(to_lower(t));
    tokens.push_back(kReservedTokens[kESep]);
    tokens.push_back(";");
  }
  tokens.push_back(kReservedTokens[kSep]);
  return tokens;
}

TableEncoding encode_table(const Table& table, const Vocabulary& vocab, int max_src) {
  TableEncoding enc;
  enc.token_ids.push_back(kCls);
  enc.slot_of.push_back(-1);
  for (size_t s = 0; s < table.slots.size(); ++s) {
    const auto& slot = table.slots[s];
    for (const auto& t : split_tokens(slot.attribute)) {
      enc.token_ids.push_back(vocab.id(t));
      enc.slot_of.push_back(-1);
    }
    enc.token_ids.push_back(vocab.id("is"));
    enc.slot_of.push_back(-1);
    enc.token_ids.push_back(kECls);
    enc.slot_of.push_back(-1);
    const int span_begin = static_cast<int>(enc.token_ids.size());
    for (const auto& t : slot.value) {
      enc.token_ids.push_back(vocab.id(to_lower(t)));
      enc.slot_of.push_back(static_cast<int>(s));
    }
    enc.slot_spans.push_back({span_begin, static_cast<int>(enc.token_ids.size())});
    enc.token_ids.push_back(kESep);
    enc.slot_of.push_back(-1);
    enc.token_ids.push_back(vocab.id(";"));
    enc.slot_of.push_back(-1);
    if (static_cast<int>(enc.token_ids.size()) + 1 > max_src)
      throw ValidationError("linearize: table '" + table.id + "' exceeds max source length " +
                            std::to_string(max_src) + " at slot " + std::to_string(s));
  }
  enc.token_ids.push_back(kSep);
  enc.slot_of.push_back(-1);
  return enc;
}

TargetEncoding parse_target(const std::vector<int>& reference_ids,
                            const TableEncoding& table) {
  TargetEncoding enc;
  enc.token_ids = reference_ids;
  enc.slot_of.assign(reference_ids.size(), -1);
  int open = -1;
  struct Span {
    int begin, end, sep_pos;
  };
  std::vector<Span> spans;
  for (size_t i = 0; i < reference_ids.size(); ++i) {
    if (reference_ids[i] == kECls) {
      if (open >= 0)
        throw ValidationError("parse_target: unbalanced [E_CLS] at position " +
                              std::to_string(i));
      open = static_cast<int>(i);
    } else if (reference_ids[i] == kESep) {
      if (open < 0)
        throw ValidationError("parse_target: unbalanced [E_SEP] at position " +
                              std::to_string(i));
      spans.push_back({open + 1, static_cast<int>(i), static_cast<int>(i)});
      open = -1;
    }
  }
  if (open >= 0)
    throw ValidationError("parse_target: unclosed [E_CLS] at position " + std::to_string(open));

  for (const auto& span : spans) {
    // Maximal multiset token overlap with each slot's value span; ties go to
    // the lowest slot index.
    int best_slot = 0;
    long best_overlap = -1;
    for (size_t s = 0; s < table.slot_spans.size(); ++s) {
      std::map<int, int> counts;
      for (int p = table.slot_spans[s].first; p < table.slot_spans[s].second; ++p)
        ++counts[table.token_ids[p]];
      long overlap = 0;
      for (int p = span.begin; p < span.end; ++p) {
        auto it = counts.find(reference_ids[p]);
        if (it != counts.end() && it->second > 0) {
          ++overlap;
          --it->second;
        }
      }
      if (overlap > best_overlap) {
        best_overlap = overlap;
        best_slot = static_cast<int>(s);
      }
    }
    for (int p = span.begin; p < span.end; ++p) enc.slot_of[p] = best_slot;
    enc.complete_slot_events.push_back({span.sep_pos, best_slot});
  }
  return enc;
}

std::vector<Example> load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("dataset: cannot open " + path);
  std::vector<Example> examples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("dataset: " + path + " line " + std::to_string(line_no) + ": " +
                            e.what());
    }
    Example ex;
    try {
      ex.id = j.at("id").get<std::string>();
      for (const auto& pair : j.at("table")) {
        Slot slot;
        slot.attribute = normalize_attribute(pair.at(0).get<std::string>());
        slot.value = split_tokens(pair.at(1).get<std::string>());
        ex.table.slots.push_back(std::move(slot));
      }
      ex.table.id = ex.id;
      if (j.contains("reference")) ex.reference = j.at("reference").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("dataset: " + path + " line " + std::to_string(line_no) + ": " +
                            e.what());
    }
    examples.push_back(std::move(ex));
  }
  return examples;
}

void save_jsonl(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("dataset: cannot open " + path + " for writing");
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["id"] = ex.id;
    nlohmann::json table = nlohmann::json::array();
    for (const auto& slot : ex.table.slots) {
      std::string value;
      for (const auto& t : slot.value) {
        if (!value.empty()) value += ' ';
        value += t;
      }
      table.push_back({slot.attribute, value});
    }
    j["table"] = table;
    j["reference"] = ex.reference;
    out << j.dump() << "\n";
  }
}

}  // namespace amg
