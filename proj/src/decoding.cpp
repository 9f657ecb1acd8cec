#include "amg/decoding.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>

namespace amg {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Maximal multiset token overlap against each slot's value span, ties to the
// lowest slot index. Mirrors the reference-side matching rule.
int match_slot(const std::vector<int>& span_ids, const TableEncoding& table) {
  int best_slot = 0;
  long best_overlap = -1;
  for (size_t s = 0; s < table.slot_spans.size(); ++s) {
    std::map<int, int> counts;
    for (int p = table.slot_spans[s].first; p < table.slot_spans[s].second; ++p)
      ++counts[table.token_ids[p]];
    long overlap = 0;
    for (int id : span_ids) {
      auto it = counts.find(id);
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
  return best_slot;
}

// Slot whose attribute tokens best overlap the generated attribute mention.
// The source linearizes each slot as `a_i is [E_CLS] v_i... [E_SEP] ;`, so the
// attribute tokens for slot s sit between the previous segment and the two
// structural tokens preceding the value span. Ties go to the lowest index; no
// overlap at all falls back to the empty-span rule.
int match_slot_by_attribute(const std::vector<int>& mention, const TableEncoding& table) {
  int best_slot = -1;
  long best_overlap = 0;
  for (size_t s = 0; s < table.slot_spans.size(); ++s) {
    const int seg_start = s == 0 ? 1 : table.slot_spans[s - 1].second + 2;
    const int attr_end = table.slot_spans[s].first - 2;
    std::map<int, int> counts;
    for (int p = std::max(seg_start, 0);
         p < std::min<int>(attr_end, static_cast<int>(table.token_ids.size())); ++p)
      ++counts[table.token_ids[p]];
    long overlap = 0;
    for (int id : mention) {
      auto it = counts.find(id);
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
  return best_slot;
}

std::vector<char> active_flags(const TableEncoding& table, int slot_n) {
  std::vector<char> active(slot_n, 0);
  for (size_t j = 0; j < table.slot_spans.size() && j < static_cast<size_t>(slot_n); ++j)
    active[j] = 1;
  return active;
}

}  // namespace

Decoder::Decoder(const ModelParams& params, const Vocabulary& vocab)
    : params_(params), frozen_(params), vocab_(vocab) {}

Decoder::Decoder(const ModelParams& params, const ModelParams& frozen_source,
                 const Vocabulary& vocab)
    : params_(params), frozen_(frozen_source), vocab_(vocab) {}

Hypothesis Decoder::initial(const TableEncoding& table) const {
  Hypothesis hyp;
  hyp.mem_states.push_back(init_memory(table, frozen_, params_.config.slot_n).M);
  return hyp;
}

std::vector<double> Decoder::step(const TableEncoding& table, const Hypothesis& hyp) const {
  if (hyp.finished) throw RuntimeError("decode step on a finished hypothesis");
  const int src_len = static_cast<int>(table.token_ids.size());
  const int gen_len = static_cast<int>(hyp.tokens.size());
  const int n = src_len + gen_len + 1;

  ForwardInput input;
  input.ids = table.token_ids;
  input.ids.insert(input.ids.end(), hyp.tokens.begin(), hyp.tokens.end());
  input.ids.push_back(kMask);
  input.mask_ta = build_seq2seq_mask(src_len, gen_len + 1);

  std::vector<int> slot_of = table.slot_of;
  slot_of.insert(slot_of.end(), hyp.slot_of.begin(), hyp.slot_of.end());
  slot_of.push_back(hyp.open_pos >= 0 ? hyp.open_slot : -1);

  if (params_.config.use_slot_attention) {
    input.mask_slot = build_slot_mask(input.mask_ta, src_len, slot_of);
    input.mem_states = hyp.mem_states;
    const int max_time = static_cast<int>(hyp.mem_states.size()) - 1;
    input.mem_refs.resize(n);
    for (int p = 0; p < n; ++p) {
      SlotRef ref;
      ref.slot = slot_of[p];
      if (ref.slot >= 0) {
        int t = 0;
        for (const auto& [pos, slot] : hyp.events)
          if (pos < p) ++t;
        ref.time = std::min(t, max_time);
      }
      input.mem_refs[p] = ref;
    }
  }

  Tensor logits = model_forward(params_, input);
  const int v = logits.cols();
  const int row = n - 1;
  double max_logit = logits.at(row, 0);
  for (int j = 1; j < v; ++j) max_logit = std::max(max_logit, (double)logits.at(row, j));
  double lse = 0;
  for (int j = 0; j < v; ++j) lse += std::exp(logits.at(row, j) - max_logit);
  lse = max_logit + std::log(lse);

  std::vector<double> logprobs(v);
  for (int j = 0; j < v; ++j) logprobs[j] = logits.at(row, j) - lse;

  logprobs[kPad] = logprobs[kUnk] = logprobs[kCls] = logprobs[kMask] = kNegInf;
  if (hyp.open_pos >= 0) {
    logprobs[kECls] = kNegInf;
    if (hyp.open_pos == gen_len - 1) logprobs[kESep] = kNegInf;  // empty span
  } else {
    logprobs[kESep] = kNegInf;
  }
  return logprobs;
}

Hypothesis Decoder::advance(const TableEncoding& table, const Hypothesis& hyp, int token,
                            double token_logprob) const {
  const int src_len = static_cast<int>(table.token_ids.size());
  Hypothesis next = hyp;
  const int pos = static_cast<int>(next.tokens.size());
  next.tokens.push_back(token);
  next.logprob += token_logprob;
  next.step_logprobs.push_back(token_logprob);
  next.slot_of.push_back(-1);

  if (token == kSep) {
    next.finished = true;
    return next;
  }
  if (token == kECls) {
    next.open_pos = pos;
    // Provisional label from the attribute mention generated since the last
    // close; mirrors the teacher-forced schedule, where the first value
    // position already carries the true slot.
    std::vector<int> mention;
    for (int p = pos - 1; p >= 0 && next.slot_of[p] < 0; --p) {
      const int id = next.tokens[p];
      if (id == kECls || id == kESep || id == kSep || id == kCls) break;
      mention.push_back(id);
    }
    const int by_attr = match_slot_by_attribute(mention, table);
    next.open_slot = by_attr >= 0 ? by_attr : match_slot({}, table);
    return next;
  }
  if (next.open_pos < 0) return next;

  std::vector<int> span(next.tokens.begin() + next.open_pos + 1,
                        token == kESep ? next.tokens.end() - 1 : next.tokens.end());
  const int slot = match_slot(span, table);
  if (token != kESep) {
    next.open_slot = slot;
    for (int p = next.open_pos + 1; p <= pos; ++p) next.slot_of[p] = slot;
    return next;
  }

  // Slot-close event: relabel the span, extract its history, update memory.
  for (int p = next.open_pos + 1; p < pos; ++p) next.slot_of[p] = slot;
  next.events.push_back({src_len + pos, slot});
  if (params_.config.use_memory) {
    std::vector<int> context = table.token_ids;
    context.insert(context.end(), next.tokens.begin(), next.tokens.end());
    SlotHistory his = extract_history(context, src_len, src_len + next.open_pos + 1,
                                      src_len + pos, frozen_);
    MemoryBank bank{next.mem_states.back(), active_flags(table, params_.config.slot_n)};
    next.mem_states.push_back(update_memory(params_, bank, his).M);
  }
  next.open_pos = -1;
  next.open_slot = -1;
  return next;
}

DecodeResult Decoder::decode_encoding(const TableEncoding& table,
                                      const DecodeOptions& opt) const {
  if (opt.beam_size < 1) throw ValidationError("decode: beam_size must be >= 1");
  if (opt.max_tgt < 1) throw ValidationError("decode: max_tgt must be >= 1");
  const int max_tgt = std::min(opt.max_tgt, params_.config.max_tgt);

  std::vector<Hypothesis> live{initial(table)};
  std::vector<Hypothesis> done;

  while (!live.empty()) {
    struct Candidate {
      size_t parent;
      int token;
      double token_logprob;
      double total;
    };
    std::vector<Candidate> candidates;
    for (size_t h = 0; h < live.size(); ++h) {
      std::vector<double> logprobs = step(table, live[h]);
      for (int j = 0; j < static_cast<int>(logprobs.size()); ++j)
        if (logprobs[j] != kNegInf)
          candidates.push_back({h, j, logprobs[j], live[h].logprob + logprobs[j]});
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.total != b.total) return a.total > b.total;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    if (candidates.size() > static_cast<size_t>(opt.beam_size))
      candidates.resize(opt.beam_size);

    std::vector<Hypothesis> next_live;
    for (const auto& c : candidates) {
      Hypothesis hyp = advance(table, live[c.parent], c.token, c.token_logprob);
      if (hyp.finished) {
        done.push_back(std::move(hyp));
      } else if (static_cast<int>(hyp.tokens.size()) >= max_tgt) {
        hyp.finished = true;
        hyp.truncated = true;
        done.push_back(std::move(hyp));
      } else {
        next_live.push_back(std::move(hyp));
      }
    }
    live = std::move(next_live);
  }

  auto final_score = [&](const Hypothesis& h) {
    return h.logprob / std::pow(static_cast<double>(h.tokens.size()), opt.length_penalty);
  };
  const Hypothesis* best = nullptr;
  double best_score = kNegInf;
  for (const auto& h : done) {
    const double s = final_score(h);
    if (best == nullptr || s > best_score ||
        (s == best_score && (h.tokens.size() < best->tokens.size() ||
                             (h.tokens.size() == best->tokens.size() &&
                              h.tokens < best->tokens)))) {
      best = &h;
      best_score = s;
    }
  }
  if (best == nullptr) throw RuntimeError("decode: no hypothesis finished");

  DecodeResult result;
  result.tokens = best->tokens;
  result.logprob = best->logprob;
  result.score = best_score;
  result.truncated = best->truncated;
  result.malformed_span = best->open_pos >= 0;
  result.update_count =
      params_.config.use_memory ? static_cast<int>(best->events.size()) : 0;

  std::vector<int> surface;
  const int cutoff =
      result.malformed_span ? best->open_pos : static_cast<int>(best->tokens.size());
  for (int p = 0; p < cutoff; ++p) {
    const int id = best->tokens[p];
    if (id == kECls || id == kESep || id == kSep) continue;
    surface.push_back(id);
  }
  result.text = detokenize(surface, vocab_);
  return result;
}

DecodeResult Decoder::beam_search(const Table& table, const DecodeOptions& opt) const {
  validate_table(table, params_.config.slot_n);
  return decode_encoding(encode_table(table, vocab_, params_.config.max_src), opt);
}

long generate_file(const ModelParams& params, const std::string& stage,
                   const Vocabulary& vocab, const std::string& input_path,
                   const std::string& output_path, const DecodeOptions& opt,
                   const ModelParams* frozen_source) {
  if (stage != "finetuned")
    std::cerr << "warning: generating from a checkpoint at stage '" << stage
              << "', expected 'finetuned'\n";
  std::vector<Example> examples = load_jsonl(input_path);
  std::ofstream out(output_path, std::ios::trunc);
  if (!out) throw RuntimeError("generate: cannot open " + output_path + " for writing");
  Decoder decoder = frozen_source ? Decoder(params, *frozen_source, vocab)
                                  : Decoder(params, vocab);
  long written = 0;
  for (const auto& ex : examples) {
    DecodeResult r = decoder.beam_search(ex.table, opt);
    nlohmann::json j;
    j["id"] = ex.id;
    j["prediction"] = r.text;
    j["malformed_span"] = r.malformed_span;
    out << j.dump() << "\n";
    ++written;
  }
  return written;
}

}  // namespace amg
