#include "amg/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <unordered_set>

namespace amg {

namespace {

constexpr double kEps = 1e-9;

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(const Tokens& toks, int n) {
  NgramCounts counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i)
    ++counts[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

int lcs_length(const Tokens& a, const Tokens& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[m];
}

std::unordered_set<std::string> table_token_set(const Table& table) {
  std::unordered_set<std::string> set;
  for (const auto& slot : table.slots) {
    for (const auto& t : split_tokens(slot.attribute)) set.insert(t);
    for (const auto& t : slot.value) set.insert(t);
  }
  return set;
}

double entailment_weight(const std::vector<std::string>& gram,
                         const std::unordered_set<std::string>& table_set) {
  if (gram.empty()) return 0;
  int hits = 0;
  for (const auto& t : gram) hits += table_set.count(t) > 0;
  return static_cast<double>(hits) / gram.size();
}

double geomean4(const double terms[4]) {
  double log_sum = 0;
  for (int i = 0; i < 4; ++i) log_sum += std::log(std::max(terms[i], kEps));
  return std::exp(log_sum / 4);
}

double r_tab(const Table& table, const Tokens& pred) {
  if (table.slots.empty()) return 0;
  double sum = 0;
  for (const auto& slot : table.slots)
    sum += slot.value.empty()
               ? 0
               : static_cast<double>(lcs_length(slot.value, pred)) / slot.value.size();
  return sum / table.slots.size();
}

struct ExampleParent {
  PRF full;  // with reference
  PRF tab;   // reference-free
};

ExampleParent parent_example(const ParentInput& ex, double lambda) {
  const auto table_set = table_token_set(ex.table);
  double p_terms[4], r_terms[4], pt_terms[4];
  for (int n = 1; n <= 4; ++n) {
    const NgramCounts pred_n = ngrams(ex.pred, n);
    const NgramCounts ref_n = ngrams(ex.ref, n);
    double p_num = 0, p_den = 0, r_num = 0, r_den = 0, pt_num = 0;
    for (const auto& [g, cp] : pred_n) {
      const double w = entailment_weight(g, table_set);
      auto it = ref_n.find(g);
      const int match = it == ref_n.end() ? 0 : std::min(cp, it->second);
      p_num += match + (cp - match) * w;
      pt_num += cp * w;
      p_den += cp;
    }
    for (const auto& [g, cr] : ref_n) {
      const double w = entailment_weight(g, table_set);
      auto it = pred_n.find(g);
      const int match = it == pred_n.end() ? 0 : std::min(cr, it->second);
      r_num += match + (cr - match) * w;
      r_den += cr;
    }
    p_terms[n - 1] = p_den > 0 ? p_num / p_den : 0;
    pt_terms[n - 1] = p_den > 0 ? pt_num / p_den : 0;
    r_terms[n - 1] = r_den > 0 ? r_num / r_den : 0;
  }
  const double rt = r_tab(ex.table, ex.pred);

  ExampleParent out;
  out.full.p = geomean4(p_terms);
  const double r_ref = geomean4(r_terms);
  out.full.r = std::pow(r_ref, lambda) * std::pow(rt, 1 - lambda);
  out.full.f =
      out.full.p + out.full.r > 0 ? 2 * out.full.p * out.full.r / (out.full.p + out.full.r) : 0;
  out.tab.p = geomean4(pt_terms);
  out.tab.r = rt;
  out.tab.f = out.tab.p + out.tab.r > 0 ? 2 * out.tab.p * out.tab.r / (out.tab.p + out.tab.r) : 0;
  return out;
}

PRF mean_prf(const std::vector<PRF>& scores) {
  PRF out;
  for (const auto& s : scores) {
    out.p += s.p;
    out.r += s.r;
    out.f += s.f;
  }
  if (!scores.empty()) {
    out.p /= scores.size();
    out.r /= scores.size();
    out.f /= scores.size();
  }
  return out;
}

double rouge_pair(const Tokens& pred, const Tokens& ref) {
  if (pred.empty() || ref.empty()) return 0;
  const int lcs = lcs_length(pred, ref);
  if (lcs == 0) return 0;
  const double p = static_cast<double>(lcs) / pred.size();
  const double r = static_cast<double>(lcs) / ref.size();
  return 2 * p * r / (p + r);
}

Tokens strip_boundaries(const Tokens& toks) {
  Tokens out;
  for (const auto& t : toks)
    if (t != kReservedTokens[kECls] && t != kReservedTokens[kESep]) out.push_back(t);
  return out;
}

}  // namespace

double bleu4(const std::vector<std::pair<Tokens, Tokens>>& pred_ref) {
  if (pred_ref.empty()) throw ValidationError("bleu4: empty corpus");
  long pred_len = 0, ref_len = 0;
  double terms[4];
  for (int n = 1; n <= 4; ++n) {
    double num = 0, den = 0;
    for (const auto& [pred, ref] : pred_ref) {
      const NgramCounts pc = ngrams(pred, n);
      const NgramCounts rc = ngrams(ref, n);
      for (const auto& [g, c] : pc) {
        auto it = rc.find(g);
        num += it == rc.end() ? 0 : std::min(c, it->second);
        den += c;
      }
    }
    terms[n - 1] = den > 0 ? num / den : 0;
  }
  for (const auto& [pred, ref] : pred_ref) {
    pred_len += pred.size();
    ref_len += ref.size();
  }
  if (pred_len == 0) return 0;
  const double bp =
      pred_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / pred_len);
  return bp * geomean4(terms);
}

double rouge_l(const std::vector<std::pair<Tokens, Tokens>>& pred_ref) {
  if (pred_ref.empty()) throw ValidationError("rouge_l: empty corpus");
  double sum = 0;
  for (const auto& [pred, ref] : pred_ref) sum += rouge_pair(pred, ref);
  return sum / pred_ref.size();
}

PRF parent(const std::vector<ParentInput>& corpus, double lambda) {
  if (corpus.empty()) throw ValidationError("parent: empty corpus");
  if (lambda < 0 || lambda > 1) throw ValidationError("parent: lambda must be in [0,1]");
  std::vector<PRF> scores;
  for (const auto& ex : corpus) scores.push_back(parent_example(ex, lambda).full);
  return mean_prf(scores);
}

PRF parent_t(const std::vector<ParentInput>& corpus) {
  if (corpus.empty()) throw ValidationError("parent_t: empty corpus");
  std::vector<PRF> scores;
  for (const auto& ex : corpus) scores.push_back(parent_example(ex, 0.5).tab);
  return mean_prf(scores);
}

EvalReport evaluate_file(const std::string& pred_path, const std::string& gold_path,
                         double lambda) {
  std::ifstream in(pred_path);
  if (!in) throw ValidationError("evaluate: cannot open " + pred_path);
  std::map<std::string, std::string> predictions;
  std::vector<std::string> pred_order;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const std::string id = j.at("id").get<std::string>();
      if (!predictions.emplace(id, j.at("prediction").get<std::string>()).second)
        throw ValidationError("evaluate: " + pred_path + " line " + std::to_string(line_no) +
                              ": duplicate id '" + id + "'");
      pred_order.push_back(id);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("evaluate: " + pred_path + " line " + std::to_string(line_no) +
                            ": " + e.what());
    }
  }

  std::vector<Example> gold = load_jsonl(gold_path);
  std::map<std::string, const Example*> gold_by_id;
  for (const auto& ex : gold) gold_by_id[ex.id] = &ex;

  std::vector<std::string> orphans;
  for (const auto& id : pred_order)
    if (!gold_by_id.count(id)) orphans.push_back("prediction '" + id + "'");
  for (const auto& ex : gold)
    if (!predictions.count(ex.id)) orphans.push_back("gold '" + ex.id + "'");
  if (!orphans.empty()) {
    std::string msg = "evaluate: unmatched ids:";
    for (const auto& o : orphans) msg += " " + o;
    throw ValidationError(msg);
  }

  std::vector<std::pair<Tokens, Tokens>> pairs;
  std::vector<ParentInput> inputs;
  std::vector<std::string> ids;
  for (const auto& ex : gold) {
    ParentInput pi;
    pi.pred = strip_boundaries(split_tokens(predictions.at(ex.id)));
    pi.ref = strip_boundaries(split_tokens(ex.reference));
    pi.table = ex.table;
    pairs.push_back({pi.pred, pi.ref});
    inputs.push_back(std::move(pi));
    ids.push_back(ex.id);
  }

  EvalReport report;
  report.bleu4 = bleu4(pairs);
  report.rouge_l = rouge_l(pairs);
  report.parent = parent(inputs, lambda);
  report.parent_t = parent_t(inputs);

  nlohmann::json j;
  j["bleu4"] = report.bleu4;
  j["rouge_l"] = report.rouge_l;
  j["parent"] = {{"p", report.parent.p}, {"r", report.parent.r}, {"f", report.parent.f}};
  j["parent_t"] = {
      {"p", report.parent_t.p}, {"r", report.parent_t.r}, {"f", report.parent_t.f}};
  j["examples"] = nlohmann::json::array();
  for (size_t i = 0; i < inputs.size(); ++i) {
    const ExampleParent ep = parent_example(inputs[i], lambda);
    nlohmann::json e;
    e["id"] = ids[i];
    e["rouge_l"] = rouge_pair(inputs[i].pred, inputs[i].ref);
    e["parent"] = {{"p", ep.full.p}, {"r", ep.full.r}, {"f", ep.full.f}};
    e["parent_t"] = {{"p", ep.tab.p}, {"r", ep.tab.r}, {"f", ep.tab.f}};
    j["examples"].push_back(e);
  }
  report.json = j.dump(2);
  return report;
}

}  // namespace amg
