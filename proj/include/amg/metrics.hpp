#pragma once

#include "amg/table.hpp"

#include <string>
#include <utility>
#include <vector>

namespace amg {

using Tokens = std::vector<std::string>;

struct PRF {
  double p = 0, r = 0, f = 0;
};

// Corpus-level BLEU-4: geometric mean of modified n-gram precisions (n=1..4)
// with brevity penalty; zero counts smoothed with eps=1e-9.
double bleu4(const std::vector<std::pair<Tokens, Tokens>>& pred_ref);

// Mean over pairs of per-pair LCS F1 (beta=1). Empty prediction scores 0.
double rouge_l(const std::vector<std::pair<Tokens, Tokens>>& pred_ref);

struct ParentInput {
  Tokens pred;
  Tokens ref;  // ignored by parent_t
  Table table;
};

// Word-overlap entailment PARENT. w(g) = fraction of g's tokens found among
// the table's attribute and value tokens. P = geomean_n of entailed precision,
// R = R_ref^lambda * R_tab^(1-lambda) where R_tab is the mean per-slot
// LCS(value, pred)/|value|. Corpus scores are means of per-example scores.
PRF parent(const std::vector<ParentInput>& corpus, double lambda = 0.5);

// Reference-free variant: precision is pure entailment, recall is R_tab.
PRF parent_t(const std::vector<ParentInput>& corpus);

struct EvalReport {
  double bleu4 = 0;
  double rouge_l = 0;
  PRF parent;
  PRF parent_t;
  std::string json;  // full report with per-example breakdown
};

// Joins predictions ({"id","prediction"} JSONL) with gold examples by id;
// unmatched ids on either side raise a ValidationError listing them.
// Boundary tokens [E_CLS]/[E_SEP] are stripped before scoring.
EvalReport evaluate_file(const std::string& pred_path, const std::string& gold_path,
                         double lambda = 0.5);

}  // namespace amg
