#pragma once

#include "amg/table.hpp"

#include <string>
#include <vector>

namespace amg {

// Synthetic corpus generator. References are rendered as, per template slot,
// the attribute's words followed by the [E_CLS]-wrapped value, so every
// reference is faithful by construction (every content token comes from the
// table) and parses into exactly one close event per slot.
struct GeneratorSpec {
  std::uint64_t seed = 17;
  int n_tables = 50;
  std::vector<std::string> attributes;                 // attribute pool
  std::vector<std::vector<std::string>> value_pools;   // per attribute, aligned
  std::vector<std::vector<int>> templates;             // ordered attribute indices

  void validate() const;
};

// Fixed pools sized so a tiny model can memorize: 10 attributes, 4 two-token
// values each (token-disjoint across values), templates covering 1..max_slots
// slots in forward and reversed attribute order.
GeneratorSpec default_spec(int max_slots = 4);

// Deterministic under spec.seed.
std::vector<Example> make_corpus(const GeneratorSpec& spec);

// Writes {"id","table"} lines (unlabeled) and {"id","table","reference"}
// lines (labeled) for the same examples.
void make_corpus_files(const GeneratorSpec& spec, const std::string& unlabeled_path,
                       const std::string& labeled_path);

}  // namespace amg
