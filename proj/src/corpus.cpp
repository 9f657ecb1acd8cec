#include "amg/corpus.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <random>

namespace amg {

void GeneratorSpec::validate() const {
  if (n_tables < 1) throw ValidationError("corpus spec: n_tables must be >= 1");
  if (attributes.empty()) throw ValidationError("corpus spec: empty attribute pool");
  if (value_pools.size() != attributes.size())
    throw ValidationError("corpus spec: value_pools must align with attributes");
  for (size_t i = 0; i < value_pools.size(); ++i)
    if (value_pools[i].empty())
      throw ValidationError("corpus spec: empty value pool for attribute '" + attributes[i] +
                            "'");
  if (templates.empty()) throw ValidationError("corpus spec: empty template pool");
  for (const auto& tpl : templates) {
    if (tpl.empty()) throw ValidationError("corpus spec: empty template");
    std::vector<char> seen(attributes.size(), 0);
    for (int a : tpl) {
      if (a < 0 || a >= static_cast<int>(attributes.size()))
        throw ValidationError("corpus spec: template references unknown attribute index " +
                              std::to_string(a));
      if (seen[a]) throw ValidationError("corpus spec: template repeats an attribute");
      seen[a] = 1;
    }
  }
}

GeneratorSpec default_spec(int max_slots) {
  static const char* kAttrs[] = {"name", "team",   "city", "color",   "rank",
                                 "year", "season", "coach", "stadium", "league"};
  GeneratorSpec spec;
  for (const char* a : kAttrs) spec.attributes.push_back(a);
  if (max_slots < 1 || max_slots > static_cast<int>(spec.attributes.size()))
    throw ValidationError("corpus spec: max_slots out of range");
  static const char* kSuffix[] = {"on", "ar", "el", "us", "im", "ox", "ua", "ek"};
  for (const auto& attr : spec.attributes) {
    std::vector<std::string> pool;
    for (int v = 0; v < 4; ++v)
      pool.push_back(attr + kSuffix[2 * v] + " " + attr + kSuffix[2 * v + 1]);
    spec.value_pools.push_back(std::move(pool));
  }
  for (int k = 1; k <= max_slots; ++k) {
    std::vector<int> fwd, rev;
    for (int i = 0; i < k; ++i) fwd.push_back(i);
    for (int i = k - 1; i >= 0; --i) rev.push_back(i);
    spec.templates.push_back(fwd);
    if (k > 1) spec.templates.push_back(rev);
  }
  return spec;
}

std::vector<Example> make_corpus(const GeneratorSpec& spec) {
  spec.validate();
  std::vector<Example> examples;
  for (int i = 0; i < spec.n_tables; ++i) {
    std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<size_t> pick_tpl(0, spec.templates.size() - 1);
    const auto& tpl = spec.templates[pick_tpl(rng)];

    Example ex;
    char id[16];
    std::snprintf(id, sizeof id, "ex-%06d", i);
    ex.id = id;
    ex.table.id = ex.id;

    std::string ref;
    for (int a : tpl) {
      std::uniform_int_distribution<size_t> pick_val(0, spec.value_pools[a].size() - 1);
      const std::string& value = spec.value_pools[a][pick_val(rng)];
      Slot slot;
      slot.attribute = normalize_attribute(spec.attributes[a]);
      slot.value = split_tokens(value);
      ex.table.slots.push_back(std::move(slot));
      if (!ref.empty()) ref += " ";
      ref += spec.attributes[a] + " [E_CLS] " + value + " [E_SEP]";
    }
    ex.reference = ref;
    examples.push_back(std::move(ex));
  }
  return examples;
}

void make_corpus_files(const GeneratorSpec& spec, const std::string& unlabeled_path,
                       const std::string& labeled_path) {
  const std::vector<Example> examples = make_corpus(spec);
  std::ofstream unlabeled(unlabeled_path, std::ios::trunc);
  if (!unlabeled)
    throw RuntimeError("corpus: cannot open " + unlabeled_path + " for writing");
  std::ofstream labeled(labeled_path, std::ios::trunc);
  if (!labeled) throw RuntimeError("corpus: cannot open " + labeled_path + " for writing");
  for (const auto& ex : examples) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& slot : ex.table.slots) {
      std::string value;
      for (const auto& t : slot.value) {
        if (!value.empty()) value += " ";
        value += t;
      }
      table.push_back({slot.attribute, value});
    }
    nlohmann::json u{{"id", ex.id}, {"table", table}};
    unlabeled << u.dump() << "\n";
    nlohmann::json l{{"id", ex.id}, {"table", table}, {"reference", ex.reference}};
    labeled << l.dump() << "\n";
  }
}

}  // namespace amg
