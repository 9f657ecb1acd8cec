#include "amg/table.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

using namespace amg;

namespace {

Table make_table(std::vector<std::pair<std::string, std::string>> slots) {
  Table t;
  t.id = "t";
  for (auto& [a, v] : slots) t.slots.push_back({normalize_attribute(a), split_tokens(v)});
  return t;
}

Vocabulary vocab_for(const Table& table, const std::vector<std::string>& extra = {}) {
  std::vector<std::vector<std::string>> corpus{linearize_tokens(table)};
  if (!extra.empty()) corpus.push_back(extra);
  return Vocabulary::build(corpus, 1);
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/amg_test_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("reserved ids occupy the lowest seven slots in fixed order") {
  Vocabulary v = Vocabulary::build({{"x"}}, 1);
  CHECK(v.id("[PAD]") == 0);
  CHECK(v.id("[UNK]") == 1);
  CHECK(v.id("[CLS]") == 2);
  CHECK(v.id("[SEP]") == 3);
  CHECK(v.id("[MASK]") == 4);
  CHECK(v.id("[E_CLS]") == 5);
  CHECK(v.id("[E_SEP]") == 6);
  CHECK(v.id("x") == 7);
}

TEST_CASE("linearization of the single-slot name table") {
  Table t = make_table({{"name", "robert kiprono cheruiyot"}});
  CHECK(linearize_tokens(t) ==
        std::vector<std::string>{"[CLS]", "name", "is", "[E_CLS]", "robert", "kiprono",
                                 "cheruiyot", "[E_SEP]", ";", "[SEP]"});
}

TEST_CASE("one-token slot span offsets") {
  Table t = make_table({{"a", "x"}});
  TableEncoding enc = encode_table(t, vocab_for(t));
  CHECK(enc.slot_spans == std::vector<std::pair<int, int>>{{4, 5}});
  CHECK(enc.token_ids.front() == kCls);
  CHECK(enc.token_ids.back() == kSep);
  CHECK(enc.slot_of[4] == 0);
  CHECK(enc.slot_of[0] == -1);
}

TEST_CASE("two-slot linearization, spans counted by hand") {
  Table t = make_table(
      {{"name", "robert kiprono cheruiyot"}, {"birth_date", "august 10 , 1998"}});
  // [CLS] name is [E_CLS] robert kiprono cheruiyot [E_SEP] ; birth_date is
  // [E_CLS] august 10 , 1998 [E_SEP] ; [SEP]
  std::vector<std::string> toks = linearize_tokens(t);
  CHECK(toks.size() == 19);
  CHECK(toks[9] == "birth_date");
  TableEncoding enc = encode_table(t, vocab_for(t));
  CHECK(enc.slot_spans == std::vector<std::pair<int, int>>{{4, 7}, {12, 16}});
  for (int p = 4; p < 7; ++p) CHECK(enc.slot_of[p] == 0);
  for (int p = 12; p < 16; ++p) CHECK(enc.slot_of[p] == 1);
  CHECK(enc.slot_of[7] == -1);  // [E_SEP]
}

TEST_CASE("boundary token counts equal the slot count") {
  Table t = make_table({{"a", "x y"}, {"b", "z"}, {"c", "w w w"}});
  auto toks = linearize_tokens(t);
  CHECK(std::count(toks.begin(), toks.end(), "[E_CLS]") == 3);
  CHECK(std::count(toks.begin(), toks.end(), "[E_SEP]") == 3);
}

TEST_CASE("linearize-detokenize round trip reproduces the encoding") {
  Table t = make_table({{"name", "ada lovelace"}, {"field", "mathematics"}});
  Vocabulary v = vocab_for(t);
  TableEncoding enc = encode_table(t, v);
  std::string text = detokenize(enc.token_ids, v);
  std::vector<int> re = tokenize(text, v);
  CHECK(re == enc.token_ids);
}

TEST_CASE("vocabulary frequency ordering and min_count") {
  Vocabulary v1 = Vocabulary::build({{"a", "a", "b"}}, 1);
  CHECK(v1.id("a") == 7);
  CHECK(v1.id("b") == 8);

  Vocabulary v2 = Vocabulary::build({{"b", "a"}, {"a"}}, 2);
  CHECK(v2.id("a") == 7);
  CHECK(v2.id("b") == kUnk);
  CHECK(v2.size() == 8);
}

TEST_CASE("vocabulary tie-break matches a brute-force sort oracle") {
  std::vector<std::vector<std::string>> corpus{
      {"pear", "apple", "apple"}, {"fig", "pear"}, {"date", "fig", "cherry"}};
  std::map<std::string, int> counts;
  for (const auto& doc : corpus)
    for (const auto& t : doc) ++counts[t];
  std::vector<std::pair<std::string, int>> sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary v = Vocabulary::build(corpus, 1);
  for (size_t i = 0; i < sorted.size(); ++i)
    CHECK(v.id(sorted[i].first) == static_cast<int>(kNumReserved + i));
}

TEST_CASE("tokenize lowercases, splits punctuation, maps OOV to [UNK]") {
  Vocabulary v = Vocabulary::build({{"robert", ","}}, 1);
  CHECK(tokenize("Robert ,", v) == std::vector<int>{v.id("robert"), v.id(",")});
  CHECK(tokenize("", v).empty());
  CHECK(tokenize("zzz-unknown", v) == std::vector<int>{kUnk, kUnk, kUnk});
  CHECK(split_tokens("zzz-unknown") == std::vector<std::string>{"zzz", "-", "unknown"});
}

TEST_CASE("bracketed reserved tokens stay atomic in the tokenizer") {
  CHECK(split_tokens("a [E_CLS] b [E_SEP]") ==
        std::vector<std::string>{"a", "[E_CLS]", "b", "[E_SEP]"});
}

TEST_CASE("parse_target matches spans to slots by token overlap") {
  Table t = make_table({{"name", "robert kiprono"}, {"birth_date", "1998"}});
  Vocabulary v = vocab_for(t, split_tokens("( born"));
  TableEncoding enc = encode_table(t, v);
  std::vector<int> ref = tokenize("[E_CLS] robert [E_SEP] ( born [E_CLS] 1998 [E_SEP]", v);
  TargetEncoding tgt = parse_target(ref, enc);
  REQUIRE(tgt.complete_slot_events.size() == 2);
  CHECK(tgt.complete_slot_events[0] == std::pair<int, int>{2, 0});
  CHECK(tgt.complete_slot_events[1] == std::pair<int, int>{7, 1});
  CHECK(tgt.slot_of[1] == 0);
  CHECK(tgt.slot_of[6] == 1);
  CHECK(tgt.slot_of[0] == -1);
  CHECK(tgt.slot_of[3] == -1);
}

TEST_CASE("parse_target without boundary tokens yields no events") {
  Table t = make_table({{"a", "x"}});
  Vocabulary v = vocab_for(t);
  TargetEncoding tgt = parse_target(tokenize("x x", v), encode_table(t, v));
  CHECK(tgt.complete_slot_events.empty());
  CHECK(tgt.slot_of == std::vector<int>{-1, -1});
}

TEST_CASE("parse_target reports unbalanced boundaries with position") {
  Table t = make_table({{"a", "x"}});
  Vocabulary v = vocab_for(t);
  TableEncoding enc = encode_table(t, v);
  CHECK_THROWS_WITH_AS(parse_target(tokenize("[E_SEP] x", v), enc),
                       doctest::Contains("position 0"), ValidationError);
  CHECK_THROWS_AS(parse_target(tokenize("[E_CLS] x", v), enc), ValidationError);
  CHECK_THROWS_AS(parse_target(tokenize("[E_CLS] [E_CLS] x [E_SEP]", v), enc),
                  ValidationError);
}

TEST_CASE("fully wrapped reference yields one event per slot in table order") {
  Table t = make_table({{"a", "ax ay"}, {"b", "bx"}, {"c", "cx cy cz"}});
  Vocabulary v = vocab_for(t);
  TableEncoding enc = encode_table(t, v);
  std::string ref_text = "a [E_CLS] ax ay [E_SEP] b [E_CLS] bx [E_SEP] c [E_CLS] cx cy cz [E_SEP]";
  TargetEncoding tgt = parse_target(tokenize(ref_text, v), enc);
  REQUIRE(tgt.complete_slot_events.size() == 3);
  for (int j = 0; j < 3; ++j) CHECK(tgt.complete_slot_events[j].second == j);
}

TEST_CASE("table validation rejects structural violations") {
  CHECK_THROWS_AS(validate_table(make_table({}), 4), ValidationError);
  CHECK_THROWS_AS(validate_table(make_table({{"a", "x"}, {"a", "y"}}), 4), ValidationError);
  CHECK_THROWS_AS(validate_table(make_table({{"a", "x"}, {"b", "y"}}), 1), ValidationError);
  CHECK_THROWS_AS(validate_table(make_table({{"", "x"}}), 4), ValidationError);
  Table bad = make_table({{"a", "x"}});
  bad.slots[0].value.clear();
  CHECK_THROWS_AS(validate_table(bad, 4), ValidationError);
  Table reserved = make_table({{"a", "x"}});
  reserved.slots[0].value = {"[MASK]"};
  CHECK_THROWS_AS(validate_table(reserved, 4), ValidationError);
  CHECK_NOTHROW(validate_table(make_table({{"a", "x"}}), 4));
}

TEST_CASE("encode_table names the slot that overflows max_src") {
  Table t = make_table({{"a", "x"}, {"b", "one two three four five six"}});
  CHECK_THROWS_WITH_AS(encode_table(t, vocab_for(t), 12), doctest::Contains("slot 1"),
                       ValidationError);
}

TEST_CASE("jsonl round trip and line-numbered parse errors") {
  TempFile tmp("dataset.jsonl");
  std::vector<Example> examples{
      {"e1", make_table({{"name", "ada"}}), "name [E_CLS] ada [E_SEP]"},
      {"e2", make_table({{"a", "x y"}, {"b", "z"}}), "a [E_CLS] x y [E_SEP]"},
  };
  save_jsonl(tmp.path, examples);
  auto loaded = load_jsonl(tmp.path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].id == "e1");
  CHECK(loaded[1].table.slots[1].value == std::vector<std::string>{"z"});
  CHECK(loaded[0].reference == examples[0].reference);

  std::ofstream(tmp.path) << "{\"id\":\"ok\",\"table\":[[\"a\",\"x\"]]}\nnot json\n";
  CHECK_THROWS_WITH_AS(load_jsonl(tmp.path), doctest::Contains("line 2"), ValidationError);
}

TEST_CASE("vocabulary persists one token per line") {
  TempFile tmp("vocab.txt");
  Vocabulary v = Vocabulary::build({{"beta", "alpha", "beta"}}, 1);
  v.save(tmp.path);
  Vocabulary loaded = Vocabulary::load(tmp.path);
  CHECK(loaded.size() == v.size());
  CHECK(loaded.id("beta") == v.id("beta"));
  CHECK(loaded.token(7) == v.token(7));
}
