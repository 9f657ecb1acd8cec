#include "amg/training.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace amg;

namespace {

ModelConfig tiny_config(int vocab) {
  ModelConfig cfg;
  cfg.d_h = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.slot_layers = 1;
  cfg.slot_n = 3;
  cfg.vocab_size = vocab;
  cfg.max_src = 48;
  cfg.max_tgt = 24;
  cfg.dropout = 0;
  return cfg;
}

std::vector<Example> toy_examples() {
  auto make = [](std::string id, std::vector<std::pair<std::string, std::string>> slots,
                 std::string ref) {
    Example ex;
    ex.id = std::move(id);
    ex.table.id = ex.id;
    for (auto& [a, v] : slots) ex.table.slots.push_back({a, split_tokens(v)});
    ex.reference = std::move(ref);
    return ex;
  };
  return {
      make("a", {{"name", "ada"}, {"field", "math"}},
           "name [E_CLS] ada [E_SEP] field [E_CLS] math [E_SEP]"),
      make("b", {{"name", "alan"}}, "name [E_CLS] alan [E_SEP]"),
      make("c", {{"field", "code"}, {"name", "grace"}},
           "field [E_CLS] code [E_SEP] name [E_CLS] grace [E_SEP]"),
      make("d", {{"name", "ada"}, {"field", "code"}},
           "name [E_CLS] ada [E_SEP] field [E_CLS] code [E_SEP]"),
  };
}

Vocabulary toy_vocab() {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& ex : toy_examples()) {
    corpus.push_back(linearize_tokens(ex.table));
    corpus.push_back(split_tokens(ex.reference));
  }
  return Vocabulary::build(corpus, 1);
}

TrainConfig fast_train_config() {
  TrainConfig cfg;
  cfg.lr = real(1e-3);
  cfg.batch_size = 2;
  cfg.grad_accum = 1;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

TEST_CASE("table corruption masks only eligible tokens with the ceiling rule") {
  Table t;
  t.id = "t";
  t.slots.push_back({"name", {"robert", "kiprono", "cheruiyot"}});
  t.slots.push_back({"birth_date", {"10", "august", "1998"}});
  Vocabulary v = Vocabulary::build({linearize_tokens(t)}, 1);
  TableEncoding enc = encode_table(t, v);

  std::mt19937_64 rng(17);
  Corruption c = corrupt_table(enc.token_ids, 0.2, rng);
  // Eligible: 2 attribute words, 2 "is", 2 ";", 6 value tokens = 12.
  CHECK(c.label_positions.size() == 3);  // ceil(0.2 * 12)
  for (int pos : c.label_positions) {
    const int original = enc.token_ids[pos];
    CHECK(original != kCls);
    CHECK(original != kSep);
    CHECK(original != kECls);
    CHECK(original != kESep);
    CHECK(c.input_ids[pos] == kMask);
  }
  for (size_t i = 0; i < enc.token_ids.size(); ++i)
    if (c.input_ids[i] != kMask) CHECK(c.input_ids[i] == enc.token_ids[i]);

  std::mt19937_64 rng2(17);
  CHECK(corrupt_table(enc.token_ids, 0.2, rng2).label_positions == c.label_positions);
}

TEST_CASE("a single eligible token is always masked") {
  std::vector<int> ids{kCls, 9, kSep};
  std::mt19937_64 rng(1);
  Corruption c = corrupt_table(ids, 0.01, rng);
  CHECK(c.label_positions == std::vector<int>{1});
}

TEST_CASE("reference corruption counts boundary tokens as eligible") {
  // 10 eligible positions: 6 words + 4 boundary tokens.
  std::vector<int> ids{5, 10, 11, 6, 12, 13, 5, 14, 15, 6};
  std::mt19937_64 rng(17);
  Corruption c = corrupt_reference(ids, 0.7, rng);
  CHECK(c.label_positions.size() == 7);

  std::mt19937_64 rng2(17);
  Corruption all = corrupt_reference(ids, 0.999, rng2);
  CHECK(all.label_positions.size() == ids.size());
}

TEST_CASE("seed-17 reference corruption is frozen") {
  std::vector<int> ids{10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  std::mt19937_64 rng(17);
  Corruption c = corrupt_reference(ids, 0.5, rng);
  // Recorded once from the seeded stream; any change here is a determinism
  // regression.
  CHECK(c.label_positions == std::vector<int>{0, 1, 2, 6, 7});
}

TEST_CASE("corruption rejects degenerate rates") {
  std::vector<int> ids{10, 11};
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(corrupt_table(ids, 0.0, rng), ValidationError);
  CHECK_THROWS_AS(corrupt_table(ids, 1.0, rng), ValidationError);
}

TEST_CASE("adam identities and first-step magnitude") {
  Tensor w = Tensor::from_values({2}, {1.0f, -2.0f}, true);
  std::vector<ParamRef> refs{{"w", w, true}};
  OptimizerState state;

  SUBCASE("zero grads and zero decay leave parameters unchanged") {
    w.zero_grad();
    adam_step(refs, state, real(0.1), 0);
    CHECK(w.value() == std::vector<real>{1.0f, -2.0f});
  }

  SUBCASE("first step moves by about -lr for unit gradient") {
    w.node()->grad = {1.0f, 1.0f};
    adam_step(refs, state, real(0.1), 0);
    CHECK(w.at(0) == doctest::Approx(0.9).epsilon(1e-4));
    CHECK(w.at(1) == doctest::Approx(-2.1).epsilon(1e-4));
  }

  SUBCASE("five steps descend a quadratic bowl monotonically") {
    double prev = 1e300;
    for (int s = 0; s < 5; ++s) {
      w.zero_grad();
      Tensor loss = sum_all(mul(w, w));
      backward(loss);
      CHECK(loss.at(0) < prev);
      prev = loss.at(0);
      adam_step(refs, state, real(0.05), 0);
    }
  }

  SUBCASE("non-finite gradients name the parameter") {
    w.node()->grad = {std::numeric_limits<real>::quiet_NaN(), 0.0f};
    CHECK_THROWS_WITH_AS(adam_step(refs, state, real(0.1), 0), doctest::Contains("'w'"),
                         RuntimeError);
  }
}

TEST_CASE("mlm loss equals ln V under uniform logits") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  ModelParams p = ModelParams::init(cfg, 17);
  std::fill(p.tok_emb.value().begin(), p.tok_emb.value().end(), real(0));

  FrozenEncoder frozen(p);
  PreparedExample prep =
      prepare_example(toy_examples()[0], v, frozen, cfg, Stage::Finetune);
  std::mt19937_64 rng(3);
  SequenceItem item = make_training_item(p, prep, Stage::Finetune, 0.7, true, rng);
  Tensor loss = mlm_loss(p, {item});
  CHECK(loss.at(0) == doctest::Approx(std::log((double)v.size())).epsilon(1e-5));
}

TEST_CASE("batch loss equals the hand-weighted per-item cross entropy") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  ModelParams p = ModelParams::init(cfg, 5);
  FrozenEncoder frozen(p);
  auto examples = toy_examples();

  std::vector<SequenceItem> batch;
  for (int i = 0; i < 2; ++i) {
    PreparedExample prep = prepare_example(examples[i], v, frozen, cfg, Stage::Finetune);
    std::mt19937_64 rng(100 + i);
    batch.push_back(make_training_item(p, prep, Stage::Finetune, 0.7, true, rng));
  }
  Tensor loss = mlm_loss(p, batch);

  // Scalar recomputation oracle over the dumped logits.
  double total = 0;
  long count = 0;
  for (const auto& item : batch) {
    Tensor logits = model_forward(p, item.input);
    for (int pos = 0; pos < logits.rows(); ++pos) {
      if (!item.label_mask[pos]) continue;
      double mx = -1e300;
      for (int j = 0; j < logits.cols(); ++j) mx = std::max(mx, (double)logits.at(pos, j));
      double z = 0;
      for (int j = 0; j < logits.cols(); ++j) z += std::exp(logits.at(pos, j) - mx);
      total += -(logits.at(pos, item.labels[pos]) - mx - std::log(z));
      ++count;
    }
  }
  CHECK(loss.at(0) == doctest::Approx(total / count).epsilon(1e-5));
  CHECK(loss.at(0) >= 0);
}

TEST_CASE("mlm loss rejects empty batches") {
  ModelParams p = ModelParams::init(tiny_config(16), 1);
  CHECK_THROWS_AS(mlm_loss(p, {}), ValidationError);
}

TEST_CASE("teacher-forced histories equal per-prefix history extraction") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  ModelParams p = ModelParams::init(cfg, 11);
  FrozenEncoder frozen(p);
  Example ex = toy_examples()[0];
  PreparedExample prep = prepare_example(ex, v, frozen, cfg, Stage::Finetune);
  REQUIRE(prep.events.size() == 2);
  REQUIRE(prep.histories.size() == 2);

  std::vector<int> full = prep.table_enc.token_ids;
  std::vector<int> ref = tokenize(ex.reference, v);
  full.insert(full.end(), ref.begin(), ref.end());
  full.push_back(kSep);
  for (size_t e = 0; e < prep.events.size(); ++e) {
    // Causal masking means the one-pass teacher states match a pass truncated
    // right after the close event.
    std::vector<int> prefix(full.begin(), full.begin() + prep.events[e].first + 1);
    SlotHistory oracle = extract_history(prefix, prep.src_len, prep.event_spans[e].first,
                                         prep.event_spans[e].second, frozen);
    for (int c = 0; c < cfg.d_h; ++c)
      CHECK(prep.histories[e].his.at(c) == doctest::Approx(oracle.his.at(c)).epsilon(1e-6));
  }
}

TEST_CASE("pretrain items mask only the table, finetune items mask the reference") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  ModelParams p = ModelParams::init(cfg, 13);
  FrozenEncoder frozen(p);
  Example ex = toy_examples()[0];

  PreparedExample pre = prepare_example(ex, v, frozen, cfg, Stage::Phase2);
  std::mt19937_64 rng(4);
  SequenceItem pre_item = make_training_item(p, pre, Stage::Phase2, 0.2, true, rng);
  CHECK((int)pre_item.input.ids.size() == pre.src_len);
  CHECK(pre_item.masked_count > 0);
  CHECK(pre.events.size() == 2);  // one per table slot

  PreparedExample fin = prepare_example(ex, v, frozen, cfg, Stage::Finetune);
  std::mt19937_64 rng2(4);
  SequenceItem fin_item = make_training_item(p, fin, Stage::Finetune, 0.7, true, rng2);
  for (int pos = 0; pos < fin.src_len; ++pos) {
    CHECK(fin_item.input.ids[pos] == fin.table_enc.token_ids[pos]);
    CHECK(fin_item.label_mask[pos] == 0);
  }
  // The terminal [SEP] is always a prediction target.
  CHECK(fin_item.label_mask.back() == 1);
  CHECK(fin_item.labels.back() == kSep);
  // Memory schedule: one state per event plus the initial bank.
  CHECK(fin_item.input.mem_states.size() == fin.events.size() + 1);
}

TEST_CASE("zero-epoch training is the identity") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  ModelParams p = ModelParams::init(cfg, 17);
  auto before = p.to_tensors();
  TrainResult r =
      train_stage(std::move(p), Stage::Phase1, toy_examples(), {}, v, fast_train_config(), 0);
  auto after = r.params.to_tensors();
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i].data == after[i].data);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  ModelParams p = ModelParams::init(cfg, 17);
  auto before = p.to_tensors();
  TrainConfig tc = fast_train_config();
  tc.lr = 0;
  TrainResult r = train_stage(std::move(p), Stage::Finetune, toy_examples(), {}, v, tc, 2);
  auto after = r.params.to_tensors();
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i].data == after[i].data);
}

TEST_CASE("training is deterministic and resumable at epoch boundaries") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  TrainConfig tc = fast_train_config();
  ModelParams init = ModelParams::init(cfg, 17);
  auto clone = [&]() { return ModelParams::from_tensors(cfg, init.to_tensors()); };

  TrainResult full = train_stage(clone(), Stage::Phase2, toy_examples(), {}, v, tc, 4);
  TrainResult rerun = train_stage(clone(), Stage::Phase2, toy_examples(), {}, v, tc, 4);
  auto a = full.params.to_tensors(), b = rerun.params.to_tensors();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].data == b[i].data);

  TrainResult half = train_stage(clone(), Stage::Phase2, toy_examples(), {}, v, tc, 2);
  TrainResult resumed =
      train_stage(std::move(half.params), Stage::Phase2, toy_examples(), {}, v, tc, 4, 2,
                  std::move(half.opt), nullptr, &init);
  auto c = resumed.params.to_tensors();
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].data == c[i].data);
}

TEST_CASE("training loss decreases on the toy corpus") {
  Vocabulary v = toy_vocab();
  ModelConfig cfg = tiny_config(v.size());
  TrainConfig tc = fast_train_config();
  ModelParams p = ModelParams::init(cfg, 17);
  std::vector<double> losses;
  TrainResult r = train_stage(std::move(p), Stage::Finetune, toy_examples(), {}, v, tc, 10,
                              0, {}, [&](const TrainLogEntry& e) { losses.push_back(e.loss); });
  REQUIRE(losses.size() >= 4);
  CHECK(r.final_train_loss < losses.front());
  double acc = masked_reconstruction_accuracy(r.params, toy_examples(), v, Stage::Finetune,
                                              0.7, 17);
  CHECK(acc >= 0);
  CHECK(acc <= 1);
}

TEST_CASE("train config json round trips") {
  TrainConfig tc = fast_train_config();
  tc.grad_accum = 7;
  TrainConfig back = TrainConfig::from_json(tc.to_json());
  CHECK(back.grad_accum == 7);
  CHECK(back.lr == tc.lr);
  CHECK_THROWS_AS(TrainConfig::from_json("{"), ValidationError);
  TrainConfig bad = tc;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
