#include "amg/model.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

using namespace amg;

namespace {

ModelConfig tiny_config(int vocab = 20) {
  ModelConfig cfg;
  cfg.d_h = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.slot_layers = 1;
  cfg.slot_n = 3;
  cfg.vocab_size = vocab;
  cfg.max_src = 32;
  cfg.max_tgt = 16;
  cfg.dropout = 0;
  return cfg;
}

Table two_slot_table() {
  Table t;
  t.id = "t";
  t.slots.push_back({"name", {"ada", "lovelace"}});
  t.slots.push_back({"field", {"math"}});
  return t;
}

Vocabulary table_vocab(const Table& t) {
  return Vocabulary::build({linearize_tokens(t)}, 1);
}

// Loop-based multi-head attention oracle, mirroring the declared layout:
// full-width projections, heads = column blocks of size d_k.
std::vector<real> naive_attention(const ModelConfig& cfg, const Tensor& q_proj,
                                  const Tensor& k_proj, const Tensor& v_proj,
                                  const Tensor& mask, const Tensor& wo) {
  const int n = q_proj.rows(), d = cfg.d_h, dk = cfg.d_k();
  std::vector<real> concat(static_cast<size_t>(n) * d);
  for (int h = 0; h < cfg.n_heads; ++h) {
    for (int i = 0; i < n; ++i) {
      std::vector<double> scores(n);
      double mx = -1e300;
      for (int k = 0; k < n; ++k) {
        double s = 0;
        for (int c = 0; c < dk; ++c)
          s += static_cast<double>(q_proj.at(i, h * dk + c)) * k_proj.at(k, h * dk + c);
        scores[k] = s / std::sqrt(static_cast<double>(dk)) + mask.at(i, k);
        mx = std::max(mx, scores[k]);
      }
      double z = 0;
      for (int k = 0; k < n; ++k) z += std::exp(scores[k] - mx);
      for (int c = 0; c < dk; ++c) {
        double acc = 0;
        for (int k = 0; k < n; ++k)
          acc += std::exp(scores[k] - mx) / z * v_proj.at(k, h * dk + c);
        concat[static_cast<size_t>(i) * d + h * dk + c] = static_cast<real>(acc);
      }
    }
  }
  std::vector<real> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0;
      for (int c = 0; c < d; ++c)
        acc += static_cast<double>(concat[static_cast<size_t>(i) * d + c]) * wo.at(c, j);
      out[static_cast<size_t>(i) * d + j] = static_cast<real>(acc);
    }
  return out;
}

void check_close(const std::vector<real>& a, const std::vector<real>& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("token attention matches the loop oracle") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 1);
  std::mt19937_64 rng(2);
  const int n = 3;
  Tensor x = Tensor::randn({n, cfg.d_h}, 1.0f, rng);
  Tensor mask = build_seq2seq_mask(2, 1);
  Tensor out = token_attention(cfg, p.layers[0], x, mask);
  auto oracle = naive_attention(cfg, matmul(x, p.layers[0].Wq), matmul(x, p.layers[0].Wk),
                                matmul(x, p.layers[0].Wv), mask, p.layers[0].Wo);
  check_close(out.value(), oracle, 1e-5);
}

TEST_CASE("single-position attention reduces to the value projection") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 3);
  std::mt19937_64 rng(4);
  Tensor x = Tensor::randn({1, cfg.d_h}, 1.0f, rng);
  Tensor out = token_attention(cfg, p.layers[0], x, Tensor::zeros({1, 1}));
  Tensor expect = matmul(matmul(x, p.layers[0].Wv), p.layers[0].Wo);
  check_close(out.value(), expect.value(), 1e-5);
}

TEST_CASE("slot attention matches the loop oracle and zero memory yields zero") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 5);
  const auto& layer = p.layers.back();
  REQUIRE(layer.has_slot);
  std::mt19937_64 rng(6);
  const int n = 4;
  Tensor x = Tensor::randn({n, cfg.d_h}, 1.0f, rng);
  Tensor scattered = Tensor::randn({n, cfg.d_h}, 1.0f, rng);
  Tensor mask = build_slot_mask(build_seq2seq_mask(2, 2), 2, {-1, -1, 0, 0});
  Tensor out = slot_attention(cfg, layer, x, scattered, mask);
  auto oracle = naive_attention(cfg, matmul(x, layer.Wq_sa), matmul(scattered, layer.Wk_sa),
                                matmul(scattered, layer.Wv_sa), mask, layer.Wo);
  check_close(out.value(), oracle, 1e-5);

  Tensor zero_out = slot_attention(cfg, layer, x, Tensor::zeros({n, cfg.d_h}), mask);
  for (real v : zero_out.value()) CHECK(v == 0);
}

TEST_CASE("within-slot keys are fully blind in slot attention") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 7);
  const auto& layer = p.layers.back();
  std::mt19937_64 rng(8);
  const int src = 2, n = 5;
  std::vector<int> slot_of{-1, -1, 1, 1, 1};
  Tensor mask = build_slot_mask(build_seq2seq_mask(src, n - src), src, slot_of);
  Tensor x = Tensor::randn({n, cfg.d_h}, 1.0f, rng);
  Tensor scattered = Tensor::randn({n, cfg.d_h}, 1.0f, rng);
  Tensor base = slot_attention(cfg, layer, x, scattered, mask);

  // Perturb the memory row at an earlier same-slot key (position 2); rows for
  // later same-slot positions must not move at all.
  Tensor perturbed = Tensor::from_values(scattered.shape(), scattered.value());
  for (int c = 0; c < cfg.d_h; ++c)
    perturbed.value()[2 * cfg.d_h + c] += real(3.5);
  Tensor moved = slot_attention(cfg, layer, x, perturbed, mask);
  for (int i = 3; i < n; ++i)
    for (int c = 0; c < cfg.d_h; ++c)
      CHECK(moved.at(i, c) == base.at(i, c));
}

TEST_CASE("fusion is the arithmetic mean") {
  Tensor a = Tensor::from_values({1, 2}, {0.2f, 1.0f});
  Tensor b = Tensor::from_values({1, 2}, {0.4f, 1.0f});
  Tensor f = fuse(a, b);
  CHECK(f.at(0, 0) == doctest::Approx(0.3));
  CHECK(f.at(0, 1) == doctest::Approx(1.0));
  CHECK(fuse(a, a).value() == a.value());
  Tensor half = fuse(a, Tensor::zeros({1, 2}));
  CHECK(half.at(0, 0) == doctest::Approx(0.1));
}

TEST_CASE("init_memory rows are frozen-encoder span means") {
  ModelConfig cfg = tiny_config();
  Table t = two_slot_table();
  Vocabulary v = table_vocab(t);
  cfg.vocab_size = v.size();
  ModelParams p = ModelParams::init(cfg, 9);
  FrozenEncoder frozen(p);
  TableEncoding enc = encode_table(t, v, cfg.max_src);
  MemoryBank bank = init_memory(enc, frozen, cfg.slot_n);

  Tensor hidden =
      frozen.encode(enc.token_ids, build_seq2seq_mask((int)enc.token_ids.size(), 0));
  for (size_t j = 0; j < enc.slot_spans.size(); ++j) {
    const auto [begin, end] = enc.slot_spans[j];
    for (int c = 0; c < cfg.d_h; ++c) {
      double mean = 0;
      for (int r = begin; r < end; ++r) mean += hidden.at(r, c);
      mean /= (end - begin);
      CHECK(bank.M.at((int)j, c) == doctest::Approx(mean).epsilon(1e-6));
    }
    CHECK(bank.active[j] == 1);
  }
  // Padding rows zero and inactive.
  CHECK(bank.active[2] == 0);
  for (int c = 0; c < cfg.d_h; ++c) CHECK(bank.M.at(2, c) == 0);
}

TEST_CASE("extract_history averages the span and rejects empty spans") {
  ModelConfig cfg = tiny_config();
  Table t = two_slot_table();
  Vocabulary v = table_vocab(t);
  cfg.vocab_size = v.size();
  ModelParams p = ModelParams::init(cfg, 10);
  FrozenEncoder frozen(p);
  TableEncoding enc = encode_table(t, v, cfg.max_src);
  std::vector<int> ctx = enc.token_ids;
  const int src = (int)ctx.size();
  std::vector<int> tail = tokenize("[E_CLS] ada lovelace [E_SEP]", v);
  ctx.insert(ctx.end(), tail.begin(), tail.end());

  SlotHistory one = extract_history(ctx, src, src + 1, src + 2, frozen);
  Tensor hidden = frozen.encode(ctx, build_seq2seq_mask(src, 4));
  for (int c = 0; c < cfg.d_h; ++c)
    CHECK(one.his.at(c) == doctest::Approx(hidden.at(src + 1, c)).epsilon(1e-6));

  SlotHistory both = extract_history(ctx, src, src + 1, src + 3, frozen);
  for (int c = 0; c < cfg.d_h; ++c)
    CHECK(both.his.at(c) ==
          doctest::Approx((hidden.at(src + 1, c) + hidden.at(src + 2, c)) / 2).epsilon(1e-6));

  CHECK_THROWS_AS(extract_history(ctx, src, src + 2, src + 2, frozen), RuntimeError);
}

TEST_CASE("memory gate identities") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 11);
  std::mt19937_64 rng(12);
  MemoryBank bank;
  bank.M = Tensor::randn({cfg.slot_n, cfg.d_h}, 1.0f, rng);
  bank.active = {1, 1, 0};
  SlotHistory his{Tensor::randn({cfg.d_h}, 1.0f, rng), true};

  auto zero_fill = [](Tensor& t) { std::fill(t.value().begin(), t.value().end(), real(0)); };
  auto const_fill = [](Tensor& t, real v) {
    std::fill(t.value().begin(), t.value().end(), v);
  };

  SUBCASE("closed gate leaves memory bit-identical") {
    zero_fill(p.mem_Wc);
    zero_fill(p.mem_Wd);
    zero_fill(p.mem_bc);
    const_fill(p.mem_bd, real(-1e9));
    MemoryBank out = update_memory(p, bank, his);
    CHECK(out.M.value() == bank.M.value());
  }

  SUBCASE("open gate yields the tanh candidate exactly on active rows") {
    zero_fill(p.mem_Wc);
    zero_fill(p.mem_Wd);
    zero_fill(p.mem_bc);
    const_fill(p.mem_bd, real(1e9));
    MemoryBank out = update_memory(p, bank, his);
    for (int j = 0; j < cfg.slot_n; ++j)
      for (int c = 0; c < cfg.d_h; ++c) {
        double pre = 0;
        for (int k = 0; k < cfg.d_h; ++k)
          pre += static_cast<double>(p.mem_Wa.at(c, k)) * bank.M.at(j, k) +
                 static_cast<double>(p.mem_Wb.at(c, k)) * his.his.at(k);
        pre += p.mem_ba.at(c) + p.mem_bb.at(c);
        if (bank.active[j])
          CHECK(out.M.at(j, c) == doctest::Approx(std::tanh(pre)).epsilon(1e-5));
        else
          CHECK(out.M.at(j, c) == bank.M.at(j, c));
      }
  }

  SUBCASE("random instance matches the per-column scalar oracle") {
    MemoryBank out = update_memory(p, bank, his);
    for (int j = 0; j < cfg.slot_n; ++j)
      for (int c = 0; c < cfg.d_h; ++c) {
        double pre_c = 0, pre_z = 0;
        for (int k = 0; k < cfg.d_h; ++k) {
          pre_c += static_cast<double>(p.mem_Wa.at(c, k)) * bank.M.at(j, k) +
                   static_cast<double>(p.mem_Wb.at(c, k)) * his.his.at(k);
          pre_z += static_cast<double>(p.mem_Wc.at(c, k)) * bank.M.at(j, k) +
                   static_cast<double>(p.mem_Wd.at(c, k)) * his.his.at(k);
        }
        pre_c += p.mem_ba.at(c) + p.mem_bb.at(c);
        pre_z += p.mem_bc.at(c) + p.mem_bd.at(c);
        const double cand = std::tanh(pre_c);
        const double z = 1.0 / (1.0 + std::exp(-pre_z));
        const double expect =
            bank.active[j] ? (1 - z) * bank.M.at(j, c) + z * cand : bank.M.at(j, c);
        CHECK(out.M.at(j, c) == doctest::Approx(expect).epsilon(1e-6));
      }
  }

  SUBCASE("invalid history is rejected") {
    SlotHistory invalid;
    CHECK_THROWS_AS(update_memory(p, bank, invalid), RuntimeError);
  }
}

TEST_CASE("forward produces finite vocab-wide logits deterministically") {
  ModelConfig cfg = tiny_config();
  Table t = two_slot_table();
  Vocabulary v = table_vocab(t);
  cfg.vocab_size = v.size();
  ModelParams p = ModelParams::init(cfg, 13);
  TableEncoding enc = encode_table(t, v, cfg.max_src);

  ForwardInput input;
  input.ids = enc.token_ids;
  input.ids[4] = kMask;
  input.mask_ta = build_seq2seq_mask((int)input.ids.size(), 0);
  input.mask_slot = build_slot_mask(input.mask_ta, (int)input.ids.size(), enc.slot_of);
  Tensor logits = model_forward(p, input);
  CHECK(logits.rows() == (int)input.ids.size());
  CHECK(logits.cols() == cfg.vocab_size);
  for (real x : logits.value()) CHECK(std::isfinite(x));
  CHECK(model_forward(p, input).value() == logits.value());
}

TEST_CASE("without slot layers the logits ignore memory entirely") {
  ModelConfig cfg = tiny_config();
  cfg.slot_layers = 0;
  Table t = two_slot_table();
  Vocabulary v = table_vocab(t);
  cfg.vocab_size = v.size();
  ModelParams p = ModelParams::init(cfg, 14);
  TableEncoding enc = encode_table(t, v, cfg.max_src);

  ForwardInput input;
  input.ids = enc.token_ids;
  input.ids[4] = kMask;
  input.mask_ta = build_seq2seq_mask((int)input.ids.size(), 0);
  input.mask_slot = build_slot_mask(input.mask_ta, (int)input.ids.size(), enc.slot_of);
  input.mem_refs.assign(input.ids.size(), SlotRef{0, 0});
  input.mem_states = {Tensor::zeros({cfg.slot_n, cfg.d_h})};
  Tensor zeroed = model_forward(p, input);
  std::mt19937_64 rng(15);
  input.mem_states = {Tensor::randn({cfg.slot_n, cfg.d_h}, 1.0f, rng)};
  Tensor randomized = model_forward(p, input);
  CHECK(zeroed.value() == randomized.value());
}

TEST_CASE("causality: later target tokens never change earlier logits") {
  ModelConfig cfg = tiny_config();
  Table t = two_slot_table();
  Vocabulary v = table_vocab(t);
  cfg.vocab_size = v.size();
  ModelParams p = ModelParams::init(cfg, 16);
  TableEncoding enc = encode_table(t, v, cfg.max_src);

  std::vector<int> tail = tokenize("[E_CLS] ada [E_SEP] math", v);
  ForwardInput input;
  input.ids = enc.token_ids;
  input.ids.insert(input.ids.end(), tail.begin(), tail.end());
  const int src = (int)enc.token_ids.size(), n = (int)input.ids.size();
  std::vector<int> slot_of = enc.slot_of;
  slot_of.insert(slot_of.end(), {-1, 0, -1, 1});
  input.mask_ta = build_seq2seq_mask(src, n - src);
  input.mask_slot = build_slot_mask(input.mask_ta, src, slot_of);
  input.ids[src + 1] = kMask;

  Tensor base = model_forward(p, input);
  input.ids[n - 1] = kMask;  // perturb the last target token
  Tensor perturbed = model_forward(p, input);
  for (int i = 0; i < n - 1; ++i)
    for (int c = 0; c < cfg.vocab_size; ++c)
      CHECK(base.at(i, c) == perturbed.at(i, c));
}

TEST_CASE("parameter containers round trip and validate") {
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 17);
  auto tensors = p.to_tensors();
  ModelParams q = ModelParams::from_tensors(cfg, tensors);
  CHECK(q.tok_emb.value() == p.tok_emb.value());
  CHECK(q.layers[1].Wq_sa.value() == p.layers[1].Wq_sa.value());
  tensors.pop_back();
  CHECK_THROWS_AS(ModelParams::from_tensors(cfg, tensors), ValidationError);
}

TEST_CASE("checkpoints carry config and stage") {
  const std::string path = "/tmp/amg_test_model.ckpt";
  ModelConfig cfg = tiny_config();
  ModelParams p = ModelParams::init(cfg, 18);
  save_checkpoint(path, p, "phase1");
  Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.stage == "phase1");
  CHECK(loaded.params.config.d_h == cfg.d_h);
  CHECK(loaded.params.tok_emb.value() == p.tok_emb.value());
  std::remove(path.c_str());
  std::remove((path + ".meta.json").c_str());
}

TEST_CASE("fully ablated checkpoints contain no slot or memory tensors") {
  ModelConfig cfg = tiny_config();
  cfg.use_slot_attention = false;
  cfg.use_memory = false;
  ModelParams p = ModelParams::init(cfg, 19);
  for (const auto& ref : p.named_params()) {
    CHECK(ref.name.find("slot") == std::string::npos);
    CHECK(ref.name.find("mem.") == std::string::npos);
  }
}
