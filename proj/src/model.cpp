#include "amg/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>

namespace amg {

namespace {
constexpr real kLnEps = real(1e-5);
constexpr real kInitStd = real(0.02);
}  // namespace

void ModelConfig::validate() const {
  if (d_h <= 0 || n_layers <= 0 || n_heads <= 0 || slot_n <= 0 || vocab_size <= 0)
    throw ValidationError("model config: dimensions must be positive");
  if (d_h % n_heads != 0)
    throw ValidationError("model config: d_h " + std::to_string(d_h) +
                          " not divisible by n_heads " + std::to_string(n_heads));
  if (slot_layers < 0 || slot_layers > n_layers)
    throw ValidationError("model config: slot_layers " + std::to_string(slot_layers) +
                          " must be in [0, n_layers]");
  if (max_src < 1 || max_tgt < 0) throw ValidationError("model config: bad max lengths");
  if (dropout < 0 || dropout >= 1) throw ValidationError("model config: dropout out of range");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["d_h"] = d_h;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["slot_layers"] = slot_layers;
  j["slot_n"] = slot_n;
  j["vocab_size"] = vocab_size;
  j["max_src"] = max_src;
  j["max_tgt"] = max_tgt;
  j["dropout"] = dropout;
  j["use_slot_attention"] = use_slot_attention;
  j["use_memory"] = use_memory;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  ModelConfig cfg;
  cfg.d_h = j.value("d_h", cfg.d_h);
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.n_heads = j.value("n_heads", cfg.n_heads);
  cfg.slot_layers = j.value("slot_layers", cfg.slot_layers);
  cfg.slot_n = j.value("slot_n", cfg.slot_n);
  cfg.vocab_size = j.value("vocab_size", cfg.vocab_size);
  cfg.max_src = j.value("max_src", cfg.max_src);
  cfg.max_tgt = j.value("max_tgt", cfg.max_tgt);
  cfg.dropout = j.value("dropout", cfg.dropout);
  cfg.use_slot_attention = j.value("use_slot_attention", cfg.use_slot_attention);
  cfg.use_memory = j.value("use_memory", cfg.use_memory);
  return cfg;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg.d_h;
  ModelParams p;
  p.config = cfg;
  p.tok_emb = Tensor::randn({cfg.vocab_size, d}, kInitStd, rng, true);
  p.pos_emb = Tensor::randn({cfg.max_src + cfg.max_tgt, d}, kInitStd, rng, true);
  p.final_ln_g = Tensor::full({d}, real(1), true);
  p.final_ln_b = Tensor::zeros({d}, true);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams layer;
    layer.ln1_g = Tensor::full({d}, real(1), true);
    layer.ln1_b = Tensor::zeros({d}, true);
    layer.ln2_g = Tensor::full({d}, real(1), true);
    layer.ln2_b = Tensor::zeros({d}, true);
    layer.Wq = Tensor::randn({d, d}, kInitStd, rng, true);
    layer.Wk = Tensor::randn({d, d}, kInitStd, rng, true);
    layer.Wv = Tensor::randn({d, d}, kInitStd, rng, true);
    layer.Wo = Tensor::randn({d, d}, kInitStd, rng, true);
    layer.ff_w1 = Tensor::randn({d, 4 * d}, kInitStd, rng, true);
    layer.ff_b1 = Tensor::zeros({4 * d}, true);
    layer.ff_w2 = Tensor::randn({4 * d, d}, kInitStd, rng, true);
    layer.ff_b2 = Tensor::zeros({d}, true);
    layer.has_slot = cfg.use_slot_attention && l >= cfg.n_layers - cfg.slot_layers;
    if (layer.has_slot) {
      layer.Wq_sa = Tensor::randn({d, d}, kInitStd, rng, true);
      layer.Wk_sa = Tensor::randn({d, d}, kInitStd, rng, true);
      layer.Wv_sa = Tensor::randn({d, d}, kInitStd, rng, true);
    }
    p.layers.push_back(std::move(layer));
  }
  if (cfg.use_slot_attention) p.mem_null = Tensor::randn({d}, kInitStd, rng, true);
  if (cfg.use_memory) {
    p.mem_Wa = Tensor::randn({d, d}, kInitStd, rng, true);
    p.mem_Wb = Tensor::randn({d, d}, kInitStd, rng, true);
    p.mem_Wc = Tensor::randn({d, d}, kInitStd, rng, true);
    p.mem_Wd = Tensor::randn({d, d}, kInitStd, rng, true);
    p.mem_ba = Tensor::zeros({d}, true);
    p.mem_bb = Tensor::zeros({d}, true);
    p.mem_bc = Tensor::zeros({d}, true);
    p.mem_bd = Tensor::zeros({d}, true);
  }
  return p;
}

std::vector<ParamRef> ModelParams::named_params() const {
  std::vector<ParamRef> out;
  out.push_back({"tok_emb", tok_emb, false});
  out.push_back({"pos_emb", pos_emb, false});
  out.push_back({"final_ln.g", final_ln_g, false});
  out.push_back({"final_ln.b", final_ln_b, false});
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.push_back({pre + "ln1.g", layer.ln1_g, false});
    out.push_back({pre + "ln1.b", layer.ln1_b, false});
    out.push_back({pre + "ln2.g", layer.ln2_g, false});
    out.push_back({pre + "ln2.b", layer.ln2_b, false});
    out.push_back({pre + "attn.Wq", layer.Wq, true});
    out.push_back({pre + "attn.Wk", layer.Wk, true});
    out.push_back({pre + "attn.Wv", layer.Wv, true});
    out.push_back({pre + "attn.Wo", layer.Wo, true});
    out.push_back({pre + "ff.w1", layer.ff_w1, true});
    out.push_back({pre + "ff.b1", layer.ff_b1, false});
    out.push_back({pre + "ff.w2", layer.ff_w2, true});
    out.push_back({pre + "ff.b2", layer.ff_b2, false});
    if (layer.has_slot) {
      out.push_back({pre + "slot.Wq", layer.Wq_sa, true});
      out.push_back({pre + "slot.Wk", layer.Wk_sa, true});
      out.push_back({pre + "slot.Wv", layer.Wv_sa, true});
    }
  }
  if (config.use_slot_attention) out.push_back({"mem.null", mem_null, false});
  if (config.use_memory) {
    out.push_back({"mem.Wa", mem_Wa, true});
    out.push_back({"mem.Wb", mem_Wb, true});
    out.push_back({"mem.Wc", mem_Wc, true});
    out.push_back({"mem.Wd", mem_Wd, true});
    out.push_back({"mem.ba", mem_ba, false});
    out.push_back({"mem.bb", mem_bb, false});
    out.push_back({"mem.bc", mem_bc, false});
    out.push_back({"mem.bd", mem_bd, false});
  }
  return out;
}

std::vector<NamedTensor> ModelParams::to_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& p : named_params())
    out.push_back({p.name, p.tensor.shape(), p.tensor.value()});
  return out;
}

ModelParams ModelParams::from_tensors(const ModelConfig& cfg,
                                      const std::vector<NamedTensor>& tensors) {
  ModelParams p = ModelParams::init(cfg, 0);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  size_t used = 0;
  for (auto& ref : p.named_params()) {
    auto it = by_name.find(ref.name);
    if (it == by_name.end())
      throw ValidationError("checkpoint: missing tensor '" + ref.name + "'");
    if (it->second->shape != ref.tensor.shape())
      throw ValidationError("checkpoint: tensor '" + ref.name + "' has wrong shape");
    ref.tensor.value() = it->second->data;
    ++used;
  }
  if (used != tensors.size())
    throw ValidationError("checkpoint: container holds " + std::to_string(tensors.size()) +
                          " tensors, model expects " + std::to_string(used));
  return p;
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const std::string& stage, const ModelParams* frozen_source) {
  std::vector<NamedTensor> tensors = params.to_tensors();
  if (frozen_source) {
    for (NamedTensor t : frozen_source->to_tensors()) {
      t.name = "frozen/" + t.name;
      tensors.push_back(std::move(t));
    }
  }
  save_container(path, tensors);
  nlohmann::json meta;
  meta["config"] = nlohmann::json::parse(params.config.to_json());
  meta["stage"] = stage;
  std::ofstream out(path + ".meta.json", std::ios::trunc);
  if (!out) throw RuntimeError("checkpoint: cannot write " + path + ".meta.json");
  out << meta.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path + ".meta.json");
  if (!in) throw ValidationError("checkpoint: missing metadata " + path + ".meta.json");
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint: bad metadata in " + path + ".meta.json: " + e.what());
  }
  ModelConfig cfg = ModelConfig::from_json(meta.at("config").dump());
  std::vector<NamedTensor> model_tensors, frozen_tensors;
  for (NamedTensor& t : load_container(path)) {
    if (t.name.rfind("frozen/", 0) == 0) {
      t.name = t.name.substr(7);
      frozen_tensors.push_back(std::move(t));
    } else {
      model_tensors.push_back(std::move(t));
    }
  }
  Checkpoint ckpt{ModelParams::from_tensors(cfg, model_tensors),
                  meta.at("stage").get<std::string>(), std::nullopt};
  if (!frozen_tensors.empty())
    ckpt.frozen_source = ModelParams::from_tensors(cfg, frozen_tensors);
  return ckpt;
}

namespace {

ModelParams clone_without_grad(const ModelParams& src) {
  ModelParams copy = src;  // copies Tensor handles; now replace with detached leaves
  auto detach = [](Tensor& t) {
    if (t.defined()) t = Tensor::from_values(t.shape(), t.value(), false);
  };
  detach(copy.tok_emb);
  detach(copy.pos_emb);
  detach(copy.final_ln_g);
  detach(copy.final_ln_b);
  for (auto& layer : copy.layers) {
    detach(layer.ln1_g);
    detach(layer.ln1_b);
    detach(layer.ln2_g);
    detach(layer.ln2_b);
    detach(layer.Wq);
    detach(layer.Wk);
    detach(layer.Wv);
    detach(layer.Wo);
    detach(layer.ff_w1);
    detach(layer.ff_b1);
    detach(layer.ff_w2);
    detach(layer.ff_b2);
    detach(layer.Wq_sa);
    detach(layer.Wk_sa);
    detach(layer.Wv_sa);
  }
  detach(copy.mem_null);
  detach(copy.mem_Wa);
  detach(copy.mem_Wb);
  detach(copy.mem_Wc);
  detach(copy.mem_Wd);
  detach(copy.mem_ba);
  detach(copy.mem_bb);
  detach(copy.mem_bc);
  detach(copy.mem_bd);
  return copy;
}

Tensor attention_core(const ModelConfig& cfg, const Tensor& q, const Tensor& k,
                      const Tensor& v, const Tensor& mask, const Tensor& out_proj,
                      real dropout_rate, std::mt19937_64* rng) {
  const real inv_sqrt_dk = real(1) / std::sqrt(static_cast<real>(cfg.d_k()));
  std::vector<Tensor> heads;
  for (int h = 0; h < cfg.n_heads; ++h) {
    const int c0 = h * cfg.d_k(), c1 = (h + 1) * cfg.d_k();
    Tensor qh = slice_cols(q, c0, c1);
    Tensor kh = slice_cols(k, c0, c1);
    Tensor vh = slice_cols(v, c0, c1);
    Tensor scores = scale(matmul_bt(qh, kh), inv_sqrt_dk);
    Tensor weights = softmax_masked(scores, mask);
    if (dropout_rate > 0 && rng) weights = dropout(weights, dropout_rate, *rng);
    heads.push_back(matmul(weights, vh));
  }
  return matmul(concat_cols(heads), out_proj);
}

}  // namespace

Tensor token_attention(const ModelConfig& cfg, const LayerParams& layer, const Tensor& x,
                       const Tensor& mask_ta, real dropout_rate, std::mt19937_64* rng) {
  Tensor q = matmul(x, layer.Wq);
  Tensor k = matmul(x, layer.Wk);
  Tensor v = matmul(x, layer.Wv);
  return attention_core(cfg, q, k, v, mask_ta, layer.Wo, dropout_rate, rng);
}

Tensor slot_attention(const ModelConfig& cfg, const LayerParams& layer, const Tensor& x,
                      const Tensor& scattered_memory, const Tensor& mask_slot,
                      real dropout_rate, std::mt19937_64* rng) {
  Tensor q = matmul(x, layer.Wq_sa);
  Tensor k = matmul(scattered_memory, layer.Wk_sa);
  Tensor v = matmul(scattered_memory, layer.Wv_sa);
  return attention_core(cfg, q, k, v, mask_slot, layer.Wo, dropout_rate, rng);
}

Tensor fuse(const Tensor& token_out, const Tensor& slot_out) {
  return scale(add(token_out, slot_out), real(0.5));
}

namespace {

// Shared transformer stack. `scattered` is undefined when slot attention is
// disabled for this pass.
Tensor run_stack(const ModelParams& p, const std::vector<int>& ids, const Tensor& mask_ta,
                 const Tensor& mask_slot, const Tensor& scattered, bool slot_enabled,
                 real dropout_rate, std::mt19937_64* rng) {
  const ModelConfig& cfg = p.config;
  const int n = static_cast<int>(ids.size());
  if (n > cfg.max_src + cfg.max_tgt)
    throw RuntimeError("forward: sequence length " + std::to_string(n) + " exceeds " +
                       std::to_string(cfg.max_src + cfg.max_tgt));
  Tensor x = add(embedding_lookup(p.tok_emb, ids), slice_rows(p.pos_emb, 0, n));
  for (const auto& layer : p.layers) {
    Tensor h = layer_norm(x, layer.ln1_g, layer.ln1_b, kLnEps);
    Tensor att = token_attention(cfg, layer, h, mask_ta, dropout_rate, rng);
    if (slot_enabled && layer.has_slot) {
      Tensor sa = slot_attention(cfg, layer, h, scattered, mask_slot, dropout_rate, rng);
      att = fuse(att, sa);
    }
    x = add(x, att);
    Tensor h2 = layer_norm(x, layer.ln2_g, layer.ln2_b, kLnEps);
    Tensor a = gelu(add_rowvec(matmul(h2, layer.ff_w1), layer.ff_b1));
    if (dropout_rate > 0 && rng) a = dropout(a, dropout_rate, *rng);
    x = add(x, add_rowvec(matmul(a, layer.ff_w2), layer.ff_b2));
  }
  return layer_norm(x, p.final_ln_g, p.final_ln_b, kLnEps);
}

}  // namespace

FrozenEncoder::FrozenEncoder(const ModelParams& source)
    : params_(clone_without_grad(source)) {}

Tensor FrozenEncoder::encode(const std::vector<int>& ids, const Tensor& mask_ta) const {
  return run_stack(params_, ids, mask_ta, Tensor(), Tensor(), false, 0, nullptr);
}

MemoryBank init_memory(const TableEncoding& table, const FrozenEncoder& frozen, int slot_n) {
  const int m = static_cast<int>(table.slot_spans.size());
  if (m > slot_n)
    throw ValidationError("init_memory: " + std::to_string(m) + " slots exceed slot_n " +
                          std::to_string(slot_n));
  const int d = frozen.config().d_h;
  Tensor hidden = frozen.encode(table.token_ids,
                                build_seq2seq_mask(static_cast<int>(table.token_ids.size()), 0));
  MemoryBank bank;
  bank.M = Tensor::zeros({slot_n, d});
  bank.active.assign(slot_n, 0);
  for (int j = 0; j < m; ++j) {
    const auto [begin, end] = table.slot_spans[j];
    Tensor mean = mean_rows(hidden, begin, end);
    std::copy_n(mean.value().begin(), d, bank.M.value().begin() + static_cast<size_t>(j) * d);
    bank.active[j] = 1;
  }
  return bank;
}

SlotHistory extract_history(const std::vector<int>& context_ids, int src_len, int span_begin,
                            int span_end, const FrozenEncoder& frozen) {
  if (span_begin >= span_end)
    throw RuntimeError("extract_history: empty span [" + std::to_string(span_begin) + "," +
                       std::to_string(span_end) + ")");
  const int n = static_cast<int>(context_ids.size());
  Tensor hidden = frozen.encode(context_ids, build_seq2seq_mask(src_len, n - src_len));
  SlotHistory h;
  h.his = mean_rows(hidden, span_begin, span_end);
  h.valid = true;
  return h;
}

MemoryBank update_memory(const ModelParams& params, const MemoryBank& memory,
                         const SlotHistory& his) {
  if (!his.valid) throw RuntimeError("update_memory: history is not valid");
  if (!params.config.use_memory)
    throw RuntimeError("update_memory: memory updates disabled in this configuration");
  const int slot_n = memory.M.rows(), d = memory.M.cols();
  Tensor his_row = reshape(his.his, {1, d});
  auto gate_input = [&](const Tensor& Wm, const Tensor& bm, const Tensor& Wh,
                        const Tensor& bh) {
    Tensor t = add_rowvec(matmul_bt(memory.M, Wm), bm);
    Tensor hpart = reshape(matmul_bt(his_row, Wh), {d});
    return add_rowvec(add_rowvec(t, hpart), bh);
  };
  Tensor cand = tanh_t(gate_input(params.mem_Wa, params.mem_ba, params.mem_Wb, params.mem_bb));
  Tensor z = sigmoid_t(gate_input(params.mem_Wc, params.mem_bc, params.mem_Wd, params.mem_bd));
  // (1-z)*M + z*cand on active rows; padding rows pass through untouched.
  std::vector<real> act(static_cast<size_t>(slot_n) * d, real(0));
  for (int j = 0; j < slot_n; ++j)
    if (memory.active[j])
      std::fill_n(act.begin() + static_cast<size_t>(j) * d, d, real(1));
  Tensor active_mask = Tensor::from_values({slot_n, d}, act);
  Tensor ones = Tensor::full({slot_n, d}, real(1));
  Tensor updated = add(mul(sub(ones, z), memory.M), mul(z, cand));
  Tensor inactive_mask = sub(ones, active_mask);
  MemoryBank out;
  out.M = add(mul(active_mask, updated), mul(inactive_mask, memory.M));
  out.active = memory.active;
  return out;
}

Tensor model_forward(const ModelParams& params, const ForwardInput& input, real dropout_rate,
                     std::mt19937_64* rng) {
  const ModelConfig& cfg = params.config;
  const int n = static_cast<int>(input.ids.size());
  const bool slot_on = cfg.use_slot_attention && cfg.slot_layers > 0;
  Tensor scattered;
  if (slot_on) {
    std::vector<SlotRef> refs = input.mem_refs;
    if (refs.empty()) refs.assign(n, SlotRef{});
    if (static_cast<int>(refs.size()) != n)
      throw RuntimeError("forward: mem_refs length " + std::to_string(refs.size()) +
                         " does not match sequence length " + std::to_string(n));
    std::vector<Tensor> states = input.mem_states;
    if (states.empty()) states.push_back(Tensor::zeros({cfg.slot_n, cfg.d_h}));
    scattered = scatter_slot_memory(states, params.mem_null, refs);
  }
  Tensor hidden = run_stack(params, input.ids, input.mask_ta,
                            slot_on ? input.mask_slot : Tensor(), scattered, slot_on,
                            dropout_rate, rng);
  return matmul_bt(hidden, params.tok_emb);
}

}  // namespace amg
