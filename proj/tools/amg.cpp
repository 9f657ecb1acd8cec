#include "amg/corpus.hpp"
#include "amg/decoding.hpp"
#include "amg/manifest.hpp"
#include "amg/metrics.hpp"
#include "amg/model.hpp"
#include "amg/table.hpp"
#include "amg/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

namespace {

using namespace amg;

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string join_argv(int argc, char** argv) {
  std::string out;
  for (int i = 0; i < argc; ++i) {
    if (i) out += " ";
    out += argv[i];
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Optional --config file: {"model": {...}, "train": {...}}, either key may be
// absent. Command-line flags override file values.
void apply_config_file(const std::string& path, ModelConfig& model, TrainConfig& train) {
  if (path.empty()) return;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config file " + path + ": " + e.what());
  }
  if (j.contains("model")) model = ModelConfig::from_json(j["model"].dump());
  if (j.contains("train")) train = TrainConfig::from_json(j["train"].dump());
}

Vocabulary build_vocab_from(const std::vector<Example>& examples, int min_count) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& ex : examples) {
    corpus.push_back(linearize_tokens(ex.table));
    if (!ex.reference.empty()) corpus.push_back(split_tokens(ex.reference));
  }
  return Vocabulary::build(corpus, min_count);
}

std::string resolved_config_json(const ModelConfig& model, const TrainConfig& train) {
  nlohmann::json j;
  j["model"] = nlohmann::json::parse(model.to_json());
  j["train"] = nlohmann::json::parse(train.to_json());
  return j.dump();
}

void require_stage(const std::string& got, const std::string& want, bool allow_skip) {
  if (got == want || allow_skip) return;
  throw ValidationError("checkpoint stage is '" + got + "', expected '" + want +
                        "' (use --allow-skip to override)");
}

void log_progress(const TrainLogEntry& e) {
  std::cerr << e.stage << " step " << e.step << " loss " << e.loss << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AMG table-to-text: training, generation and evaluation"};
  app.require_subcommand(1);

  std::uint64_t seed = 17;
  std::string config_path;
  app.add_option("--seed", seed, "global RNG seed")->capture_default_str();
  app.add_option("--config", config_path, "JSON config file with model/train sections");

  // make-corpus
  auto* mk = app.add_subcommand("make-corpus", "generate a synthetic table corpus");
  std::string mk_out_dir;
  int mk_n_tables = 50, mk_max_slots = 4;
  mk->add_option("--out-dir", mk_out_dir, "output directory")->required();
  mk->add_option("--n-tables", mk_n_tables)->capture_default_str();
  mk->add_option("--max-slots", mk_max_slots)->capture_default_str();

  // build-vocab
  auto* bv = app.add_subcommand("build-vocab", "build a vocabulary from a dataset");
  std::string bv_data, bv_out;
  int bv_min_count = 1;
  bv->add_option("--data", bv_data, "JSONL dataset")->required();
  bv->add_option("--out", bv_out, "vocabulary file")->required();
  bv->add_option("--min-count", bv_min_count)->capture_default_str();

  // pretrain
  auto* pt = app.add_subcommand("pretrain", "task-adaptive pre-training phase 1 or 2");
  int pt_phase = 0;
  std::string pt_data, pt_vocab, pt_out, pt_init;
  int pt_epochs = -1;
  bool pt_allow_skip = false;
  pt->add_option("--phase", pt_phase, "1 = slot attention, 2 = slot memory")
      ->required()
      ->check(CLI::IsMember({1, 2}));
  pt->add_option("--data", pt_data, "unlabeled tables JSONL")->required();
  pt->add_option("--vocab", pt_vocab, "vocabulary file")->required();
  pt->add_option("--out", pt_out, "output checkpoint")->required();
  pt->add_option("--init", pt_init, "input checkpoint (required for phase 2)");
  pt->add_option("--epochs", pt_epochs, "override epoch count");
  pt->add_flag("--allow-skip", pt_allow_skip, "skip stage-order checks");

  // finetune
  auto* ft = app.add_subcommand("finetune", "fine-tune on labeled pairs");
  std::string ft_data, ft_val, ft_vocab, ft_out, ft_init;
  int ft_epochs = -1;
  bool ft_allow_skip = false;
  ft->add_option("--data", ft_data, "labeled pairs JSONL")->required();
  ft->add_option("--val", ft_val, "validation pairs JSONL (best checkpoint kept)");
  ft->add_option("--vocab", ft_vocab, "vocabulary file")->required();
  ft->add_option("--init", ft_init, "phase-2 checkpoint")->required();
  ft->add_option("--out", ft_out, "output checkpoint")->required();
  ft->add_option("--epochs", ft_epochs, "override epoch count");
  ft->add_flag("--allow-skip", ft_allow_skip, "skip stage-order checks");

  // generate
  auto* gen = app.add_subcommand("generate", "beam-search generation");
  std::string gen_ckpt, gen_vocab, gen_input, gen_out;
  int gen_beam = 3, gen_max_tgt = 64;
  double gen_len_pen = 1.0;
  gen->add_option("--ckpt", gen_ckpt, "model checkpoint")->required();
  gen->add_option("--vocab", gen_vocab, "vocabulary file")->required();
  gen->add_option("--input", gen_input, "tables JSONL")->required();
  gen->add_option("--out", gen_out, "predictions JSONL")->required();
  gen->add_option("--beam", gen_beam, "beam size")->capture_default_str();
  gen->add_option("--length-penalty", gen_len_pen)->capture_default_str();
  gen->add_option("--max-tgt", gen_max_tgt)->capture_default_str();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score predictions against gold pairs");
  std::string ev_pred, ev_gold, ev_out;
  double ev_lambda = 0.5;
  ev->add_option("--pred", ev_pred, "predictions JSONL")->required();
  ev->add_option("--gold", ev_gold, "gold pairs JSONL")->required();
  ev->add_option("--out", ev_out, "report JSON (stdout when omitted)");
  ev->add_option("--lambda", ev_lambda, "PARENT recall mixing weight")
      ->capture_default_str();

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate a model variant end-to-end");
  std::string ab_data, ab_eval, ab_out_dir;
  bool ab_no_slot = false, ab_no_mem = false;
  int ab_pretrain_epochs = -1, ab_finetune_epochs = -1, ab_beam = 3;
  ab->add_option("--data", ab_data, "labeled pairs JSONL (train)")->required();
  ab->add_option("--eval", ab_eval, "labeled pairs JSONL to score (defaults to --data)");
  ab->add_option("--out-dir", ab_out_dir, "output directory")->required();
  ab->add_flag("--no-slot-attention", ab_no_slot, "token attention only");
  ab->add_flag("--no-memory", ab_no_mem, "memory frozen at init, no gated updates");
  ab->add_option("--pretrain-epochs", ab_pretrain_epochs, "override per-phase epochs");
  ab->add_option("--finetune-epochs", ab_finetune_epochs, "override epochs");
  ab->add_option("--beam", ab_beam)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  Timer timer;
  const std::string command = join_argv(argc, argv);

  try {
    ModelConfig model_cfg;
    TrainConfig train_cfg;
    apply_config_file(config_path, model_cfg, train_cfg);
    train_cfg.seed = seed;

    if (*mk) {
      GeneratorSpec spec = default_spec(mk_max_slots);
      spec.seed = seed;
      spec.n_tables = mk_n_tables;
      const std::string unlabeled = mk_out_dir + "/unlabeled.jsonl";
      const std::string labeled = mk_out_dir + "/labeled.jsonl";
      make_corpus_files(spec, unlabeled, labeled);
      RunManifest m{command, "", seed, {}, {unlabeled, labeled}, {}, timer.seconds()};
      write_manifest(m, mk_out_dir + "/corpus.manifest.json");
      std::cerr << "wrote " << spec.n_tables << " tables to " << mk_out_dir << "\n";
    } else if (*bv) {
      Vocabulary vocab = build_vocab_from(load_jsonl(bv_data), bv_min_count);
      vocab.save(bv_out);
      RunManifest m{command, "", seed, {bv_data}, {bv_out}, {}, timer.seconds()};
      write_manifest(m, bv_out + ".manifest.json");
      std::cerr << "vocabulary of " << vocab.size() << " tokens written to " << bv_out << "\n";
    } else if (*pt) {
      Vocabulary vocab = Vocabulary::load(pt_vocab);
      model_cfg.vocab_size = vocab.size();
      ModelParams params = [&] {
        if (pt_init.empty()) {
          if (pt_phase == 2 && !pt_allow_skip)
            throw ValidationError("pretrain --phase 2 requires --init with a phase-1 "
                                  "checkpoint (use --allow-skip to start fresh)");
          return ModelParams::init(model_cfg, seed);
        }
        Checkpoint ckpt = load_checkpoint(pt_init);
        require_stage(ckpt.stage, pt_phase == 2 ? "phase1" : "init", pt_allow_skip);
        return std::move(ckpt.params);
      }();
      const Stage stage = pt_phase == 1 ? Stage::Phase1 : Stage::Phase2;
      const int epochs = pt_epochs >= 0 ? pt_epochs : train_cfg.pretrain_epochs;
      // Stage-entry snapshot: the frozen memory encoder decoding must reuse.
      ModelParams entry = ModelParams::from_tensors(params.config, params.to_tensors());
      TrainResult result = train_stage(std::move(params), stage, load_jsonl(pt_data), {},
                                       vocab, train_cfg, epochs, 0, {}, log_progress);
      save_checkpoint(pt_out, result.params, stage_name(stage), &entry);
      RunManifest m{command,
                    resolved_config_json(result.params.config, train_cfg),
                    seed,
                    {pt_data, pt_vocab},
                    {pt_out},
                    pt_init.empty() ? std::vector<std::string>{stage_name(stage)}
                                    : std::vector<std::string>{pt_init, stage_name(stage)},
                    timer.seconds()};
      write_manifest(m, pt_out + ".manifest.json");
      std::cerr << "phase " << pt_phase << " final train loss " << result.final_train_loss
                << "\n";
    } else if (*ft) {
      Vocabulary vocab = Vocabulary::load(ft_vocab);
      Checkpoint ckpt = load_checkpoint(ft_init);
      require_stage(ckpt.stage, "phase2", ft_allow_skip);
      const int epochs = ft_epochs >= 0 ? ft_epochs : train_cfg.finetune_epochs;
      std::vector<Example> val;
      if (!ft_val.empty()) val = load_jsonl(ft_val);
      ModelParams entry =
          ModelParams::from_tensors(ckpt.params.config, ckpt.params.to_tensors());
      TrainResult result = train_stage(std::move(ckpt.params), Stage::Finetune,
                                       load_jsonl(ft_data), val, vocab, train_cfg, epochs, 0,
                                       {}, log_progress);
      save_checkpoint(ft_out, result.params, "finetuned", &entry);
      RunManifest m{command,
                    resolved_config_json(result.params.config, train_cfg),
                    seed,
                    {ft_data, ft_vocab, ft_init},
                    {ft_out},
                    {ft_init, "finetuned"},
                    timer.seconds()};
      write_manifest(m, ft_out + ".manifest.json");
      std::cerr << "finetune final train loss " << result.final_train_loss << "\n";
    } else if (*gen) {
      Vocabulary vocab = Vocabulary::load(gen_vocab);
      Checkpoint ckpt = load_checkpoint(gen_ckpt);
      DecodeOptions opt{gen_beam, gen_len_pen, gen_max_tgt};
      const long n = generate_file(ckpt.params, ckpt.stage, vocab, gen_input, gen_out, opt,
                                   ckpt.frozen_source ? &*ckpt.frozen_source : nullptr);
      RunManifest m{command,
                    ckpt.params.config.to_json(),
                    seed,
                    {gen_ckpt, gen_vocab, gen_input},
                    {gen_out},
                    {gen_ckpt, "predictions"},
                    timer.seconds()};
      write_manifest(m, gen_out + ".manifest.json");
      std::cerr << "wrote " << n << " predictions to " << gen_out << "\n";
    } else if (*ev) {
      EvalReport report = evaluate_file(ev_pred, ev_gold, ev_lambda);
      if (ev_out.empty()) {
        std::cout << report.json << "\n";
      } else {
        std::ofstream out(ev_out, std::ios::trunc);
        if (!out) throw RuntimeError("evaluate: cannot open " + ev_out + " for writing");
        out << report.json << "\n";
        RunManifest m{command, "", seed, {ev_pred, ev_gold}, {ev_out}, {}, timer.seconds()};
        write_manifest(m, ev_out + ".manifest.json");
      }
      std::cerr << "bleu4 " << report.bleu4 << " rouge_l " << report.rouge_l << " parent_f "
                << report.parent.f << " parent_t_f " << report.parent_t.f << "\n";
    } else if (*ab) {
      std::vector<Example> train = load_jsonl(ab_data);
      std::vector<Example> eval_set = ab_eval.empty() ? train : load_jsonl(ab_eval);
      Vocabulary vocab = build_vocab_from(train, 1);
      const std::string vocab_path = ab_out_dir + "/vocab.txt";
      vocab.save(vocab_path);

      model_cfg.vocab_size = vocab.size();
      model_cfg.use_slot_attention = !ab_no_slot;
      model_cfg.use_memory = !ab_no_mem;
      const int pre_epochs =
          ab_pretrain_epochs >= 0 ? ab_pretrain_epochs : train_cfg.pretrain_epochs;
      const int fin_epochs =
          ab_finetune_epochs >= 0 ? ab_finetune_epochs : train_cfg.finetune_epochs;

      ModelParams params = ModelParams::init(model_cfg, seed);
      TrainResult r1 =
          train_stage(std::move(params), Stage::Phase1, train, {}, vocab, train_cfg,
                      pre_epochs, 0, {}, log_progress);
      save_checkpoint(ab_out_dir + "/phase1.ckpt", r1.params, "phase1");
      TrainResult r2 =
          train_stage(std::move(r1.params), Stage::Phase2, train, {}, vocab, train_cfg,
                      pre_epochs, 0, {}, log_progress);
      save_checkpoint(ab_out_dir + "/phase2.ckpt", r2.params, "phase2");
      ModelParams entry =
          ModelParams::from_tensors(r2.params.config, r2.params.to_tensors());
      TrainResult r3 =
          train_stage(std::move(r2.params), Stage::Finetune, train, {}, vocab, train_cfg,
                      fin_epochs, 0, {}, log_progress);
      const std::string final_ckpt = ab_out_dir + "/finetuned.ckpt";
      save_checkpoint(final_ckpt, r3.params, "finetuned", &entry);

      const std::string pred_path = ab_out_dir + "/predictions.jsonl";
      DecodeOptions opt{ab_beam, 1.0, r3.params.config.max_tgt};
      generate_file(r3.params, "finetuned", vocab, ab_eval.empty() ? ab_data : ab_eval,
                    pred_path, opt, &entry);
      EvalReport report = evaluate_file(pred_path, ab_eval.empty() ? ab_data : ab_eval, 0.5);
      const std::string report_path = ab_out_dir + "/report.json";
      std::ofstream out(report_path, std::ios::trunc);
      if (!out) throw RuntimeError("ablate: cannot open " + report_path + " for writing");
      out << report.json << "\n";

      RunManifest m{command,
                    resolved_config_json(model_cfg, train_cfg),
                    seed,
                    {ab_data},
                    {vocab_path, ab_out_dir + "/phase1.ckpt", ab_out_dir + "/phase2.ckpt",
                     final_ckpt, pred_path, report_path},
                    {"init", "phase1", "phase2", "finetuned"},
                    timer.seconds()};
      write_manifest(m, report_path + ".manifest.json");
      std::cout << "variant" << (ab_no_slot ? " no-slot-attention" : "")
                << (ab_no_mem ? " no-memory" : "")
                << (!ab_no_slot && !ab_no_mem ? " full" : "") << " parent_t_f "
                << report.parent_t.f << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const RuntimeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
