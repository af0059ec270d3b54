// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime error.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nmtforge/corpus/corpus.h"
#include "nmtforge/corpus/toy.h"
#include "nmtforge/errors.h"
#include "nmtforge/metrics/bleu.h"
#include "nmtforge/numerics/checkpoint.h"
#include "nmtforge/pipeline/pipeline.h"
#include "nmtforge/text/bpe.h"
#include "nmtforge/text/normalize.h"
#include "nmtforge/text/truecase.h"
#include "nmtforge/train/train.h"
#include "nmtforge/version.h"

using namespace nmtforge;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

std::vector<std::string> read_text_lines(const std::string& path) { return read_lines(path); }

void write_text_lines(const std::string& path, const std::vector<std::string>& lines) { write_lines(path, lines); }

ParallelCorpus read_corpora(const std::vector<std::string>& paths) {
  std::vector<ParallelCorpus> parts;
  for (const auto& p : paths) parts.push_back(read_corpus(p));
  return concat_corpora(parts);
}

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

struct DecodeFlags {
  std::string mode = "beam";
  int beam = 4;
  double alpha = 0.6;
  double temperature = 1.0;
  int max_len = 0;
  std::string combine = "arithmetic";

  void add(CLI::App* app) {
    app->add_option("--mode", mode, "greedy, beam or sample")->check(CLI::IsMember({"greedy", "beam", "sample"}));
    app->add_option("--beam", beam, "beam size");
    app->add_option("--alpha", alpha, "length penalty exponent");
    app->add_option("--temperature", temperature, "sampling temperature");
    app->add_option("--max-len", max_len, "output length cap (0: 2 * source + 10)");
    app->add_option("--combine", combine, "ensemble combination")->check(CLI::IsMember({"arithmetic", "geometric"}));
  }

  DecodeConfig config(uint64_t seed) const {
    DecodeConfig d;
    d.mode = parse_decode_mode(mode);
    d.beam_size = beam;
    d.alpha = alpha;
    d.temperature = temperature;
    d.max_len = max_len;
    d.seed = seed;
    d.combine = combine == "geometric" ? EnsembleCombine::geometric : EnsembleCombine::arithmetic;
    d.validate();
    return d;
  }
};

struct OptimFlags {
  int batch_tokens = 1024;
  int warmup = 200;
  double peak_lr = 2e-3;
  double label_smoothing = 0.1;

  void add(CLI::App* app) {
    app->add_option("--batch-tokens", batch_tokens, "tokens per batch");
    app->add_option("--warmup", warmup, "warmup steps");
    app->add_option("--peak-lr", peak_lr, "learning rate at the end of warmup");
    app->add_option("--label-smoothing", label_smoothing, "label smoothing");
  }

  TrainConfig config(const ModelSpec& spec, int steps, uint64_t seed) const {
    TrainConfig tc;
    tc.batch_tokens = batch_tokens;
    tc.max_steps = steps;
    tc.optimizer = toy_optimizer(spec, warmup, peak_lr);
    tc.label_smoothing = label_smoothing;
    tc.seed = seed;
    return tc;
  }
};

std::vector<const Model*> pointers(const std::vector<Model>& models) {
  std::vector<const Model*> out;
  for (const auto& m : models) out.push_back(&m);
  return out;
}

std::vector<Model> load_models(const std::vector<std::string>& paths) {
  std::vector<Model> out;
  for (const auto& p : paths) out.push_back(load_model(p));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nmtforge: toy-scale neural machine translation workbench"};
  app.require_subcommand(0, 1);
  bool version = false;
  int threads = 1;
  app.add_flag("--version", version, "print version and file format versions");
  app.add_option("--threads", threads, "worker threads (work currently runs on one)")->check(CLI::PositiveNumber);

  uint64_t seed = 0;
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "random seed")->required(); };

  // gen-toy
  ToyTaskSpec toy;
  std::string toy_task = "lexicon_swap", toy_out;
  auto* gen = app.add_subcommand("gen-toy", "generate a synthetic parallel corpus");
  gen->add_option("--task", toy_task, "copy, reverse or lexicon_swap")->check(CLI::IsMember({"copy", "reverse", "lexicon_swap"}));
  gen->add_option("--vocab-size", toy.vocab_size, "vocabulary size including 4 reserved ids");
  gen->add_option("--min-len", toy.min_len);
  gen->add_option("--max-len", toy.max_len);
  gen->add_option("--pairs", toy.pairs);
  gen->add_option("--domain-shift", toy.domain_shift, "0 = base frequencies, 1 = inverted ranking");
  gen->add_option("--zipf", toy.zipf_exponent);
  gen->add_option("--language-seed", toy.language_seed, "seed of the lexicon and frequency ranking");
  gen->add_option("--out", toy_out, "corpus TSV")->required();
  add_seed(gen);

  // filter
  FilterRules rules;
  bool no_dedup = false;
  std::vector<std::string> filter_in;
  std::string filter_out;
  auto* filt = app.add_subcommand("filter", "apply the parallel-corpus filter rules");
  filt->add_option("--in", filter_in, "corpus TSV files")->required();
  filt->add_option("--out", filter_out, "filtered corpus TSV")->required();
  filt->add_option("--max-len", rules.max_len, "max words per side");
  filt->add_option("--max-word-chars", rules.max_word_chars, "max characters per word");
  filt->add_option("--max-ratio", rules.max_ratio, "max length ratio between sides");
  filt->add_flag("--no-dedup", no_dedup, "keep duplicate pairs");

  // bpe-learn / bpe-apply
  std::string bpe_in, bpe_out, bpe_model;
  size_t merges = 1000;
  auto* bl = app.add_subcommand("bpe-learn", "learn BPE merges from tokenized text");
  bl->add_option("--in", bpe_in, "tokenized text")->required();
  bl->add_option("--merges", merges, "number of merges");
  bl->add_option("--out", bpe_out, "merge file")->required();
  auto* ba = app.add_subcommand("bpe-apply", "segment tokenized text with BPE");
  ba->add_option("--model", bpe_model, "merge file")->required();
  ba->add_option("--in", bpe_in, "tokenized text")->required();
  ba->add_option("--out", bpe_out, "segmented text")->required();

  // train
  std::vector<std::string> data;
  std::string preset_name = "deeper", spec_file, direction = "l2r", out_dir, src_vocab, tgt_vocab;
  int steps = 1000, checkpoint_every = 0;
  OptimFlags optim;
  auto* tr = app.add_subcommand("train", "train a model from scratch");
  tr->add_option("--data", data, "corpus TSV files")->required();
  tr->add_option("--preset", preset_name, "model preset");
  tr->add_option("--spec", spec_file, "key=value spec file (overrides --preset)");
  tr->add_option("--direction", direction, "l2r or r2l")->check(CLI::IsMember({"l2r", "r2l"}));
  tr->add_option("--src-vocab", src_vocab, "source vocabulary (default: built from data)");
  tr->add_option("--tgt-vocab", tgt_vocab, "target vocabulary (default: built from data)");
  tr->add_option("--steps", steps, "optimizer steps");
  tr->add_option("--checkpoint-every", checkpoint_every, "write step-N.nmtf every N steps");
  tr->add_option("--out", out_dir, "output directory (model.nmtf, trace.jsonl)")->required();
  optim.add(tr);
  add_seed(tr);

  // finetune
  std::string model_path, method = "normal", dev_path;
  FinetuneConfig ft;
  std::string mrt_gen = "beam";
  bool no_gold = false, alpha_search = false;
  auto* fin = app.add_subcommand("finetune", "continue training with a finetuning regime");
  fin->add_option("--model", model_path, "checkpoint")->required();
  fin->add_option("--data", data, "in-domain corpus TSV files")->required();
  fin->add_option("--method", method, "normal, pss, denoise or mrt")->check(CLI::IsMember({"normal", "pss", "denoise", "mrt"}));
  fin->add_option("--steps", ft.steps, "finetuning steps");
  fin->add_option("--pss-mix", ft.pss_mix, "probability of feeding a first-pass prediction");
  fin->add_option("--denoise-pairs", ft.denoise.pair_fraction, "fraction of pairs corrupted");
  fin->add_option("--denoise-tokens", ft.denoise.token_prob, "per-token corruption probability");
  fin->add_option("--mrt-alpha", ft.mrt.alpha, "sharpness of Q");
  fin->add_option("--mrt-candidates", ft.mrt.num_candidates, "candidates per source");
  fin->add_option("--mrt-gen", mrt_gen, "beam or sample")->check(CLI::IsMember({"beam", "sample"}));
  fin->add_flag("--mrt-no-gold", no_gold, "leave the reference out of S(x)");
  fin->add_flag("--mrt-average", ft.mrt.average, "average the risk over sources");
  fin->add_option("--mrt-sources", ft.mrt.sources_per_step, "sources per MRT step");
  fin->add_flag("--mrt-alpha-search", alpha_search, "pick alpha from the default grid by dev BLEU");
  fin->add_option("--dev", dev_path, "dev corpus for --mrt-alpha-search");
  fin->add_option("--out", out_dir, "output directory (model.nmtf, trace.jsonl)")->required();
  optim.add(fin);
  add_seed(fin);

  // translate
  std::vector<std::string> models;
  std::string in_path, out_path, src_bpe, truecase_model;
  bool normalize = false, do_tokenize = false, target_bpe = false, detok = false, detrue = false;
  DecodeFlags dec;
  auto* tl = app.add_subcommand("translate", "translate text with one model or an ensemble");
  tl->add_option("--model", models, "checkpoints (several form an ensemble)")->required();
  tl->add_option("--in", in_path, "source lines")->required();
  tl->add_option("--out", out_path, "output lines")->required();
  tl->add_flag("--normalize", normalize, "normalize punctuation first");
  tl->add_flag("--tokenize", do_tokenize, "tokenize input");
  tl->add_option("--truecase-model", truecase_model, "truecaser counts for the input");
  tl->add_option("--bpe", src_bpe, "source BPE merges");
  tl->add_flag("--target-bpe", target_bpe, "join @@ subwords in the output");
  tl->add_flag("--detruecase", detrue, "capitalize output sentences");
  tl->add_flag("--detokenize", detok, "detokenize output");
  dec.add(tl);
  add_seed(tl);

  // score / self-bleu
  std::string hyp, ref;
  bool as_json = false, tokenized = false;
  auto* sc = app.add_subcommand("score", "corpus BLEU of a hypothesis file");
  sc->add_option("--hyp", hyp, "hypothesis lines")->required();
  sc->add_option("--ref", ref, "reference lines")->required();
  sc->add_flag("--tokenized", tokenized, "split on spaces instead of the BLEU tokenizer");
  sc->add_flag("--json", as_json, "print the full report as JSON");
  std::vector<std::string> hyps;
  auto* sb = app.add_subcommand("self-bleu", "BLEU of each system against the others");
  sb->add_option("--hyp", hyps, "one output file per system (same source lines)")->required();

  // select
  size_t k = 4;
  std::string policy = "normal";
  double floor = 1.0;
  auto* sel = app.add_subcommand("select", "choose ensemble members by dev BLEU or self-BLEU");
  sel->add_option("--model", models, "candidate checkpoints")->required();
  sel->add_option("--dev", dev_path, "dev corpus TSV")->required();
  sel->add_option("--k", k, "ensemble size");
  sel->add_option("--policy", policy, "normal or self_bleu")->check(CLI::IsMember({"normal", "self_bleu"}));
  sel->add_option("--floor", floor, "self_bleu: max dev BLEU gap to the best model");
  sel->add_option("--out", out_path, "selected entries, JSON lines")->required();
  dec.add(sel);

  // pipeline
  std::string config_path, cache_dir;
  auto* pl = app.add_subcommand("pipeline", "run an experiment config");
  pl->add_option("--config", config_path, "pipeline JSON")->required();
  pl->add_option("--out", out_dir, "report directory")->required();
  pl->add_option("--cache", cache_dir, "cache root (NMTFORGE_CACHE takes precedence)");
  add_seed(pl);

  // inspect-ckpt
  auto* ins = app.add_subcommand("inspect-ckpt", "describe a checkpoint");
  ins->add_option("--model", model_path, "checkpoint")->required();
  ins->add_flag("--json", as_json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (version) {
    std::printf("nmtforge %s\ncheckpoint format %u\npipeline stage format %d\n", kVersion, kCheckpointVersion,
                kStageFormatVersion);
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*gen) {
      toy.task = parse_toy_task(toy_task);
      toy.seed = seed;
      write_corpus(toy_out, gen_toy(toy), "gen-toy");
    } else if (*filt) {
      rules.dedup = !no_dedup;
      FilterStats st;
      const auto kept = filter_corpus(read_corpora(filter_in), rules, &st);
      write_corpus(filter_out, kept, "filter");
      std::fprintf(stderr,
                   "input %zu kept %zu empty %zu length %zu word %zu ratio %zu duplicates %zu\n", st.input, st.kept,
                   st.empty, st.length_exceeded, st.word_too_long, st.ratio_exceeded, st.duplicates);
    } else if (*bl) {
      BpeModel::learn(read_token_lines(bpe_in), merges).save(bpe_out);
    } else if (*ba) {
      const BpeModel bpe = BpeModel::load(bpe_model);
      std::vector<Tokens> out;
      for (const auto& l : read_token_lines(bpe_in)) out.push_back(bpe.apply(l));
      write_token_lines(bpe_out, out);
    } else if (*tr) {
      const ParallelCorpus corpus = read_corpora(data);
      ModelSpec spec;
      if (!spec_file.empty()) {
        std::ifstream in(spec_file);
        std::stringstream ss;
        ss << in.rdbuf();
        spec = ModelSpec::from_text(ss.str());
      } else {
        spec = preset(preset_name);
      }
      spec.direction = direction == "r2l" ? Direction::r2l : Direction::l2r;
      const Vocabulary sv = src_vocab.empty() ? Vocabulary::build(sources_of(corpus)) : Vocabulary::load(src_vocab);
      const Vocabulary tv = tgt_vocab.empty() ? Vocabulary::build(targets_of(corpus)) : Vocabulary::load(tgt_vocab);
      ensure_dir(out_dir);
      Model m = Model::build(spec, sv, tv, derive_seed(seed, 0));
      TrainConfig tc = optim.config(spec, steps, derive_seed(seed, 1));
      tc.checkpoint_every = checkpoint_every;
      tc.checkpoint_dir = out_dir;
      const TrainResult r = train(m, corpus, tc);
      m.lineage += "train " + spec.name + " steps " + std::to_string(steps) + " seed " + std::to_string(seed) + "\n";
      save_model(fs::path(out_dir) / "model.nmtf", m);
      write_trace(fs::path(out_dir) / "trace.jsonl", r.trace);
    } else if (*fin) {
      Model m = load_model(model_path);
      const ParallelCorpus corpus = read_corpora(data);
      ft.method = parse_finetune_method(method);
      ft.mrt.candidate_gen = parse_decode_mode(mrt_gen);
      ft.mrt.include_gold = !no_gold;
      TrainConfig tc = optim.config(m.spec(), ft.steps, seed);
      if (ft.method == FinetuneMethod::mrt) tc.label_smoothing = 0.0;
      ensure_dir(out_dir);
      if (alpha_search) {
        if (ft.method != FinetuneMethod::mrt) throw ConfigError("--mrt-alpha-search needs --method mrt");
        if (dev_path.empty()) throw ConfigError("--mrt-alpha-search needs --dev");
        DecodeConfig dc;
        dc.mode = DecodeMode::greedy;
        const auto res = mrt_alpha_search(m, corpus, read_corpus(dev_path), default_mrt_alpha_grid(), tc, ft, dc);
        for (size_t i = 0; i < res.alphas.size(); ++i) {
          std::fprintf(stderr, "alpha %g dev BLEU %.2f\n", res.alphas[i], res.dev_bleu[i]);
        }
        ft.mrt.alpha = res.best_alpha;
      }
      const TrainResult r = finetune(m, corpus, tc, ft);
      m.lineage += "finetune " + method + " steps " + std::to_string(ft.steps) + " seed " + std::to_string(seed) + "\n";
      save_model(fs::path(out_dir) / "model.nmtf", m);
      write_trace(fs::path(out_dir) / "trace.jsonl", r.trace);
    } else if (*tl) {
      const auto loaded = load_models(models);
      TextProcessing text;
      text.normalize = normalize;
      text.tokenize = do_tokenize;
      Truecaser tc;
      if (!truecase_model.empty()) {
        std::ifstream in(truecase_model);
        if (!in) throw FormatError("cannot open " + truecase_model);
        tc = Truecaser::read(in);
        text.truecaser = &tc;
      }
      BpeModel bpe;
      if (!src_bpe.empty()) {
        bpe = BpeModel::load(src_bpe);
        text.src_bpe = &bpe;
      }
      text.target_bpe = target_bpe;
      text.detruecase = detrue;
      text.detokenize = detok;
      const auto ptrs = pointers(loaded);
      write_text_lines(out_path, translate_corpus(ptrs, read_text_lines(in_path), dec.config(seed), text));
    } else if (*sc) {
      const auto h = read_text_lines(hyp), r = read_text_lines(ref);
      if (h.size() != r.size()) throw AlignError("hypothesis and reference line counts differ");
      BleuReport rep;
      if (tokenized) {
        std::vector<Tokens> ht, rt;
        for (const auto& l : h) ht.push_back(split_tokens(l));
        for (const auto& l : r) rt.push_back(split_tokens(l));
        rep = corpus_bleu(ht, rt);
      } else {
        rep = corpus_bleu(h, r);
      }
      if (as_json) {
        std::printf("%s\n", bleu_json(rep).c_str());
      } else {
        std::printf("%.2f\n", rep.score);
      }
    } else if (*sb) {
      if (hyps.size() < 2) throw ArityError("self-bleu needs at least two systems");
      std::vector<std::vector<Tokens>> outputs;
      for (const auto& p : hyps) {
        std::vector<Tokens> t;
        for (const auto& l : read_text_lines(p)) t.push_back(bleu_tokenize(l));
        outputs.push_back(std::move(t));
      }
      const auto s = self_bleu(outputs);
      for (size_t i = 0; i < hyps.size(); ++i) std::printf("%s\t%.2f\n", hyps[i].c_str(), s[i]);
    } else if (*sel) {
      const auto loaded = load_models(models);
      const ParallelCorpus dev = read_corpus(dev_path);
      const DecodeConfig dc = dec.config(0);
      std::vector<PoolEntry> pool;
      std::vector<std::vector<Tokens>> translations;
      for (size_t i = 0; i < loaded.size(); ++i) {
        const Model* p = &loaded[i];
        translations.push_back(translate_tokens(std::span<const Model* const>(&p, 1), sources_of(dev), dc));
        PoolEntry e;
        e.id = static_cast<int>(i);
        e.checkpoint = models[i];
        e.architecture = loaded[i].spec().name;
        e.direction = loaded[i].spec().direction;
        e.dev_bleu = corpus_bleu(translations.back(), targets_of(dev)).score;
        e.has_dev_bleu = true;
        pool.push_back(e);
      }
      std::vector<int> ids;
      if (policy == "normal") {
        ids = ensemble_select_normal(pool, k);
      } else {
        const auto s = ensemble_select_self_bleu(pool, translations, k, floor);
        ids = s.ids;
        for (size_t i = 0; i < pool.size(); ++i) {
          pool[i].self_bleu = s.self_bleu[i];
          pool[i].has_self_bleu = true;
        }
      }
      std::vector<std::string> lines;
      for (int id : ids) lines.push_back(to_json(pool[static_cast<size_t>(id)]).dump());
      write_text_lines(out_path, lines);
    } else if (*pl) {
      RunOptions o;
      o.out_dir = out_dir;
      o.cache_dir = cache_dir;
      o.seed = seed;
      o.on_stage = [](const StageRun& r) {
        std::fprintf(stderr, "%-24s %-12s %s %7.1fs\n", r.id.c_str(), r.kind.c_str(), r.cache_hit ? "cached" : "ran   ",
                     r.seconds);
      };
      const PipelineReport rep = run_experiment(PipelineConfig::load(config_path), o);
      std::printf("%s", rep.table().c_str());
    } else if (*ins) {
      const Model m = load_model(model_path);
      nlohmann::ordered_json j;
      j["spec"] = m.spec().to_text();
      j["src_vocab"] = m.src_vocab().size();
      j["tgt_vocab"] = m.tgt_vocab().size();
      j["parameters"] = m.parameter_count();
      j["trained_steps"] = m.trained_steps;
      j["lineage"] = m.lineage;
      nlohmann::ordered_json tensors;
      for (const auto& [name, t] : m.params()) tensors[name] = t.shape();
      j["tensors"] = tensors;
      if (as_json) {
        std::printf("%s\n", j.dump(2).c_str());
      } else {
        std::printf("%s", m.spec().to_text().c_str());
        std::printf("src_vocab=%zu\ntgt_vocab=%zu\nparameters=%lld\ntrained_steps=%lld\n", m.src_vocab().size(),
                    m.tgt_vocab().size(), static_cast<long long>(m.parameter_count()),
                    static_cast<long long>(m.trained_steps));
        if (!m.lineage.empty()) std::printf("lineage:\n%s", m.lineage.c_str());
      }
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return 0;
}
