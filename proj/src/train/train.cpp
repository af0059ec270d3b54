// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/train/train.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>

#include "nmtforge/errors.h"
#include "nmtforge/metrics/bleu.h"

namespace nmtforge {

void TrainConfig::validate() const {
  if (batch_tokens < 1) throw ConfigError("batch_tokens must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label_smoothing must be in [0, 1)");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (checkpoint_every > 0 && checkpoint_dir.empty()) throw ConfigError("checkpoint_every needs checkpoint_dir");
  optimizer.validate();
}

OptimizerConfig toy_optimizer(const ModelSpec& spec, int64_t warmup_steps, Real peak_lr) {
  OptimizerConfig c;
  c.d_model = spec.hidden;
  c.warmup_steps = warmup_steps;
  // The Noam curve peaks at step == warmup with base_lr / sqrt(d_model * warmup).
  c.base_lr = peak_lr * std::sqrt(static_cast<Real>(spec.hidden) * static_cast<Real>(warmup_steps));
  c.clip_norm = 5.0;
  return c;
}

void write_trace(const std::filesystem::path& path, const std::vector<TrainRecord>& trace) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& r : trace) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    j["tokens_per_sec"] = r.tokens_per_sec;
    out << j.dump() << '\n';
  }
}

// --- batching ----------------------------------------------------------------

Batcher::Batcher(const Model& model, const ParallelCorpus& corpus, int batch_tokens, uint64_t seed)
    : batch_tokens_(batch_tokens), rng_(seed) {
  if (corpus.empty()) throw EmptyCorpusError("cannot batch an empty corpus");
  const ParallelCorpus& pairs = corpus;
  ParallelCorpus reversed;
  const bool r2l = model.spec().direction == Direction::r2l;
  if (r2l) reversed = r2l_wrap(corpus);
  for (const auto& p : r2l ? reversed : pairs) {
    src_.push_back(model.src_vocab().encode(p.source));
    tgt_.push_back(model.tgt_vocab().encode(p.target));
  }
  order_.resize(src_.size());
  reshuffle();
}

void Batcher::reshuffle() {
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  rng_.shuffle(order_);
  cursor_ = 0;
}

Batch Batcher::next() {
  std::vector<Ids> src, tgt;
  size_t tokens = 0;
  while (true) {
    if (cursor_ == order_.size()) {
      if (!src.empty()) break;
      reshuffle();
    }
    const size_t i = order_[cursor_];
    const size_t cost = std::max(src_[i].size(), tgt_[i].size()) + 1;
    if (!src.empty() && tokens + cost > static_cast<size_t>(batch_tokens_)) break;
    src.push_back(src_[i]);
    tgt.push_back(tgt_[i]);
    tokens += cost;
    ++cursor_;
  }
  return make_batch(src, tgt);
}

Batch Batcher::next_sentences(size_t n) {
  std::vector<Ids> src, tgt;
  while (src.size() < n) {
    if (cursor_ == order_.size()) {
      if (!src.empty()) break;
      reshuffle();
    }
    const size_t i = order_[cursor_++];
    src.push_back(src_[i]);
    tgt.push_back(tgt_[i]);
  }
  return make_batch(src, tgt);
}

Var cross_entropy_loss(Graph& g, const Model& model, const Batch& batch, double smoothing) {
  const Ids targets = batch.flat_tgt_out();
  return softmax_cross_entropy(model.forward(g, batch), targets, smoothing);
}

// --- training loop -----------------------------------------------------------

namespace {

using LossFn = std::function<Var(Graph&, const Batch&)>;
using BatchFn = std::function<Batch()>;

TrainResult run_loop(Model& model, const TrainConfig& config, int steps, const BatchFn& next_batch,
                     const LossFn& loss_fn) {
  Adam adam(config.optimizer);
  TrainResult result;
  for (int k = 0; k < steps; ++k) {
    const int64_t step = model.trained_steps + 1;
    const auto t0 = std::chrono::steady_clock::now();
    const Batch batch = next_batch();
    ParameterStore grads;
    double loss = 0.0;
    try {
      Graph g;
      Var l = loss_fn(g, batch);
      loss = l.value().item();
      g.backward(l);
      grads = g.param_grads();
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw TrainingDiverged("non-finite loss at step " + std::to_string(step));
    for (const auto& [name, t] : grads) {
      if (!t.all_finite()) throw TrainingDiverged("non-finite gradient for " + name + " at step " + std::to_string(step));
    }
    adam.step(model.params(), grads, step);
    model.trained_steps = step;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double tokens = static_cast<double>(batch.target_tokens());
    result.trace.push_back({step, loss, learning_rate(config.optimizer, step), secs > 0 ? tokens / secs : 0.0});
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      std::filesystem::create_directories(config.checkpoint_dir);
      save_model(config.checkpoint_dir / ("step-" + std::to_string(step) + ".nmtf"), model);
    }
  }
  return result;
}

}  // namespace

TrainResult train(Model& model, const ParallelCorpus& corpus, const TrainConfig& config) {
  config.validate();
  Batcher batcher(model, corpus, config.batch_tokens, config.seed);
  return run_loop(
      model, config, config.max_steps, [&] { return batcher.next(); },
      [&](Graph& g, const Batch& b) { return cross_entropy_loss(g, model, b, config.label_smoothing); });
}

// --- finetuning --------------------------------------------------------------

std::string to_string(FinetuneMethod m) {
  switch (m) {
    case FinetuneMethod::normal: return "normal";
    case FinetuneMethod::pss: return "pss";
    case FinetuneMethod::denoise: return "denoise";
    case FinetuneMethod::mrt: return "mrt";
  }
  return "?";
}

FinetuneMethod parse_finetune_method(const std::string& s) {
  for (auto m : {FinetuneMethod::normal, FinetuneMethod::pss, FinetuneMethod::denoise, FinetuneMethod::mrt}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown finetune method '" + s + "'");
}

void MrtConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("mrt alpha must be positive");
  if (num_candidates < 1) throw ConfigError("mrt num_candidates must be >= 1");
  if (sources_per_step < 1) throw ConfigError("mrt sources_per_step must be >= 1");
  if (candidate_gen == DecodeMode::greedy) throw ConfigError("mrt candidates come from beam or sample");
}

Batch pss_mix_batch(const Model& model, const Batch& batch, double mix_ratio, Rng& rng, PssStats* stats) {
  if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) throw ConfigError("pss mix ratio must be in [0, 1]");
  Ids predicted;
  {
    Graph g(false);
    const Tensor& logits = model.forward(g, batch).value();
    predicted.resize(static_cast<size_t>(logits.rows()));
    for (int64_t r = 0; r < logits.rows(); ++r) {
      auto row = logits.row(r);
      predicted[static_cast<size_t>(r)] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
  }
  Batch mixed = batch;
  size_t flat = 0;
  for (auto& in : mixed.tgt_in) {
    // Position j >= 1 of the decoder input holds y_j, predicted at row j - 1.
    for (size_t j = 1; j < in.size(); ++j) {
      const bool swap = rng.bernoulli(mix_ratio);
      if (stats) ++stats->positions;
      if (swap) {
        in[j] = predicted[flat + j - 1];
        if (stats) ++stats->mixed;
      }
    }
    flat += in.size();
  }
  return mixed;
}

Var pss_loss(Graph& g, const Model& model, const Batch& batch, double mix_ratio, Rng& rng, double smoothing,
             PssStats* stats) {
  return cross_entropy_loss(g, model, pss_mix_batch(model, batch, mix_ratio, rng, stats), smoothing);
}

Batch target_denoise_batch(const Batch& batch, const DenoiseConfig& config, Rng& rng, DenoiseStats* stats) {
  if (!(config.pair_fraction >= 0.0 && config.pair_fraction <= 1.0) ||
      !(config.token_prob >= 0.0 && config.token_prob <= 1.0)) {
    throw ConfigError("denoise probabilities must be in [0, 1]");
  }
  Batch out = batch;
  for (size_t i = 0; i < out.size(); ++i) {
    auto& in = out.tgt_in[i];
    if (stats) ++stats->pairs;
    if (!rng.bernoulli(config.pair_fraction)) continue;
    if (stats) ++stats->selected_pairs;
    const Ids original = batch.tgt_in[i];
    for (size_t j = 1; j < in.size(); ++j) {
      if (stats) ++stats->tokens;
      if (!rng.bernoulli(config.token_prob)) continue;
      // Uniform over the sentence's own target tokens (excluding <s>).
      in[j] = original[1 + rng.below(original.size() - 1)];
      if (stats) ++stats->corrupted;
    }
  }
  return out;
}

std::vector<double> mrt_q(std::span<const double> log_probs, double alpha) {
  if (log_probs.empty()) throw CandidateError("empty candidate set");
  double top = -std::numeric_limits<double>::infinity();
  for (double lp : log_probs) top = std::max(top, alpha * lp);
  std::vector<double> q(log_probs.size());
  double z = 0.0;
  for (size_t i = 0; i < q.size(); ++i) z += q[i] = std::exp(alpha * log_probs[i] - top);
  for (double& v : q) v /= z;
  return q;
}

Var mrt_objective(Var seq_log_probs, std::span<const int64_t> offsets, std::span<const double> risks, double alpha,
                  bool average) {
  if (offsets.size() < 2) throw CandidateError("no sources");
  if (seq_log_probs.cols() != 1 || seq_log_probs.rows() != offsets.back() ||
      static_cast<int64_t>(risks.size()) != offsets.back()) {
    throw ShapeError("mrt: log-prob column, offsets and risks disagree");
  }
  Graph& g = seq_log_probs.graph();
  std::vector<Var> terms;
  for (size_t s = 0; s + 1 < offsets.size(); ++s) {
    const int64_t b = offsets[s], e = offsets[s + 1];
    if (e <= b) throw CandidateError("empty candidate set for source " + std::to_string(s));
    Var row = transpose(slice(seq_log_probs, 0, b, e));
    Var q = softmax(scale(row, alpha));
    std::vector<Real> r(risks.begin() + b, risks.begin() + e);
    terms.push_back(sum(mul(q, g.constant(Tensor({1, e - b}, std::move(r))))));
  }
  Var total = sum(concat(terms, 1));
  return average ? scale(total, 1.0 / static_cast<Real>(terms.size())) : total;
}

namespace {

Tokens id_tokens(const Ids& ids) {
  Tokens t;
  t.reserve(ids.size());
  for (int id : ids) t.push_back(std::to_string(id));
  return t;
}

}  // namespace

std::vector<MrtSample> mrt_candidates(const Model& model, const std::vector<Ids>& sources,
                                      const std::vector<Ids>& golds, const MrtConfig& config, uint64_t seed) {
  config.validate();
  if (sources.size() != golds.size()) throw AlignError("mrt: source/gold counts differ");
  std::vector<MrtSample> samples(sources.size());
  for (size_t i = 0; i < sources.size(); ++i) {
    samples[i].src = sources[i];
    samples[i].gold = golds[i];
  }
  auto add = [](MrtSample& s, Ids y) {
    if (std::find(s.candidates.begin(), s.candidates.end(), y) == s.candidates.end()) s.candidates.push_back(std::move(y));
  };
  // Decoders see sources the way batches and translate_tokens present them.
  std::vector<Ids> inputs = sources;
  for (auto& x : inputs) x.push_back(Vocabulary::kEos);
  DecodeConfig dc;
  dc.seed = seed;
  if (config.candidate_gen == DecodeMode::beam) {
    dc.mode = DecodeMode::beam;
    dc.beam_size = config.num_candidates;
    const auto sets = beam_search(model, inputs, dc);
    for (size_t i = 0; i < sources.size(); ++i) {
      for (const auto& h : sets[i]) add(samples[i], h.output());
    }
  } else {
    dc.mode = DecodeMode::sample;
    for (int k = 0; k < config.num_candidates; ++k) {
      dc.seed = derive_seed(seed, static_cast<uint64_t>(k));
      const auto hyps = sample_decode(model, inputs, dc);
      for (size_t i = 0; i < sources.size(); ++i) add(samples[i], hyps[i].output());
    }
  }
  for (auto& s : samples) {
    if (config.include_gold) add(s, s.gold);
    if (s.candidates.empty()) throw CandidateError("no candidates generated");
    const Tokens ref = id_tokens(s.gold);
    for (const auto& y : s.candidates) s.risks.push_back(-sentence_bleu(id_tokens(y), ref) / 100.0);
  }
  return samples;
}

Var candidate_log_probs(Graph& g, const Model& model, const std::vector<MrtSample>& samples) {
  std::vector<Ids> src, tgt;
  for (const auto& s : samples) {
    for (const auto& y : s.candidates) {
      src.push_back(s.src);
      tgt.push_back(y);
    }
  }
  const Batch batch = make_batch(src, tgt);
  const Ids targets = batch.flat_tgt_out();
  Var tok = token_log_probs(model.forward(g, batch), targets);
  return segment_sum(tok, batch.tgt_offsets());
}

Var mrt_loss(Graph& g, const Model& model, const std::vector<MrtSample>& samples, const MrtConfig& config) {
  std::vector<int64_t> offsets{0};
  std::vector<double> risks;
  for (const auto& s : samples) {
    if (s.candidates.empty()) throw CandidateError("empty candidate set");
    offsets.push_back(offsets.back() + static_cast<int64_t>(s.candidates.size()));
    risks.insert(risks.end(), s.risks.begin(), s.risks.end());
  }
  return mrt_objective(candidate_log_probs(g, model, samples), offsets, risks, config.alpha, config.average);
}

namespace {

std::vector<Ids> strip_eos(const std::vector<Ids>& seqs) {
  std::vector<Ids> out;
  for (const auto& s : seqs) out.emplace_back(s.begin(), s.end() - 1);
  return out;
}

}  // namespace

TrainResult finetune(Model& model, const ParallelCorpus& corpus, const TrainConfig& config, const FinetuneConfig& ft) {
  config.validate();
  if (ft.steps < 0) throw ConfigError("finetune steps must be >= 0");
  Batcher batcher(model, corpus, config.batch_tokens, config.seed);
  Rng rng(derive_seed(config.seed, 0x5eed));
  const double ls = config.label_smoothing;
  switch (ft.method) {
    case FinetuneMethod::normal:
      return run_loop(
          model, config, ft.steps, [&] { return batcher.next(); },
          [&](Graph& g, const Batch& b) { return cross_entropy_loss(g, model, b, ls); });
    case FinetuneMethod::pss:
      return run_loop(
          model, config, ft.steps, [&] { return batcher.next(); },
          [&](Graph& g, const Batch& b) { return pss_loss(g, model, b, ft.pss_mix, rng, ls); });
    case FinetuneMethod::denoise:
      return run_loop(
          model, config, ft.steps, [&] { return target_denoise_batch(batcher.next(), ft.denoise, rng); },
          [&](Graph& g, const Batch& b) { return cross_entropy_loss(g, model, b, ls); });
    case FinetuneMethod::mrt: {
      ft.mrt.validate();
      uint64_t round = 0;
      return run_loop(
          model, config, ft.steps, [&] { return batcher.next_sentences(static_cast<size_t>(ft.mrt.sources_per_step)); },
          [&](Graph& g, const Batch& b) {
            const auto samples = mrt_candidates(model, strip_eos(b.src), strip_eos(b.tgt_out), ft.mrt,
                                                derive_seed(config.seed, ++round));
            return mrt_loss(g, model, samples, ft.mrt);
          });
    }
  }
  throw ConfigError("unknown finetune method");
}

const std::vector<double>& default_mrt_alpha_grid() {
  static const std::vector<double> grid{0.005, 0.05, 0.5, 1.0, 1.5, 2.0};
  return grid;
}

AlphaSearchResult mrt_alpha_search(const Model& model, const ParallelCorpus& train_corpus, const ParallelCorpus& dev,
                                   std::vector<double> grid, const TrainConfig& config, FinetuneConfig ft,
                                   const DecodeConfig& decode_config) {
  if (grid.empty()) throw ConfigError("empty alpha grid");
  std::sort(grid.begin(), grid.end());
  ft.method = FinetuneMethod::mrt;
  ft.steps = std::min(ft.steps, 1000);
  AlphaSearchResult result;
  double best = -1.0;
  for (double a : grid) {
    Model m = model;
    ft.mrt.alpha = a;
    finetune(m, train_corpus, config, ft);
    const double bleu = evaluate_bleu(m, dev, decode_config);
    result.alphas.push_back(a);
    result.dev_bleu.push_back(bleu);
    if (bleu > best) {
      best = bleu;
      result.best_alpha = a;
    }
  }
  return result;
}

double evaluate_bleu(std::span<const Model* const> models, const ParallelCorpus& dev, const DecodeConfig& config) {
  const auto hyps = translate_tokens(models, sources_of(dev), config);
  return corpus_bleu(hyps, targets_of(dev)).score;
}

double evaluate_bleu(const Model& model, const ParallelCorpus& dev, const DecodeConfig& config) {
  const Model* m = &model;
  return evaluate_bleu(std::span<const Model* const>(&m, 1), dev, config);
}

}  // namespace nmtforge
