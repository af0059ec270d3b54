// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nmtforge/decode/decode.h"
#include "nmtforge/model/model.h"
#include "nmtforge/numerics/optimizer.h"
#include "nmtforge/numerics/rng.h"

namespace nmtforge {

struct TrainConfig {
  int batch_tokens = 1024;
  int max_steps = 1000;
  OptimizerConfig optimizer;
  double label_smoothing = 0.1;
  uint64_t seed = 0;
  // Writes <checkpoint_dir>/step-<N>.nmtf every checkpoint_every steps (0 = never).
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

// Schedule defaults scaled for toy models: Noam decay with d_model from the
// spec, short warmup and a peak near 1e-3 per unit of base_lr.
OptimizerConfig toy_optimizer(const ModelSpec& spec, int64_t warmup_steps = 200, Real peak_lr = 2e-3);

struct TrainRecord {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
};

struct TrainResult {
  std::vector<TrainRecord> trace;
};

// One JSON object per line: {"step", "loss", "lr", "tokens_per_sec"}.
void write_trace(const std::filesystem::path& path, const std::vector<TrainRecord>& trace);

// Encodes a corpus with the model's vocabularies (targets reversed for
// right-to-left models) and deals shuffled token-bounded batches.
class Batcher {
 public:
  Batcher(const Model& model, const ParallelCorpus& corpus, int batch_tokens, uint64_t seed);
  Batch next();
  // Exactly n sentences (fewer only at the end of an epoch).
  Batch next_sentences(size_t n);
  size_t pairs() const { return src_.size(); }

 private:
  void reshuffle();

  std::vector<Ids> src_, tgt_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  int batch_tokens_;
  Rng rng_;
};

// Label-smoothed cross entropy averaged over target tokens.
Var cross_entropy_loss(Graph& g, const Model& model, const Batch& batch, double smoothing);

// Teacher-forced training from the model's current parameters. The schedule
// continues from model.trained_steps. Throws TrainingDiverged on a
// non-finite loss or gradient.
TrainResult train(Model& model, const ParallelCorpus& corpus, const TrainConfig& config);

// --- finetuning regimes ------------------------------------------------------

enum class FinetuneMethod { normal, pss, denoise, mrt };

std::string to_string(FinetuneMethod m);
FinetuneMethod parse_finetune_method(const std::string& s);

struct DenoiseConfig {
  double pair_fraction = 0.3;
  double token_prob = 0.15;
};

struct MrtConfig {
  double alpha = 0.005;
  int num_candidates = 4;
  DecodeMode candidate_gen = DecodeMode::beam;
  bool include_gold = true;
  // Divide R by the number of sources instead of summing.
  bool average = false;
  int sources_per_step = 16;

  void validate() const;
};

struct FinetuneConfig {
  FinetuneMethod method = FinetuneMethod::normal;
  int steps = 400;
  double pss_mix = 0.5;
  DenoiseConfig denoise;
  MrtConfig mrt;
};

// Continues training on in-domain data with the chosen regime. Label
// smoothing is turned off for MRT.
TrainResult finetune(Model& model, const ParallelCorpus& corpus, const TrainConfig& config, const FinetuneConfig& ft);

struct PssStats {
  size_t positions = 0;
  size_t mixed = 0;
};

// First pass of parallel scheduled sampling: teacher-forced argmax
// predictions (no gradient), mixed into the decoder inputs position by
// position with probability mix_ratio. <s> and the labels stay gold.
Batch pss_mix_batch(const Model& model, const Batch& batch, double mix_ratio, Rng& rng, PssStats* stats = nullptr);
Var pss_loss(Graph& g, const Model& model, const Batch& batch, double mix_ratio, Rng& rng, double smoothing,
             PssStats* stats = nullptr);

struct DenoiseStats {
  size_t pairs = 0;
  size_t selected_pairs = 0;
  size_t tokens = 0;
  size_t corrupted = 0;
};

// Picks pairs with probability pair_fraction; in a picked pair every decoder
// input token after <s> is, with probability token_prob, replaced by a
// uniformly drawn token of the same target sentence. Sources and labels are
// untouched.
Batch target_denoise_batch(const Batch& batch, const DenoiseConfig& config, Rng& rng, DenoiseStats* stats = nullptr);

// Q(y) = P(y)^alpha / sum_{y' in S} P(y')^alpha, evaluated in log space.
std::vector<double> mrt_q(std::span<const double> log_probs, double alpha);

// R = sum over sources of sum_y Q(y) * risk(y). seq_log_probs is a column of
// candidate log-probabilities; candidates of source s occupy rows
// [offsets[s], offsets[s+1]). Throws CandidateError on an empty set.
Var mrt_objective(Var seq_log_probs, std::span<const int64_t> offsets, std::span<const double> risks, double alpha,
                  bool average = false);

struct MrtSample {
  Ids src;
  Ids gold;
  std::vector<Ids> candidates;
  std::vector<double> risks;
};

// Candidate subsets S(x) from the current model plus risks
// -sentence_bleu(y, gold) / 100. Token ids exclude <s>/</s>.
std::vector<MrtSample> mrt_candidates(const Model& model, const std::vector<Ids>& sources,
                                      const std::vector<Ids>& golds, const MrtConfig& config, uint64_t seed);

// Sequence log-probabilities of every candidate (column), in sample order.
Var candidate_log_probs(Graph& g, const Model& model, const std::vector<MrtSample>& samples);
Var mrt_loss(Graph& g, const Model& model, const std::vector<MrtSample>& samples, const MrtConfig& config);

const std::vector<double>& default_mrt_alpha_grid();

struct AlphaSearchResult {
  double best_alpha = 0.0;
  std::vector<double> alphas;
  std::vector<double> dev_bleu;
};

// Finetunes a copy of the model with MRT for each alpha (at most 1000 steps)
// and keeps the alpha with the best dev BLEU; ties go to the smaller alpha.
AlphaSearchResult mrt_alpha_search(const Model& model, const ParallelCorpus& train_corpus, const ParallelCorpus& dev,
                                   std::vector<double> grid, const TrainConfig& config, FinetuneConfig ft,
                                   const DecodeConfig& decode_config);

// Corpus BLEU of the (ensembled) models' translations of dev sources.
double evaluate_bleu(std::span<const Model* const> models, const ParallelCorpus& dev, const DecodeConfig& config);
double evaluate_bleu(const Model& model, const ParallelCorpus& dev, const DecodeConfig& config);

}  // namespace nmtforge
