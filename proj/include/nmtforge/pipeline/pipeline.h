// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nmtforge/corpus/corpus.h"
#include "nmtforge/decode/decode.h"
#include "nmtforge/model/model.h"
#include "nmtforge/train/train.h"

namespace nmtforge {

// --- synthetic data ----------------------------------------------------------

// Each reverse (target -> source) model translates the monolingual target
// lines; every model's output is paired with the original lines, labelled
// back_translated (augmentation sample when decoding by sampling, clean
// otherwise), concatenated in model order and filtered. Sampling model m uses
// seed derive_seed(decode.seed, m). Throws ModelStateError for a model with no
// training steps.
ParallelCorpus back_translate(const std::vector<Tokens>& mono_target, std::span<const Model* const> reverse_models,
                              const DecodeConfig& decode, const FilterRules& rules, FilterStats* stats = nullptr);

// Sources paired with each teacher's translation, teacher by teacher,
// labelled distilled. Unfiltered, so every teacher contributes one pair per
// source.
ParallelCorpus knowledge_distill(const std::vector<Tokens>& sources, std::span<const Model* const> teachers,
                                 const DecodeConfig& decode);

// Distinct architecture tags in pool order; a model's tag is its spec name.
std::vector<std::string> architectures_of(std::span<const Model* const> pool);

// One knowledge-transfer round: the first model of each of the first
// k_ensemble distinct architectures (pool order) translate the in-domain
// source lines as an ensemble. Throws PoolError when the pool has fewer
// distinct architectures.
ParallelCorpus in_domain_transfer_iteration(std::span<const Model* const> pool, const std::vector<Tokens>& mono_source,
                                            int k_ensemble, const DecodeConfig& decode);

struct TransferConfig {
  int k_ensemble = 4;
  int iterations = 2;
  DecodeConfig decode;

  void validate() const;
};

// Builds the next pool from the pseudo corpus of the given iteration (1-based).
using RetrainFn = std::function<std::vector<Model>(const ParallelCorpus& pseudo, int iteration)>;

// Iterated transfer starting from a finetuned pool. Every iteration
// translates with the pool produced by the previous one, and the retrain
// callback only ever sees the current iteration's pseudo corpus. Returns the
// pseudo corpus of each iteration; the final pool is left in *final_pool.
std::vector<ParallelCorpus> in_domain_transfer(std::vector<Model> pool, const std::vector<Tokens>& mono_source,
                                               const TransferConfig& config, const RetrainFn& retrain,
                                               std::vector<Model>* final_pool = nullptr);

// --- model pool and ensemble selection ---------------------------------------

struct PoolEntry {
  int id = 0;
  std::string checkpoint;
  std::string architecture;
  Direction direction = Direction::l2r;
  int shard = 0;
  Augmentation augmentation = Augmentation::clean;
  // Empty until finetuned.
  std::optional<FinetuneMethod> finetune;
  double dev_bleu = 0.0;
  bool has_dev_bleu = false;
  double self_bleu = 0.0;
  bool has_self_bleu = false;
};

nlohmann::ordered_json to_json(const PoolEntry& e);
PoolEntry pool_entry_from_json(const nlohmann::json& j);

// Top k by dev BLEU, ties by entry id. Returns entry ids, best first.
// Throws PoolError when k is out of range or a dev score is missing.
std::vector<int> ensemble_select_normal(const std::vector<PoolEntry>& pool, size_t k);

struct SelfBleuSelection {
  std::vector<int> ids;
  // Indexed like the pool.
  std::vector<double> self_bleu;
  std::vector<bool> passed_floor;
};

// translations[i] holds pool[i]'s dev translations. Models more than `floor`
// BLEU below the best dev score are set aside; the rest are ranked by
// self-BLEU ascending, then dev BLEU descending, then entry id. When fewer
// than k pass the floor the remainder is filled in normal order.
SelfBleuSelection ensemble_select_self_bleu(const std::vector<PoolEntry>& pool,
                                            const std::vector<std::vector<Tokens>>& translations, size_t k,
                                            double floor = 1.0);

// --- experiment runner --------------------------------------------------------

// Artifact produced by a stage kind.
enum class ArtifactType { corpus, lines, vocab, pool, row };

std::string to_string(ArtifactType t);

// Input roles map to one or more earlier stage ids.
struct StageSpec {
  std::string id;
  std::string kind;
  std::map<std::string, std::vector<std::string>> inputs;
  nlohmann::json params = nlohmann::json::object();
};

struct PipelineConfig {
  std::string name = "experiment";
  uint64_t seed = 0;
  std::vector<StageSpec> stages;

  // Checks stage kinds, unique ids, parameter names, input roles and their
  // artifact types, and that every input comes from an earlier stage.
  // Throws ConfigError.
  void validate() const;

  static PipelineConfig parse(const std::string& json_text);
  static PipelineConfig load(const std::filesystem::path& path);
};

std::vector<std::string> stage_kinds();
ArtifactType stage_output(const std::string& kind);

struct StageRun {
  std::string id;
  std::string kind;
  std::string key;
  std::filesystem::path dir;
  bool cache_hit = false;
  double seconds = 0.0;
};

struct ReportRow {
  std::string stage;
  std::string label;
  double bleu = 0.0;
  std::vector<std::string> members;
};

struct PipelineReport {
  std::string name;
  uint64_t seed = 0;
  std::vector<ReportRow> rows;
  // Not part of the written report: cache status and timings vary by run.
  std::vector<StageRun> stages;
  std::map<std::string, std::string> artifact_hashes;

  // Fixed-width table with one row per evaluate stage.
  std::string table() const;
  // One record per stage artifact, then one per table row.
  std::string jsonl() const;
  const ReportRow& row(const std::string& stage) const;
};

struct RunOptions {
  // report.txt and report.jsonl land here.
  std::filesystem::path out_dir;
  // Empty: $NMTFORGE_CACHE if set, else <out_dir>/cache.
  std::filesystem::path cache_dir;
  std::optional<uint64_t> seed;
  std::function<void(const StageRun&)> on_stage;
};

std::filesystem::path resolve_cache_dir(const RunOptions& options);

// Runs the stages in order. A stage whose key (hash of kind, parameters,
// seed and input artifact contents) already has a published directory in
// the cache is skipped. Outputs are built in a scratch directory and renamed
// into place. A failing stage throws StageError naming the stage.
PipelineReport run_experiment(const PipelineConfig& config, const RunOptions& options);

// Lower-case hex SHA-256.
std::string sha256_hex(const std::string& data);

}  // namespace nmtforge
