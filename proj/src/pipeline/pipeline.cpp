// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/pipeline/pipeline.h"

#include <unistd.h>

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "nmtforge/corpus/toy.h"
#include "nmtforge/errors.h"
#include "nmtforge/metrics/bleu.h"
#include "nmtforge/numerics/rng.h"
#include "nmtforge/version.h"

namespace nmtforge {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

// --- synthetic data ------------------------------------------------------------

namespace {

void require_trained(const Model& m) {
  if (m.trained_steps <= 0) throw ModelStateError("model '" + m.spec().name + "' has not been trained");
}

std::vector<Tokens> translate_one(const Model& m, const std::vector<Tokens>& lines, const DecodeConfig& decode) {
  const Model* p = &m;
  return translate_tokens(std::span<const Model* const>(&p, 1), lines, decode);
}

}  // namespace

ParallelCorpus back_translate(const std::vector<Tokens>& mono_target, std::span<const Model* const> reverse_models,
                              const DecodeConfig& decode, const FilterRules& rules, FilterStats* stats) {
  if (reverse_models.empty()) throw ModelStateError("back-translation needs at least one reverse model");
  for (const Model* m : reverse_models) require_trained(*m);
  const Augmentation aug = decode.mode == DecodeMode::sample ? Augmentation::sample : Augmentation::clean;
  std::vector<ParallelCorpus> parts;
  for (size_t i = 0; i < reverse_models.size(); ++i) {
    DecodeConfig dc = decode;
    dc.seed = derive_seed(decode.seed, i);
    const auto generated = translate_one(*reverse_models[i], mono_target, dc);
    parts.push_back(make_corpus(generated, mono_target, Provenance::back_translated, aug));
  }
  return filter_corpus(concat_corpora(parts), rules, stats);
}

ParallelCorpus knowledge_distill(const std::vector<Tokens>& sources, std::span<const Model* const> teachers,
                                 const DecodeConfig& decode) {
  if (teachers.empty()) throw ModelStateError("distillation needs at least one teacher");
  for (const Model* m : teachers) require_trained(*m);
  std::vector<ParallelCorpus> parts;
  for (size_t i = 0; i < teachers.size(); ++i) {
    DecodeConfig dc = decode;
    dc.seed = derive_seed(decode.seed, i);
    parts.push_back(make_corpus(sources, translate_one(*teachers[i], sources, dc), Provenance::distilled));
  }
  return concat_corpora(parts);
}

std::vector<std::string> architectures_of(std::span<const Model* const> pool) {
  std::vector<std::string> out;
  for (const Model* m : pool) {
    if (std::find(out.begin(), out.end(), m->spec().name) == out.end()) out.push_back(m->spec().name);
  }
  return out;
}

ParallelCorpus in_domain_transfer_iteration(std::span<const Model* const> pool, const std::vector<Tokens>& mono_source,
                                            int k_ensemble, const DecodeConfig& decode) {
  if (k_ensemble < 1) throw ConfigError("k_ensemble must be >= 1");
  std::vector<const Model*> members;
  std::set<std::string> seen;
  for (const Model* m : pool) {
    if (static_cast<int>(members.size()) == k_ensemble) break;
    if (seen.insert(m->spec().name).second) members.push_back(m);
  }
  if (static_cast<int>(members.size()) < k_ensemble) {
    throw PoolError("transfer needs " + std::to_string(k_ensemble) + " distinct architectures, pool has " +
                    std::to_string(members.size()));
  }
  for (const Model* m : members) require_trained(*m);
  const auto out = translate_tokens(members, mono_source, decode);
  return make_corpus(mono_source, out, Provenance::in_domain);
}

void TransferConfig::validate() const {
  if (k_ensemble < 1) throw ConfigError("k_ensemble must be >= 1");
  if (iterations < 1) throw ConfigError("transfer iterations must be >= 1");
  decode.validate();
}

std::vector<ParallelCorpus> in_domain_transfer(std::vector<Model> pool, const std::vector<Tokens>& mono_source,
                                               const TransferConfig& config, const RetrainFn& retrain,
                                               std::vector<Model>* final_pool) {
  config.validate();
  std::vector<ParallelCorpus> pseudo;
  for (int it = 1; it <= config.iterations; ++it) {
    std::vector<const Model*> ptrs;
    for (const auto& m : pool) ptrs.push_back(&m);
    pseudo.push_back(in_domain_transfer_iteration(ptrs, mono_source, config.k_ensemble, config.decode));
    pool = retrain(pseudo.back(), it);
  }
  if (final_pool) *final_pool = std::move(pool);
  return pseudo;
}

// --- pool and selection ---------------------------------------------------------

ojson to_json(const PoolEntry& e) {
  ojson j;
  j["id"] = e.id;
  j["checkpoint"] = e.checkpoint;
  j["architecture"] = e.architecture;
  j["direction"] = to_string(e.direction);
  j["shard"] = e.shard;
  j["augmentation"] = to_string(e.augmentation);
  j["finetune"] = e.finetune ? to_string(*e.finetune) : "none";
  j["dev_bleu"] = e.has_dev_bleu ? json(e.dev_bleu) : json(nullptr);
  j["self_bleu"] = e.has_self_bleu ? json(e.self_bleu) : json(nullptr);
  return j;
}

PoolEntry pool_entry_from_json(const json& j) {
  PoolEntry e;
  e.id = j.at("id").get<int>();
  e.checkpoint = j.at("checkpoint").get<std::string>();
  e.architecture = j.at("architecture").get<std::string>();
  e.direction = j.at("direction").get<std::string>() == "r2l" ? Direction::r2l : Direction::l2r;
  e.shard = j.at("shard").get<int>();
  e.augmentation = parse_augmentation(j.at("augmentation").get<std::string>());
  const auto ft = j.at("finetune").get<std::string>();
  if (ft != "none") e.finetune = parse_finetune_method(ft);
  if (!j.at("dev_bleu").is_null()) {
    e.dev_bleu = j.at("dev_bleu").get<double>();
    e.has_dev_bleu = true;
  }
  if (!j.at("self_bleu").is_null()) {
    e.self_bleu = j.at("self_bleu").get<double>();
    e.has_self_bleu = true;
  }
  return e;
}

namespace {

// Pool indices sorted by dev BLEU desc, then id.
std::vector<size_t> normal_order(const std::vector<PoolEntry>& pool) {
  for (const auto& e : pool) {
    if (!e.has_dev_bleu) throw PoolError("pool entry " + std::to_string(e.id) + " has no dev BLEU");
  }
  std::vector<size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (pool[a].dev_bleu != pool[b].dev_bleu) return pool[a].dev_bleu > pool[b].dev_bleu;
    return pool[a].id < pool[b].id;
  });
  return order;
}

void check_k(const std::vector<PoolEntry>& pool, size_t k) {
  if (k == 0) throw PoolError("ensemble size must be >= 1");
  if (k > pool.size()) {
    throw PoolError("cannot select " + std::to_string(k) + " models from a pool of " + std::to_string(pool.size()));
  }
}

}  // namespace

std::vector<int> ensemble_select_normal(const std::vector<PoolEntry>& pool, size_t k) {
  check_k(pool, k);
  const auto order = normal_order(pool);
  std::vector<int> ids;
  for (size_t i = 0; i < k; ++i) ids.push_back(pool[order[i]].id);
  return ids;
}

SelfBleuSelection ensemble_select_self_bleu(const std::vector<PoolEntry>& pool,
                                            const std::vector<std::vector<Tokens>>& translations, size_t k,
                                            double floor) {
  check_k(pool, k);
  if (!(floor >= 0.0)) throw ConfigError("self-BLEU floor must be >= 0");
  if (translations.size() != pool.size()) throw PoolError("missing dev translations for some pool entries");
  for (const auto& t : translations) {
    if (t.empty() || t.size() != translations.front().size()) {
      throw PoolError("every pool entry needs dev translations of the same set");
    }
  }
  const auto order = normal_order(pool);
  SelfBleuSelection sel;
  sel.self_bleu = pool.size() > 1 ? self_bleu(translations) : std::vector<double>(1, 0.0);
  const double best = pool[order.front()].dev_bleu;
  sel.passed_floor.resize(pool.size());
  std::vector<size_t> ranked;
  for (size_t i = 0; i < pool.size(); ++i) {
    sel.passed_floor[i] = pool[i].dev_bleu >= best - floor;
    if (sel.passed_floor[i]) ranked.push_back(i);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [&](size_t a, size_t b) {
    if (sel.self_bleu[a] != sel.self_bleu[b]) return sel.self_bleu[a] < sel.self_bleu[b];
    if (pool[a].dev_bleu != pool[b].dev_bleu) return pool[a].dev_bleu > pool[b].dev_bleu;
    return pool[a].id < pool[b].id;
  });
  for (size_t i : order) {
    if (!sel.passed_floor[i]) ranked.push_back(i);
  }
  for (size_t i = 0; i < k; ++i) sel.ids.push_back(pool[ranked[i]].id);
  return sel;
}

// --- stage registry -------------------------------------------------------------

std::string to_string(ArtifactType t) {
  switch (t) {
    case ArtifactType::corpus: return "corpus";
    case ArtifactType::lines: return "lines";
    case ArtifactType::vocab: return "vocab";
    case ArtifactType::pool: return "pool";
    case ArtifactType::row: return "row";
  }
  return "?";
}

namespace {

struct Role {
  ArtifactType type;
  size_t min;
  size_t max;
};

struct KindInfo {
  ArtifactType output;
  std::map<std::string, Role> roles;
  json defaults;
};

constexpr size_t kMany = 1000;

json decode_defaults(const std::string& mode) {
  return {{"decode_mode", mode}, {"beam_size", 4}, {"length_alpha", 0.6}, {"temperature", 1.0}};
}

json filter_defaults() {
  return {{"filter_max_len", 100}, {"filter_max_word_chars", 40}, {"filter_max_ratio", 4.0}, {"filter_dedup", true}};
}

json train_defaults() {
  return {{"steps", 400},        {"batch_tokens", 256}, {"warmup", 100},
          {"peak_lr", 3e-3},     {"label_smoothing", 0.1}, {"dev_decode_mode", "greedy"}};
}

json merged(json a, const json& b) {
  a.update(b);
  return a;
}

const std::map<std::string, KindInfo>& registry() {
  using enum ArtifactType;
  static const std::map<std::string, KindInfo> table = {
      {"toy",
       {corpus,
        {},
        {{"task", "lexicon_swap"},
         {"vocab_size", 50},
         {"min_len", 1},
         {"max_len", 12},
         {"pairs", 1000},
         {"domain_shift", 0.0},
         {"zipf_exponent", 1.0},
         {"language_seed", 1},
         {"seed", 0}}}},
      {"load_corpus", {corpus, {}, {{"path", ""}}}},
      {"load_lines", {lines, {}, {{"path", ""}}}},
      {"monolingual", {lines, {{"data", {corpus, 1, kMany}}}, {{"side", "target"}}}},
      {"filter",
       {corpus,
        {{"data", {corpus, 1, kMany}}},
        {{"max_len", 100}, {"max_word_chars", 40}, {"max_ratio", 4.0}, {"dedup", true}}}},
      {"concat", {corpus, {{"data", {corpus, 1, kMany}}}, json::object()}},
      {"noisy",
       {corpus,
        {{"data", {corpus, 1, 1}}},
        {{"p_replace", 0.1}, {"p_delete", 0.1}, {"p_permute", 0.1}, {"permute_window", 3}, {"seed", 0}}}},
      {"shard", {corpus, {{"data", {corpus, 1, 1}}}, {{"n", 2}, {"index", 0}, {"seed", 0}}}},
      {"vocab",
       {vocab,
        {{"data", {corpus, 1, kMany}}, {"mono_source", {lines, 0, kMany}}, {"mono_target", {lines, 0, kMany}}},
        {{"max_size", 0}}}},
      {"train",
       {pool,
        {{"data", {corpus, 1, kMany}}, {"vocab", {vocab, 0, 1}}, {"init", {pool, 0, 1}}, {"dev", {corpus, 0, 1}}},
        merged(train_defaults(), {{"architectures", {"micro-deeper"}},
                                  {"directions", {"l2r"}},
                                  {"reverse", false},
                                  {"shard", 0},
                                  {"seed", 0}})}},
      {"finetune",
       {pool,
        {{"models", {pool, 1, 1}}, {"data", {corpus, 1, kMany}}, {"dev", {corpus, 0, 1}}},
        merged(train_defaults(), {{"method", "normal"},
                                  {"steps", 200},
                                  {"pss_mix", 0.5},
                                  {"denoise_pair_fraction", 0.3},
                                  {"denoise_token_prob", 0.15},
                                  {"mrt_alpha", 0.005},
                                  {"mrt_candidates", 4},
                                  {"mrt_candidate_gen", "beam"},
                                  {"mrt_include_gold", true},
                                  {"mrt_average", false},
                                  {"mrt_sources_per_step", 16},
                                  {"seed", 0}})}},
      {"bt",
       {corpus,
        {{"models", {pool, 1, 1}}, {"mono", {lines, 1, kMany}}},
        merged(merged(decode_defaults("beam"), filter_defaults()), {{"seed", 0}})}},
      {"kd",
       {corpus,
        {{"models", {pool, 1, 1}}, {"data", {corpus, 1, kMany}}},
        merged(merged(decode_defaults("beam"), filter_defaults()), {{"seed", 0}})}},
      {"transfer",
       {corpus,
        {{"models", {pool, 1, 1}}, {"mono", {lines, 1, kMany}}},
        merged(merged(decode_defaults("beam"), filter_defaults()), {{"k_ensemble", 4}, {"seed", 0}})}},
      {"subset", {pool, {{"models", {pool, 1, kMany}}}, {{"members", json::array()}, {"architectures", json::array()}}}},
      {"select",
       {pool,
        {{"models", {pool, 1, kMany}}, {"dev", {corpus, 1, 1}}},
        merged(decode_defaults("greedy"), {{"policy", "normal"}, {"k", 4}, {"floor", 1.0}})}},
      {"evaluate",
       {row,
        {{"models", {pool, 1, 1}}, {"test", {corpus, 1, 1}}},
        merged(decode_defaults("beam"), {{"label", ""}, {"members", json::array()}, {"combine", "arithmetic"}})}},
  };
  return table;
}

const KindInfo& kind_info(const std::string& kind) {
  auto it = registry().find(kind);
  if (it == registry().end()) throw ConfigError("unknown stage kind '" + kind + "'");
  return it->second;
}

json effective_params(const StageSpec& s) {
  const KindInfo& info = kind_info(s.kind);
  if (!s.params.is_object()) throw ConfigError("stage '" + s.id + "': params must be an object");
  for (const auto& [k, v] : s.params.items()) {
    if (!info.defaults.contains(k)) throw ConfigError("stage '" + s.id + "': unknown parameter '" + k + "'");
    const json& d = info.defaults.at(k);
    const bool ok = (d.is_number() && v.is_number()) || (d.is_boolean() && v.is_boolean()) ||
                    (d.is_string() && v.is_string()) || (d.is_array() && v.is_array());
    if (!ok) throw ConfigError("stage '" + s.id + "': parameter '" + k + "' has the wrong type");
  }
  return merged(info.defaults, s.params);
}

}  // namespace

std::vector<std::string> stage_kinds() {
  std::vector<std::string> out;
  for (const auto& [k, v] : registry()) out.push_back(k);
  return out;
}

ArtifactType stage_output(const std::string& kind) { return kind_info(kind).output; }

void PipelineConfig::validate() const {
  if (stages.empty()) throw ConfigError("pipeline has no stages");
  std::map<std::string, ArtifactType> produced;
  for (const auto& s : stages) {
    if (s.id.empty()) throw ConfigError("stage without id");
    for (char c : s.id) {
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
        throw ConfigError("stage id '" + s.id + "' may only contain letters, digits, '_' and '-'");
      }
    }
    if (produced.count(s.id)) throw ConfigError("duplicate stage id '" + s.id + "'");
    const KindInfo& info = kind_info(s.kind);
    effective_params(s);
    for (const auto& [role, ids] : s.inputs) {
      if (!info.roles.count(role)) throw ConfigError("stage '" + s.id + "': unknown input role '" + role + "'");
      for (const auto& in : ids) {
        auto it = produced.find(in);
        if (it == produced.end()) {
          throw ConfigError("stage '" + s.id + "': input '" + in + "' is not produced by an earlier stage");
        }
        if (it->second != info.roles.at(role).type) {
          throw ConfigError("stage '" + s.id + "': input '" + in + "' is a " + to_string(it->second) + ", role '" +
                            role + "' needs a " + to_string(info.roles.at(role).type));
        }
      }
    }
    for (const auto& [role, r] : info.roles) {
      const size_t n = s.inputs.count(role) ? s.inputs.at(role).size() : 0;
      if (n < r.min || n > r.max) {
        throw ConfigError("stage '" + s.id + "': role '" + role + "' takes " + std::to_string(r.min) + ".." +
                          (r.max == kMany ? std::string("n") : std::to_string(r.max)) + " inputs, got " +
                          std::to_string(n));
      }
    }
    if (s.kind == "train") {
      const size_t nv = s.inputs.count("vocab") ? s.inputs.at("vocab").size() : 0;
      const size_t ni = s.inputs.count("init") ? s.inputs.at("init").size() : 0;
      if (nv + ni != 1) throw ConfigError("stage '" + s.id + "': train needs exactly one of 'vocab' or 'init'");
    }
    produced[s.id] = info.output;
  }
}

PipelineConfig PipelineConfig::parse(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pipeline config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  PipelineConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k != "name" && k != "seed" && k != "stages" && k != "description") {
      throw ConfigError("unknown pipeline config key '" + k + "'");
    }
  }
  try {
    if (j.contains("name")) c.name = j.at("name").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    for (const auto& st : j.at("stages")) {
      StageSpec s;
      for (const auto& [k, v] : st.items()) {
        if (k != "id" && k != "kind" && k != "inputs" && k != "params") {
          throw ConfigError("unknown stage key '" + k + "'");
        }
      }
      s.id = st.at("id").get<std::string>();
      s.kind = st.at("kind").get<std::string>();
      if (st.contains("inputs")) {
        for (const auto& [role, v] : st.at("inputs").items()) {
          if (v.is_string()) {
            s.inputs[role] = {v.get<std::string>()};
          } else {
            s.inputs[role] = v.get<std::vector<std::string>>();
          }
        }
      }
      if (st.contains("params")) s.params = st.at("params");
      c.stages.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open pipeline config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// --- report ---------------------------------------------------------------------

const ReportRow& PipelineReport::row(const std::string& stage) const {
  for (const auto& r : rows) {
    if (r.stage == stage) return r;
  }
  throw ConfigError("report has no row for stage '" + stage + "'");
}

std::string PipelineReport::table() const {
  size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::ostringstream out;
  out << name << " (seed " << seed << ")\n";
  out << std::left << std::setw(static_cast<int>(width)) << "System" << "  " << std::right << std::setw(7) << "BLEU"
      << "  " << std::setw(7) << "Delta" << "\n";
  out << std::string(width + 18, '-') << "\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    out << std::left << std::setw(static_cast<int>(width)) << rows[i].label << "  " << std::right << std::fixed
        << std::setprecision(2) << std::setw(7) << rows[i].bleu << "  ";
    if (i == 0) {
      out << std::setw(7) << "-";
    } else {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%+.2f", rows[i].bleu - rows[i - 1].bleu);
      out << std::setw(7) << buf;
    }
    out << "\n";
  }
  return out.str();
}

std::string PipelineReport::jsonl() const {
  std::ostringstream out;
  for (const auto& [id, hash] : artifact_hashes) {
    ojson j;
    j["type"] = "artifact";
    j["stage"] = id;
    j["sha256"] = hash;
    out << j.dump() << "\n";
  }
  for (const auto& r : rows) {
    ojson j;
    j["type"] = "row";
    j["stage"] = r.stage;
    j["label"] = r.label;
    j["bleu"] = r.bleu;
    j["members"] = r.members;
    out << j.dump() << "\n";
  }
  return out.str();
}

fs::path resolve_cache_dir(const RunOptions& options) {
  if (const char* env = std::getenv("NMTFORGE_CACHE"); env && *env) return fs::path(env);
  if (!options.cache_dir.empty()) return options.cache_dir;
  return options.out_dir / "cache";
}

// --- runner ---------------------------------------------------------------------

namespace {

struct Artifact {
  ArtifactType type;
  fs::path dir;
  std::string content;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
  if (!out) throw FormatError("cannot write " + p.string());
}

const char* kMeta = "meta.json";

// Hash of every file in the directory except the metadata, in name order.
std::string content_hash(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != kMeta) names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  std::string all;
  for (const auto& n : names) {
    const std::string body = read_file(dir / n);
    all += n + '\0' + std::to_string(body.size()) + '\0' + body;
  }
  return sha256_hex(all);
}

// Config-relative paths resolve against the working directory.
std::string file_hash(const std::string& path) { return sha256_hex(read_file(path)); }

struct Ctx {
  const StageSpec& stage;
  json p;
  uint64_t seed;
  std::map<std::string, std::vector<const Artifact*>> in;
  fs::path out;

  const std::vector<const Artifact*>& role(const std::string& r) const {
    static const std::vector<const Artifact*> none;
    auto it = in.find(r);
    return it == in.end() ? none : it->second;
  }
  template <typename T>
  T get(const std::string& key) const {
    return p.at(key).get<T>();
  }
};

ParallelCorpus load_corpus_artifact(const Artifact& a) { return read_corpus(a.dir / "corpus.tsv"); }

ParallelCorpus gather_corpus(const Ctx& c, const std::string& role) {
  std::vector<ParallelCorpus> parts;
  for (const Artifact* a : c.role(role)) parts.push_back(load_corpus_artifact(*a));
  return concat_corpora(parts);
}

std::vector<Tokens> gather_lines(const Ctx& c, const std::string& role) {
  std::vector<Tokens> out;
  for (const Artifact* a : c.role(role)) {
    auto l = read_token_lines(a->dir / "lines.txt");
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

struct LoadedPool {
  std::vector<PoolEntry> entries;
  std::vector<Model> models;

  std::vector<const Model*> ptrs() const {
    std::vector<const Model*> out;
    for (const auto& m : models) out.push_back(&m);
    return out;
  }
};

LoadedPool load_pool(const Artifact& a) {
  LoadedPool pool;
  std::istringstream in(read_file(a.dir / "pool.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    pool.entries.push_back(pool_entry_from_json(json::parse(line)));
    pool.models.push_back(load_model(a.dir / pool.entries.back().checkpoint));
  }
  return pool;
}

// Concatenates pools, renumbering ids in order.
LoadedPool gather_pools(const Ctx& c, const std::string& role) {
  LoadedPool all;
  for (const Artifact* a : c.role(role)) {
    LoadedPool p = load_pool(*a);
    for (size_t i = 0; i < p.entries.size(); ++i) {
      all.entries.push_back(p.entries[i]);
      all.models.push_back(std::move(p.models[i]));
    }
  }
  for (size_t i = 0; i < all.entries.size(); ++i) all.entries[i].id = static_cast<int>(i);
  return all;
}

void write_pool(const fs::path& dir, std::vector<PoolEntry> entries, const std::vector<const Model*>& models) {
  std::string lines;
  for (size_t i = 0; i < entries.size(); ++i) {
    entries[i].checkpoint = "model-" + std::to_string(i) + ".nmtf";
    save_model(dir / entries[i].checkpoint, *models[i]);
    lines += to_json(entries[i]).dump() + "\n";
  }
  write_file(dir / "pool.jsonl", lines);
}

DecodeConfig decode_config(const Ctx& c, const std::string& mode_key = "decode_mode") {
  DecodeConfig d;
  d.mode = parse_decode_mode(c.get<std::string>(mode_key));
  d.beam_size = c.get<int>("beam_size");
  d.alpha = c.get<double>("length_alpha");
  d.temperature = c.get<double>("temperature");
  d.seed = c.seed;
  d.validate();
  return d;
}

FilterRules filter_rules(const Ctx& c, const std::string& prefix) {
  FilterRules r;
  r.max_len = c.get<int>(prefix + "max_len");
  r.max_word_chars = c.get<int>(prefix + "max_word_chars");
  r.max_ratio = c.get<double>(prefix + "max_ratio");
  r.dedup = c.get<bool>(prefix + "dedup");
  r.validate();
  return r;
}

ParallelCorpus swap_sides(const ParallelCorpus& corpus) {
  ParallelCorpus out = corpus;
  for (auto& p : out) std::swap(p.source, p.target);
  return out;
}

Augmentation dominant_augmentation(const ParallelCorpus& corpus) {
  bool sample = false;
  for (const auto& p : corpus) {
    if (p.augmentation == Augmentation::noisy) return Augmentation::noisy;
    sample = sample || p.augmentation == Augmentation::sample;
  }
  return sample ? Augmentation::sample : Augmentation::clean;
}

TrainConfig train_config(const Ctx& c, const ModelSpec& spec, uint64_t seed) {
  TrainConfig tc;
  tc.batch_tokens = c.get<int>("batch_tokens");
  tc.max_steps = c.get<int>("steps");
  tc.optimizer = toy_optimizer(spec, c.get<int64_t>("warmup"), c.get<double>("peak_lr"));
  tc.label_smoothing = c.get<double>("label_smoothing");
  tc.seed = seed;
  tc.validate();
  return tc;
}

void record_dev(const Ctx& c, PoolEntry& e, const Model& m, bool reverse) {
  if (c.role("dev").empty()) return;
  ParallelCorpus dev = load_corpus_artifact(*c.role("dev").front());
  if (reverse) dev = swap_sides(dev);
  DecodeConfig dc;
  dc.mode = parse_decode_mode(c.get<std::string>("dev_decode_mode"));
  e.dev_bleu = evaluate_bleu(m, dev, dc);
  e.has_dev_bleu = true;
}

std::string lineage_line(const Ctx& c) { return "stage " + c.stage.id + " (" + c.stage.kind + ")\n"; }

void run_toy(const Ctx& c) {
  ToyTaskSpec t;
  t.task = parse_toy_task(c.get<std::string>("task"));
  t.vocab_size = c.get<int>("vocab_size");
  t.min_len = c.get<int>("min_len");
  t.max_len = c.get<int>("max_len");
  t.pairs = c.get<int>("pairs");
  t.domain_shift = c.get<double>("domain_shift");
  t.zipf_exponent = c.get<double>("zipf_exponent");
  t.language_seed = c.get<uint64_t>("language_seed");
  t.seed = c.seed;
  write_corpus(c.out / "corpus.tsv", gen_toy(t), c.stage.id);
}

void run_load_corpus(const Ctx& c) {
  ParallelCorpus corpus = read_corpus(c.get<std::string>("path"));
  write_corpus(c.out / "corpus.tsv", corpus, c.stage.id);
}

void run_load_lines(const Ctx& c) { write_token_lines(c.out / "lines.txt", read_token_lines(c.get<std::string>("path"))); }

void run_monolingual(const Ctx& c) {
  const std::string side = c.get<std::string>("side");
  if (side != "source" && side != "target") throw ConfigError("side must be 'source' or 'target'");
  const ParallelCorpus corpus = gather_corpus(c, "data");
  write_token_lines(c.out / "lines.txt", side == "source" ? sources_of(corpus) : targets_of(corpus));
}

void run_filter(const Ctx& c) {
  FilterStats stats;
  const auto kept = filter_corpus(gather_corpus(c, "data"), filter_rules(c, ""), &stats);
  write_corpus(c.out / "corpus.tsv", kept, c.stage.id);
  ojson j;
  j["input"] = stats.input;
  j["kept"] = stats.kept;
  j["empty"] = stats.empty;
  j["length_exceeded"] = stats.length_exceeded;
  j["word_too_long"] = stats.word_too_long;
  j["ratio_exceeded"] = stats.ratio_exceeded;
  j["duplicates"] = stats.duplicates;
  write_file(c.out / "stats.json", j.dump() + "\n");
}

void run_concat(const Ctx& c) { write_corpus(c.out / "corpus.tsv", gather_corpus(c, "data"), c.stage.id); }

void run_noisy(const Ctx& c) {
  NoiseConfig n;
  n.p_replace = c.get<double>("p_replace");
  n.p_delete = c.get<double>("p_delete");
  n.p_permute = c.get<double>("p_permute");
  n.permute_window = c.get<int>("permute_window");
  n.seed = c.seed;
  write_corpus(c.out / "corpus.tsv", make_noisy(gather_corpus(c, "data"), n), c.stage.id);
}

void run_shard(const Ctx& c) {
  const int n = c.get<int>("n");
  const int index = c.get<int>("index");
  if (index < 0 || index >= n) throw ConfigError("shard index out of range");
  const auto shards = shard(gather_corpus(c, "data"), n, c.seed);
  write_corpus(c.out / "corpus.tsv", shards[static_cast<size_t>(index)], c.stage.id);
}

void run_vocab(const Ctx& c) {
  const ParallelCorpus corpus = gather_corpus(c, "data");
  std::vector<Tokens> src = sources_of(corpus), tgt = targets_of(corpus);
  for (auto& l : gather_lines(c, "mono_source")) src.push_back(std::move(l));
  for (auto& l : gather_lines(c, "mono_target")) tgt.push_back(std::move(l));
  const auto max_size = c.get<size_t>("max_size");
  Vocabulary::build(src, max_size).save(c.out / "src.vocab");
  Vocabulary::build(tgt, max_size).save(c.out / "tgt.vocab");
}

void run_train(const Ctx& c) {
  const bool reverse = c.get<bool>("reverse");
  ParallelCorpus data = gather_corpus(c, "data");
  if (reverse) data = swap_sides(data);
  std::vector<PoolEntry> entries;
  std::vector<Model> models;
  if (!c.role("init").empty()) {
    LoadedPool init = load_pool(*c.role("init").front());
    entries = init.entries;
    models = std::move(init.models);
    for (auto& e : entries) {
      e.finetune.reset();
      e.has_dev_bleu = e.has_self_bleu = false;
    }
  } else {
    const fs::path vdir = c.role("vocab").front()->dir;
    Vocabulary sv = Vocabulary::load(vdir / "src.vocab"), tv = Vocabulary::load(vdir / "tgt.vocab");
    if (reverse) std::swap(sv, tv);
    for (const auto& arch : c.get<std::vector<std::string>>("architectures")) {
      for (const auto& dir : c.get<std::vector<std::string>>("directions")) {
        if (dir != "l2r" && dir != "r2l") throw ConfigError("direction must be 'l2r' or 'r2l'");
        ModelSpec spec = preset(arch);
        spec.direction = dir == "r2l" ? Direction::r2l : Direction::l2r;
        PoolEntry e;
        e.id = static_cast<int>(entries.size());
        e.architecture = arch;
        e.direction = spec.direction;
        e.shard = c.get<int>("shard");
        models.push_back(Model::build(spec, sv, tv, derive_seed(c.seed, entries.size())));
        entries.push_back(e);
      }
    }
  }
  if (entries.empty()) throw ConfigError("train stage produces no models");
  std::vector<const Model*> ptrs;
  for (size_t i = 0; i < models.size(); ++i) {
    train(models[i], data, train_config(c, models[i].spec(), derive_seed(c.seed, 100 + i)));
    models[i].lineage += lineage_line(c);
    entries[i].augmentation = dominant_augmentation(data);
    record_dev(c, entries[i], models[i], reverse);
    ptrs.push_back(&models[i]);
  }
  write_pool(c.out, entries, ptrs);
}

void run_finetune(const Ctx& c) {
  LoadedPool pool = load_pool(*c.role("models").front());
  const ParallelCorpus data = gather_corpus(c, "data");
  FinetuneConfig ft;
  ft.method = parse_finetune_method(c.get<std::string>("method"));
  ft.steps = c.get<int>("steps");
  ft.pss_mix = c.get<double>("pss_mix");
  ft.denoise.pair_fraction = c.get<double>("denoise_pair_fraction");
  ft.denoise.token_prob = c.get<double>("denoise_token_prob");
  ft.mrt.alpha = c.get<double>("mrt_alpha");
  ft.mrt.num_candidates = c.get<int>("mrt_candidates");
  ft.mrt.candidate_gen = parse_decode_mode(c.get<std::string>("mrt_candidate_gen"));
  ft.mrt.include_gold = c.get<bool>("mrt_include_gold");
  ft.mrt.average = c.get<bool>("mrt_average");
  ft.mrt.sources_per_step = c.get<int>("mrt_sources_per_step");
  std::vector<const Model*> ptrs;
  for (size_t i = 0; i < pool.models.size(); ++i) {
    const bool reverse = false;
    finetune(pool.models[i], data, train_config(c, pool.models[i].spec(), derive_seed(c.seed, i)), ft);
    pool.models[i].lineage += lineage_line(c);
    pool.entries[i].finetune = ft.method;
    pool.entries[i].has_self_bleu = false;
    pool.entries[i].has_dev_bleu = false;
    record_dev(c, pool.entries[i], pool.models[i], reverse);
    ptrs.push_back(&pool.models[i]);
  }
  write_pool(c.out, pool.entries, ptrs);
}

void write_synthetic(const Ctx& c, const ParallelCorpus& corpus, const FilterStats& stats) {
  write_corpus(c.out / "corpus.tsv", corpus, c.stage.id);
  ojson j;
  j["input"] = stats.input;
  j["kept"] = stats.kept;
  write_file(c.out / "stats.json", j.dump() + "\n");
}

void run_bt(const Ctx& c) {
  const LoadedPool pool = load_pool(*c.role("models").front());
  FilterStats stats;
  const auto out = back_translate(gather_lines(c, "mono"), pool.ptrs(), decode_config(c), filter_rules(c, "filter_"), &stats);
  write_synthetic(c, out, stats);
}

void run_kd(const Ctx& c) {
  const LoadedPool pool = load_pool(*c.role("models").front());
  FilterStats stats;
  const auto raw = knowledge_distill(sources_of(gather_corpus(c, "data")), pool.ptrs(), decode_config(c));
  write_synthetic(c, filter_corpus(raw, filter_rules(c, "filter_"), &stats), stats);
}

void run_transfer(const Ctx& c) {
  const LoadedPool pool = load_pool(*c.role("models").front());
  FilterStats stats;
  const auto raw = in_domain_transfer_iteration(pool.ptrs(), gather_lines(c, "mono"), c.get<int>("k_ensemble"),
                                                decode_config(c));
  write_synthetic(c, filter_corpus(raw, filter_rules(c, "filter_"), &stats), stats);
}

void run_subset(const Ctx& c) {
  LoadedPool pool = gather_pools(c, "models");
  const auto members = c.get<std::vector<int>>("members");
  const auto archs = c.get<std::vector<std::string>>("architectures");
  std::vector<size_t> keep;
  if (!members.empty()) {
    for (int m : members) {
      if (m < 0 || static_cast<size_t>(m) >= pool.entries.size()) throw PoolError("subset member out of range");
      keep.push_back(static_cast<size_t>(m));
    }
  } else {
    for (size_t i = 0; i < pool.entries.size(); ++i) {
      if (archs.empty() || std::find(archs.begin(), archs.end(), pool.entries[i].architecture) != archs.end()) {
        keep.push_back(i);
      }
    }
  }
  if (keep.empty()) throw PoolError("subset selects no models");
  std::vector<PoolEntry> entries;
  std::vector<const Model*> ptrs;
  for (size_t i : keep) {
    entries.push_back(pool.entries[i]);
    entries.back().id = static_cast<int>(entries.size() - 1);
    ptrs.push_back(&pool.models[i]);
  }
  write_pool(c.out, entries, ptrs);
}

std::string member_tag(const PoolEntry& e) {
  return e.architecture + "/" + to_string(e.direction) + "/" + (e.finetune ? to_string(*e.finetune) : "none") +
         "#" + std::to_string(e.id);
}

void run_select(const Ctx& c) {
  LoadedPool pool = gather_pools(c, "models");
  const ParallelCorpus dev = load_corpus_artifact(*c.role("dev").front());
  const DecodeConfig dc = decode_config(c);
  std::vector<std::vector<Tokens>> translations;
  const auto refs = targets_of(dev);
  for (size_t i = 0; i < pool.models.size(); ++i) {
    translations.push_back(translate_one(pool.models[i], sources_of(dev), dc));
    pool.entries[i].dev_bleu = corpus_bleu(translations.back(), refs).score;
    pool.entries[i].has_dev_bleu = true;
  }
  const std::string policy = c.get<std::string>("policy");
  const auto k = c.get<size_t>("k");
  std::vector<int> ids;
  if (policy == "normal") {
    ids = ensemble_select_normal(pool.entries, k);
  } else if (policy == "self_bleu") {
    const auto sel = ensemble_select_self_bleu(pool.entries, translations, k, c.get<double>("floor"));
    ids = sel.ids;
    for (size_t i = 0; i < pool.entries.size(); ++i) {
      pool.entries[i].self_bleu = sel.self_bleu[i];
      pool.entries[i].has_self_bleu = true;
    }
  } else {
    throw ConfigError("select policy must be 'normal' or 'self_bleu'");
  }
  std::string scores;
  for (const auto& e : pool.entries) scores += to_json(e).dump() + "\n";
  write_file(c.out / "scores.jsonl", scores);
  std::vector<PoolEntry> entries;
  std::vector<const Model*> ptrs;
  for (int id : ids) {
    entries.push_back(pool.entries[static_cast<size_t>(id)]);
    ptrs.push_back(&pool.models[static_cast<size_t>(id)]);
  }
  write_pool(c.out, entries, ptrs);
}

void run_evaluate(const Ctx& c) {
  const LoadedPool pool = load_pool(*c.role("models").front());
  const ParallelCorpus test = load_corpus_artifact(*c.role("test").front());
  auto members = c.get<std::vector<int>>("members");
  if (members.empty()) {
    members.resize(pool.models.size());
    std::iota(members.begin(), members.end(), 0);
  }
  std::vector<const Model*> ptrs;
  ojson row;
  row["label"] = c.get<std::string>("label").empty() ? c.stage.id : c.get<std::string>("label");
  std::vector<std::string> tags;
  for (int m : members) {
    if (m < 0 || static_cast<size_t>(m) >= pool.models.size()) throw PoolError("evaluate member out of range");
    ptrs.push_back(&pool.models[static_cast<size_t>(m)]);
    tags.push_back(member_tag(pool.entries[static_cast<size_t>(m)]));
  }
  DecodeConfig dc = decode_config(c);
  const std::string combine = c.get<std::string>("combine");
  if (combine != "arithmetic" && combine != "geometric") throw ConfigError("combine must be arithmetic or geometric");
  dc.combine = combine == "geometric" ? EnsembleCombine::geometric : EnsembleCombine::arithmetic;
  const auto hyps = translate_tokens(ptrs, sources_of(test), dc);
  row["bleu"] = corpus_bleu(hyps, targets_of(test)).score;
  row["members"] = tags;
  write_token_lines(c.out / "hyp.txt", hyps);
  write_file(c.out / "row.json", row.dump() + "\n");
}

using StageFn = void (*)(const Ctx&);

StageFn stage_fn(const std::string& kind) {
  static const std::map<std::string, StageFn> fns = {
      {"toy", run_toy},           {"load_corpus", run_load_corpus}, {"load_lines", run_load_lines},
      {"monolingual", run_monolingual}, {"filter", run_filter},     {"concat", run_concat},
      {"noisy", run_noisy},       {"shard", run_shard},             {"vocab", run_vocab},
      {"train", run_train},       {"finetune", run_finetune},       {"bt", run_bt},
      {"kd", run_kd},             {"transfer", run_transfer},       {"subset", run_subset},
      {"select", run_select},     {"evaluate", run_evaluate},
  };
  return fns.at(kind);
}

std::string stage_key(const StageSpec& s, const json& params, uint64_t seed,
                      const std::map<std::string, std::vector<const Artifact*>>& inputs) {
  json k;
  k["format"] = kStageFormatVersion;
  k["kind"] = s.kind;
  k["params"] = params;
  k["seed"] = seed;
  json in = json::object();
  for (const auto& [role, arts] : inputs) {
    for (const Artifact* a : arts) in[role].push_back(a->content);
  }
  k["inputs"] = in;
  if (s.kind == "load_corpus" || s.kind == "load_lines") k["file"] = file_hash(params.at("path").get<std::string>());
  return sha256_hex(k.dump());
}

}  // namespace

PipelineReport run_experiment(const PipelineConfig& config_in, const RunOptions& options) {
  PipelineConfig config = config_in;
  if (options.seed) config.seed = *options.seed;
  config.validate();
  const fs::path cache = resolve_cache_dir(options);
  fs::create_directories(cache);
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);

  PipelineReport report;
  report.name = config.name;
  report.seed = config.seed;
  std::map<std::string, Artifact> artifacts;

  for (const auto& s : config.stages) {
    const auto t0 = std::chrono::steady_clock::now();
    const json params = effective_params(s);
    const uint64_t seed = derive_seed(config.seed, params.value("seed", uint64_t{0}));
    std::map<std::string, std::vector<const Artifact*>> in;
    for (const auto& [role, ids] : s.inputs) {
      for (const auto& id : ids) in[role].push_back(&artifacts.at(id));
    }
    StageRun run;
    run.id = s.id;
    run.kind = s.kind;
    try {
      run.key = stage_key(s, params, seed, in);
      run.dir = cache / (s.kind + "-" + run.key.substr(0, 20));
      Artifact art{stage_output(s.kind), run.dir, ""};
      if (fs::exists(run.dir / kMeta)) {
        run.cache_hit = true;
        art.content = json::parse(read_file(run.dir / kMeta)).at("content").get<std::string>();
      } else {
        const fs::path tmp = cache / (".tmp-" + run.dir.filename().string() + "-" + std::to_string(::getpid()));
        fs::remove_all(tmp);
        fs::create_directories(tmp);
        Ctx ctx{s, params, seed, in, tmp};
        stage_fn(s.kind)(ctx);
        art.content = content_hash(tmp);
        ojson meta;
        meta["stage"] = s.id;
        meta["kind"] = s.kind;
        meta["key"] = run.key;
        meta["content"] = art.content;
        write_file(tmp / kMeta, meta.dump() + "\n");
        fs::remove_all(run.dir);
        fs::rename(tmp, run.dir);
      }
      artifacts.emplace(s.id, art);
      report.artifact_hashes[s.id] = art.content;
      if (s.kind == "evaluate") {
        const json row = json::parse(read_file(run.dir / "row.json"));
        report.rows.push_back({s.id, row.at("label").get<std::string>(), row.at("bleu").get<double>(),
                               row.at("members").get<std::vector<std::string>>()});
      }
    } catch (const std::exception& e) {
      throw StageError("stage '" + s.id + "' (" + s.kind + ") failed: " + e.what());
    }
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (options.on_stage) options.on_stage(run);
    report.stages.push_back(run);
  }
  if (!options.out_dir.empty()) {
    write_file(options.out_dir / "report.txt", report.table());
    write_file(options.out_dir / "report.jsonl", report.jsonl());
  }
  return report;
}

}  // namespace nmtforge
