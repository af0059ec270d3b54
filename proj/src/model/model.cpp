// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/model/model.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "architecture.h"
#include "nmtforge/errors.h"
#include "nmtforge/numerics/checkpoint.h"
#include "nmtforge/numerics/rng.h"

namespace nmtforge {

std::vector<int64_t> offsets_of(const std::vector<Ids>& seqs) {
  std::vector<int64_t> off{0};
  for (const auto& s : seqs) off.push_back(off.back() + static_cast<int64_t>(s.size()));
  return off;
}

Ids flatten(const std::vector<Ids>& seqs) {
  Ids out;
  for (const auto& s : seqs) out.insert(out.end(), s.begin(), s.end());
  return out;
}

size_t Batch::target_tokens() const {
  size_t n = 0;
  for (const auto& t : tgt_out) n += t.size();
  return n;
}

std::vector<int64_t> Batch::src_offsets() const { return offsets_of(src); }
std::vector<int64_t> Batch::tgt_offsets() const { return offsets_of(tgt_in); }
Ids Batch::flat_tgt_out() const { return flatten(tgt_out); }

Batch make_batch(const std::vector<Ids>& src, const std::vector<Ids>& tgt) {
  if (src.size() != tgt.size()) throw AlignError("batch: source/target counts differ");
  Batch b;
  for (size_t i = 0; i < src.size(); ++i) {
    Ids s = src[i];
    s.push_back(Vocabulary::kEos);
    Ids in{Vocabulary::kBos};
    in.insert(in.end(), tgt[i].begin(), tgt[i].end());
    Ids out = tgt[i];
    out.push_back(Vocabulary::kEos);
    b.src.push_back(std::move(s));
    b.tgt_in.push_back(std::move(in));
    b.tgt_out.push_back(std::move(out));
  }
  return b;
}

namespace {

std::shared_ptr<const Architecture> make_architecture(const ModelSpec& spec) {
  spec.validate();
  return spec.family == Family::transformer ? make_transformer(spec) : make_dtmt(spec);
}

}  // namespace

Model::Model(ModelSpec spec, Vocabulary src_vocab, Vocabulary tgt_vocab, ParameterStore params)
    : spec_(std::move(spec)),
      src_vocab_(std::move(src_vocab)),
      tgt_vocab_(std::move(tgt_vocab)),
      params_(std::move(params)),
      arch_(make_architecture(spec_)) {
  const auto schema = parameter_schema(spec_, src_vocab_.size(), tgt_vocab_.size());
  if (schema.size() != params_.size()) {
    throw SpecError("parameter store has " + std::to_string(params_.size()) + " tensors, schema expects " +
                    std::to_string(schema.size()));
  }
  for (const auto& info : schema) {
    auto it = params_.find(info.name);
    if (it == params_.end()) throw SpecError("parameter '" + info.name + "' missing");
    if (it->second.shape() != info.shape) {
      throw SpecError("parameter '" + info.name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                      shape_string(info.shape));
    }
  }
}

Model Model::build(const ModelSpec& spec, const Vocabulary& src_vocab, const Vocabulary& tgt_vocab, uint64_t seed) {
  Rng rng(seed);
  ParameterStore params;
  for (const auto& info : parameter_schema(spec, src_vocab.size(), tgt_vocab.size())) {
    Tensor t(info.shape);
    switch (info.init) {
      case Init::xavier: {
        const double fan_in = static_cast<double>(info.shape[0]);
        const double fan_out = static_cast<double>(info.shape[1]);
        const double limit = info.gain * std::sqrt(6.0 / (fan_in + fan_out));
        for (int64_t i = 0; i < t.size(); ++i) t[i] = (2.0 * rng.uniform() - 1.0) * limit;
        break;
      }
      case Init::embedding: {
        const double sd = 1.0 / std::sqrt(static_cast<double>(info.shape[1]));
        for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * sd;
        break;
      }
      case Init::zeros: break;
      case Init::ones: t.fill(1.0); break;
    }
    params.emplace(info.name, std::move(t));
  }
  return Model(spec, src_vocab, tgt_vocab, std::move(params));
}

void Model::check_ids(const std::vector<Ids>& seqs, size_t vocab, const char* side) const {
  for (const auto& s : seqs) {
    for (int id : s) {
      if (id < 0 || static_cast<size_t>(id) >= vocab) {
        throw VocabError(std::string(side) + " id " + std::to_string(id) + " outside vocabulary of " +
                         std::to_string(vocab));
      }
    }
    if (s.empty()) throw ShapeError(std::string(side) + " sequence is empty");
  }
}

Var Model::encode(Graph& g, const std::vector<Ids>& src) const {
  check_ids(src, src_vocab_.size(), "source");
  return arch_->encode(g, params_, src);
}

Var Model::forward(Graph& g, const Batch& batch, const ForwardOptions& options) const {
  check_ids(batch.src, src_vocab_.size(), "source");
  check_ids(batch.tgt_in, tgt_vocab_.size(), "target");
  if (batch.tgt_in.size() != batch.src.size() || batch.tgt_out.size() != batch.src.size()) {
    throw ShapeError("batch sides have different sizes");
  }
  for (size_t i = 0; i < batch.size(); ++i) {
    if (batch.tgt_in[i].size() != batch.tgt_out[i].size()) throw ShapeError("tgt_in/tgt_out lengths differ");
  }
  return arch_->forward(g, params_, batch, options);
}

std::unique_ptr<DecoderState> Model::start(const std::vector<Ids>& src) const {
  check_ids(src, src_vocab_.size(), "source");
  return arch_->start(params_, src);
}

Tensor Model::step(DecoderState& state, std::span<const int> last_tokens) const {
  for (int id : last_tokens) {
    if (id < 0 || static_cast<size_t>(id) >= tgt_vocab_.size()) throw VocabError("target id outside vocabulary");
  }
  return arch_->step(params_, state, last_tokens);
}

void save_model(const std::filesystem::path& path, const Model& model) {
  TensorFile file;
  file.tensors = model.params();
  file.blobs["spec"] = model.spec().to_text();
  std::ostringstream sv, tv;
  model.src_vocab().write(sv);
  model.tgt_vocab().write(tv);
  file.blobs["src_vocab"] = sv.str();
  file.blobs["tgt_vocab"] = tv.str();
  file.blobs["trained_steps"] = std::to_string(model.trained_steps);
  file.blobs["lineage"] = model.lineage;
  save_tensor_file(path, file);
}

Model load_model(const std::filesystem::path& path) {
  TensorFile file = load_tensor_file(path);
  for (const char* key : {"spec", "src_vocab", "tgt_vocab"}) {
    if (!file.blobs.count(key)) throw FormatError(path.string() + ": not a model checkpoint (missing " + key + ")");
  }
  std::istringstream sv(file.blobs["src_vocab"]), tv(file.blobs["tgt_vocab"]);
  Model model(ModelSpec::from_text(file.blobs["spec"]), Vocabulary::read(sv), Vocabulary::read(tv),
              std::move(file.tensors));
  if (file.blobs.count("trained_steps")) model.trained_steps = std::stoll(file.blobs["trained_steps"]);
  if (file.blobs.count("lineage")) model.lineage = file.blobs["lineage"];
  return model;
}

ParallelCorpus r2l_wrap(const ParallelCorpus& corpus) {
  ParallelCorpus out = corpus;
  for (auto& p : out) std::reverse(p.target.begin(), p.target.end());
  return out;
}

std::vector<Tokens> r2l_unwrap(const std::vector<Tokens>& lines) {
  std::vector<Tokens> out = lines;
  for (auto& l : out) std::reverse(l.begin(), l.end());
  return out;
}

}  // namespace nmtforge
