// SPDX-License-Identifier: Apache-2.0
#include "nmtforge/model/spec.h"

#include <cmath>
#include <map>
#include <sstream>

#include "nmtforge/errors.h"

namespace nmtforge {

std::string to_string(Family f) { return f == Family::transformer ? "transformer" : "dtmt"; }
std::string to_string(DecoderSelfAttention a) { return a == DecoderSelfAttention::standard ? "standard" : "average"; }
std::string to_string(Direction d) { return d == Direction::l2r ? "l2r" : "r2l"; }

void ModelSpec::validate() const {
  auto fail = [&](const std::string& why) { throw SpecError("model spec '" + name + "': " + why); };
  if (hidden < 1) fail("hidden must be positive");
  if (family == Family::transformer) {
    if (filter < 1) fail("filter must be positive");
    if (enc_layers < 0 || dec_layers < 1) fail("need enc_layers >= 0 and dec_layers >= 1");
    if (heads < 1 || hidden % heads != 0) fail("hidden must be divisible by heads");
    if (!prenorm && enc_layers > 6) fail("encoders deeper than 6 layers must use pre-norm");
  } else {
    if (lgru_per_block != 1) fail("a transition block has exactly one L-GRU");
    if (tgru_per_block < 0) fail("tgru_per_block must be >= 0");
  }
}

std::string ModelSpec::to_text() const {
  std::ostringstream out;
  out << "name=" << name << '\n'
      << "family=" << to_string(family) << '\n'
      << "hidden=" << hidden << '\n'
      << "filter=" << filter << '\n'
      << "enc_layers=" << enc_layers << '\n'
      << "dec_layers=" << dec_layers << '\n'
      << "heads=" << heads << '\n'
      << "prenorm=" << (prenorm ? 1 : 0) << '\n'
      << "decoder_self_attention=" << to_string(decoder_self_attention) << '\n'
      << "positional=" << (positional ? 1 : 0) << '\n'
      << "lgru_per_block=" << lgru_per_block << '\n'
      << "tgru_per_block=" << tgru_per_block << '\n'
      << "bidirectional_encoder=" << (bidirectional_encoder ? 1 : 0) << '\n'
      << "direction=" << to_string(direction) << '\n';
  return out.str();
}

ModelSpec ModelSpec::from_text(const std::string& text) {
  ModelSpec spec;
  std::istringstream in(text);
  std::string line;
  auto as_int = [](const std::string& key, const std::string& v) {
    try {
      size_t used = 0;
      const int n = std::stoi(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return n;
    } catch (const std::exception&) {
      throw SpecError("model spec: '" + key + "' expects an integer, got '" + v + "'");
    }
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw SpecError("model spec: expected key=value, got '" + line + "'");
    const std::string key = line.substr(0, eq), v = line.substr(eq + 1);
    if (key == "name") spec.name = v;
    else if (key == "family") {
      if (v == "transformer") spec.family = Family::transformer;
      else if (v == "dtmt") spec.family = Family::dtmt;
      else throw SpecError("model spec: unknown family '" + v + "'");
    } else if (key == "hidden") spec.hidden = as_int(key, v);
    else if (key == "filter") spec.filter = as_int(key, v);
    else if (key == "enc_layers") spec.enc_layers = as_int(key, v);
    else if (key == "dec_layers") spec.dec_layers = as_int(key, v);
    else if (key == "heads") spec.heads = as_int(key, v);
    else if (key == "prenorm") spec.prenorm = as_int(key, v) != 0;
    else if (key == "decoder_self_attention") {
      if (v == "standard") spec.decoder_self_attention = DecoderSelfAttention::standard;
      else if (v == "average") spec.decoder_self_attention = DecoderSelfAttention::average;
      else throw SpecError("model spec: unknown decoder_self_attention '" + v + "'");
    } else if (key == "positional") spec.positional = as_int(key, v) != 0;
    else if (key == "lgru_per_block") spec.lgru_per_block = as_int(key, v);
    else if (key == "tgru_per_block") spec.tgru_per_block = as_int(key, v);
    else if (key == "bidirectional_encoder") spec.bidirectional_encoder = as_int(key, v) != 0;
    else if (key == "direction") {
      if (v == "l2r") spec.direction = Direction::l2r;
      else if (v == "r2l") spec.direction = Direction::r2l;
      else throw SpecError("model spec: unknown direction '" + v + "'");
    } else {
      throw SpecError("model spec: unknown key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

namespace {

ModelSpec transformer(const std::string& name, int hidden, int filter, int enc, int dec, int heads,
                      DecoderSelfAttention self = DecoderSelfAttention::standard) {
  ModelSpec s;
  s.name = name;
  s.family = Family::transformer;
  s.hidden = hidden;
  s.filter = filter;
  s.enc_layers = enc;
  s.dec_layers = dec;
  s.heads = heads;
  s.decoder_self_attention = self;
  return s;
}

ModelSpec dtmt(const std::string& name, int hidden, int tgru) {
  ModelSpec s;
  s.name = name;
  s.family = Family::dtmt;
  s.hidden = hidden;
  s.tgru_per_block = tgru;
  return s;
}

const std::map<std::string, ModelSpec>& presets() {
  using enum DecoderSelfAttention;
  static const std::map<std::string, ModelSpec> table = {
      {"deeper", transformer("deeper", 64, 512, 12, 2, 4)},
      {"wider", transformer("wider", 64, 1024, 6, 2, 4)},
      {"aan", transformer("aan", 64, 512, 6, 2, 4, average)},
      {"dtmt", dtmt("dtmt", 64, 4)},
      {"micro-deeper", transformer("micro-deeper", 32, 64, 3, 1, 4)},
      {"micro-wider", transformer("micro-wider", 32, 128, 1, 1, 4)},
      {"micro-aan", transformer("micro-aan", 32, 64, 2, 1, 4, average)},
      {"micro-dtmt", dtmt("micro-dtmt", 32, 1)},
      {"full-deeper", transformer("full-deeper", 512, 16384, 30, 6, 8)},
      {"full-wider", transformer("full-wider", 1024, 15000, 10, 6, 16)},
      {"full-aan", transformer("full-aan", 1024, 15000, 10, 6, 16, average)},
      {"full-dtmt", dtmt("full-dtmt", 1024, 4)},
  };
  return table;
}

}  // namespace

ModelSpec preset(const std::string& name) {
  auto it = presets().find(name);
  if (it == presets().end()) throw SpecError("unknown model preset '" + name + "'");
  return it->second;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& [name, spec] : presets()) out.push_back(name);
  return out;
}

namespace {

class SchemaBuilder {
 public:
  void add(const std::string& name, Shape shape, Init init, double gain = 1.0) {
    params.push_back({name, std::move(shape), init, gain});
  }
  void linear(const std::string& prefix, int64_t in, int64_t out, double gain = 1.0, bool bias = true) {
    add(prefix + ".w", {in, out}, Init::xavier, gain);
    if (bias) add(prefix + ".b", {1, out}, Init::zeros);
  }
  void norm(const std::string& prefix, int64_t dim) {
    add(prefix + ".g", {1, dim}, Init::ones);
    add(prefix + ".b", {1, dim}, Init::zeros);
  }
  void attention(const std::string& prefix, int64_t h, double out_gain) {
    linear(prefix + ".q", h, h);
    linear(prefix + ".k", h, h);
    linear(prefix + ".v", h, h);
    linear(prefix + ".o", h, h, out_gain);
  }
  void ffn(const std::string& prefix, int64_t h, int64_t f, double out_gain) {
    linear(prefix + ".1", h, f);
    linear(prefix + ".2", f, h, out_gain);
  }
  void lgru(const std::string& prefix, int64_t in, int64_t h) {
    add(prefix + ".wg", {in, 3 * h}, Init::xavier);
    add(prefix + ".ug", {h, 3 * h}, Init::xavier);
    add(prefix + ".bg", {1, 3 * h}, Init::zeros);
    add(prefix + ".wh", {in, h}, Init::xavier);
    add(prefix + ".uh", {h, h}, Init::xavier);
    add(prefix + ".bh", {1, h}, Init::zeros);
    add(prefix + ".hl", {in, h}, Init::xavier);
  }
  void tgru(const std::string& prefix, int64_t h) {
    add(prefix + ".ug", {h, 2 * h}, Init::xavier);
    add(prefix + ".bg", {1, 2 * h}, Init::zeros);
    add(prefix + ".uh", {h, h}, Init::xavier);
    add(prefix + ".bh", {1, h}, Init::zeros);
  }

  std::vector<ParamInfo> params;
};

void transformer_schema(SchemaBuilder& b, const ModelSpec& s, int64_t vs, int64_t vt) {
  const int64_t h = s.hidden, f = s.filter;
  b.add("src_emb", {vs, h}, Init::embedding);
  b.add("tgt_emb", {vt, h}, Init::embedding);
  const double enc_gain = s.prenorm && s.enc_layers > 0 ? 1.0 / std::sqrt(2.0 * s.enc_layers) : 1.0;
  const double dec_gain = s.prenorm ? 1.0 / std::sqrt(2.0 * s.dec_layers) : 1.0;
  for (int l = 0; l < s.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    b.norm(p + ".ln1", h);
    b.attention(p + ".att", h, enc_gain);
    b.norm(p + ".ln2", h);
    b.ffn(p + ".ffn", h, f, enc_gain);
  }
  if (s.prenorm && s.enc_layers > 0) b.norm("enc.ln", h);
  for (int l = 0; l < s.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    b.norm(p + ".ln1", h);
    if (s.decoder_self_attention == DecoderSelfAttention::standard) {
      b.attention(p + ".self", h, dec_gain);
    } else {
      b.ffn(p + ".aan.ffn", h, f, 1.0);
      b.linear(p + ".aan.gate", 2 * h, 2 * h);
    }
    b.norm(p + ".ln2", h);
    b.attention(p + ".cross", h, dec_gain);
    b.norm(p + ".ln3", h);
    b.ffn(p + ".ffn", h, f, dec_gain);
  }
  if (s.prenorm) b.norm("dec.ln", h);
  b.linear("out", h, vt);
}

void dtmt_schema(SchemaBuilder& b, const ModelSpec& s, int64_t vs, int64_t vt) {
  const int64_t h = s.hidden;
  const int64_t ctx = s.bidirectional_encoder ? 2 * h : h;
  b.add("src_emb", {vs, h}, Init::embedding);
  b.add("tgt_emb", {vt, h}, Init::embedding);
  for (const std::string dir : {"fwd", "bwd"}) {
    if (dir == "bwd" && !s.bidirectional_encoder) continue;
    b.lgru("enc." + dir + ".lgru", h, h);
    for (int k = 0; k < s.tgru_per_block; ++k) b.tgru("enc." + dir + ".tgru" + std::to_string(k), h);
  }
  b.linear("dec.init", ctx, h);
  b.lgru("dec.q.lgru", h, h);
  for (int k = 0; k < s.tgru_per_block; ++k) b.tgru("dec.q.tgru" + std::to_string(k), h);
  b.linear("dec.att.k", ctx, h, 1.0, false);
  b.linear("dec.att.v", ctx, h, 1.0, false);
  b.lgru("dec.d.lgru", h, h);
  for (int k = 0; k < s.tgru_per_block; ++k) b.tgru("dec.d.tgru" + std::to_string(k), h);
  b.linear("dec.read", 3 * h, h);
  b.linear("out", h, vt);
}

}  // namespace

std::vector<ParamInfo> parameter_schema(const ModelSpec& spec, size_t src_vocab, size_t tgt_vocab) {
  spec.validate();
  if (src_vocab < 1 || tgt_vocab < 1) throw SpecError("vocabularies must be non-empty");
  SchemaBuilder b;
  if (spec.family == Family::transformer) {
    transformer_schema(b, spec, static_cast<int64_t>(src_vocab), static_cast<int64_t>(tgt_vocab));
  } else {
    dtmt_schema(b, spec, static_cast<int64_t>(src_vocab), static_cast<int64_t>(tgt_vocab));
  }
  return b.params;
}

int64_t schema_parameter_count(const ModelSpec& spec, size_t src_vocab, size_t tgt_vocab) {
  int64_t n = 0;
  for (const auto& p : parameter_schema(spec, src_vocab, tgt_vocab)) n += shape_size(p.shape);
  return n;
}

}  // namespace nmtforge
