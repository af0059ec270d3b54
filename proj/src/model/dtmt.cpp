// SPDX-License-Identifier: Apache-2.0
#include <numeric>

#include "architecture.h"
#include "nmtforge/errors.h"

namespace nmtforge {
namespace {

class DtmtState : public DecoderState {
 public:
  size_t rows() const override { return row_source.size(); }
  size_t steps() const override { return steps_; }

  void select(std::span<const size_t> picked) override {
    Tensor next({static_cast<int64_t>(picked.size()), s.cols()});
    std::vector<size_t> sources;
    for (size_t i = 0; i < picked.size(); ++i) {
      if (picked[i] >= rows()) throw StateError("decoder state: row out of range");
      std::copy_n(s.row(static_cast<int64_t>(picked[i])).data(), s.cols(), next.row(static_cast<int64_t>(i)).data());
      sources.push_back(row_source[picked[i]]);
    }
    s = std::move(next);
    row_source = std::move(sources);
  }

  size_t steps_ = 0;
  Tensor s;
  std::vector<size_t> row_source;
  std::vector<int64_t> src_begin, src_end;
  Tensor keys, values;
};

class Dtmt : public Architecture {
 public:
  explicit Dtmt(ModelSpec spec) : s_(std::move(spec)) {}

  Var encode(Graph& g, const ParameterStore& ps, const std::vector<Ids>& src) const override {
    Params p(g, ps);
    const size_t b = src.size();
    const auto off = offsets_of(src);
    size_t steps = 0;
    for (const auto& seq : src) {
      if (seq.empty()) throw ShapeError("DTMT encoder: empty source sequence");
      steps = std::max(steps, seq.size());
    }
    Var emb = embedding_lookup(p("src_emb"), flatten(src));
    std::vector<Var> parts;
    for (const bool backward : {false, true}) {
      if (backward && !s_.bidirectional_encoder) break;
      const std::string pre = backward ? "enc.bwd" : "enc.fwd";
      Var h = zeros(g, static_cast<int64_t>(b));
      std::vector<Var> outs;
      for (size_t t = 0; t < steps; ++t) {
        // Finished sequences keep feeding a valid row; their states are never read.
        std::vector<int64_t> rows(b);
        for (size_t i = 0; i < b; ++i) {
          const auto len = static_cast<int64_t>(src[i].size());
          const int64_t j = std::min<int64_t>(static_cast<int64_t>(t), len - 1);
          rows[i] = off[i] + (backward ? len - 1 - j : j);
        }
        h = transition(p, pre, gather_rows(emb, rows), h);
        outs.push_back(h);
      }
      // Step-major (t * b + i) -> ragged batch order.
      std::vector<int64_t> pick;
      for (size_t i = 0; i < b; ++i) {
        const auto len = static_cast<int64_t>(src[i].size());
        for (int64_t j = 0; j < len; ++j) {
          const int64_t t = backward ? len - 1 - j : j;
          pick.push_back(t * static_cast<int64_t>(b) + static_cast<int64_t>(i));
        }
      }
      parts.push_back(gather_rows(concat(outs, 0), pick));
    }
    return parts.size() == 1 ? parts[0] : concat(parts, 1);
  }

  Var forward(Graph& g, const ParameterStore& ps, const Batch& batch, const ForwardOptions& options) const override {
    Params p(g, ps);
    const size_t b = batch.size();
    Var enc = encode(g, ps, batch.src);
    const auto src_off = batch.src_offsets();
    Var keys = linear(p, "dec.att.k", enc);
    Var values = linear(p, "dec.att.v", enc);
    Var s = initial_state(p, enc, src_off);

    std::vector<int64_t> q_off(b + 1);
    std::iota(q_off.begin(), q_off.end(), 0);
    const AttentionLayout layout{q_off, src_off, {}};

    const auto tgt_off = batch.tgt_offsets();
    Var emb = embedding_lookup(p("tgt_emb"), flatten(batch.tgt_in));
    size_t steps = 0;
    for (const auto& seq : batch.tgt_in) steps = std::max(steps, seq.size());
    std::vector<Var> outs;
    std::vector<Tensor> step_weights;
    auto* weights = options.attention_weights ? &step_weights : nullptr;
    for (size_t t = 0; t < steps; ++t) {
      std::vector<int64_t> rows(b);
      for (size_t i = 0; i < b; ++i) {
        const auto len = static_cast<int64_t>(batch.tgt_in[i].size());
        rows[i] = tgt_off[i] + std::min<int64_t>(static_cast<int64_t>(t), len - 1);
      }
      Var y = gather_rows(emb, rows);
      Var readout;
      s = decoder_step(p, y, s, keys, values, layout, weights, readout);
      outs.push_back(readout);
    }
    std::vector<int64_t> pick;
    for (size_t i = 0; i < b; ++i) {
      for (size_t t = 0; t < batch.tgt_in[i].size(); ++t) pick.push_back(static_cast<int64_t>(t * b + i));
    }
    if (weights) {
      for (int64_t k : pick) options.attention_weights->push_back(step_weights[static_cast<size_t>(k)]);
    }
    return linear(p, "out", gather_rows(concat(outs, 0), pick));
  }

  std::unique_ptr<DecoderState> start(const ParameterStore& ps, const std::vector<Ids>& src) const override {
    Graph g(false);
    Params p(g, ps);
    Var enc = encode(g, ps, src);
    const auto off = offsets_of(src);
    auto st = std::make_unique<DtmtState>();
    st->keys = linear(p, "dec.att.k", enc).value();
    st->values = linear(p, "dec.att.v", enc).value();
    st->s = initial_state(p, enc, off).value();
    for (size_t i = 0; i < src.size(); ++i) {
      st->row_source.push_back(i);
      st->src_begin.push_back(off[i]);
      st->src_end.push_back(off[i + 1]);
    }
    return st;
  }

  Tensor step(const ParameterStore& ps, DecoderState& base, std::span<const int> last) const override {
    auto& st = dynamic_cast<DtmtState&>(base);
    const size_t rows = st.rows();
    if (last.size() != rows) throw StateError("decoder step: token count does not match hypotheses");
    Graph g(false);
    Params p(g, ps);
    std::vector<int64_t> q_off(rows + 1);
    std::iota(q_off.begin(), q_off.end(), 0);
    AttentionLayout layout{q_off, {}, {}};
    for (size_t r = 0; r < rows; ++r) {
      layout.k.push_back(st.src_begin[st.row_source[r]]);
      layout.k_end.push_back(st.src_end[st.row_source[r]]);
    }
    Var y = embedding_lookup(p("tgt_emb"), Ids(last.begin(), last.end()));
    Var readout;
    Var s = decoder_step(p, y, g.constant(st.s), g.constant(st.keys), g.constant(st.values), layout, nullptr, readout);
    st.s = s.value();
    ++st.steps_;
    return log_softmax(linear(p, "out", readout)).value();
  }

 private:
  Var zeros(Graph& g, int64_t rows) const { return g.constant(Tensor::zeros(rows, s_.hidden)); }

  Var transition(const Params& p, const std::string& pre, Var x, Var h) const {
    h = lgru_step(p, pre + ".lgru", x, h);
    for (int k = 0; k < s_.tgru_per_block; ++k) h = tgru_step(p, pre + ".tgru" + std::to_string(k), h);
    return h;
  }

  // tanh(W mean(enc) + b) per sequence.
  Var initial_state(const Params& p, Var enc, const std::vector<int64_t>& off) const {
    Tensor inv({static_cast<int64_t>(off.size() - 1), 1});
    for (size_t i = 0; i + 1 < off.size(); ++i) inv[static_cast<int64_t>(i)] = 1.0 / static_cast<Real>(off[i + 1] - off[i]);
    Var mean = mul(segment_sum(enc, off), p.graph().constant(std::move(inv)));
    return tanh(linear(p, "dec.init", mean));
  }

  // Query block on the previous target word, attention, then the decoder
  // block on the context. Returns the new state; readout receives
  // tanh(W [s; ctx; y] + b).
  Var decoder_step(const Params& p, Var y, Var s, Var keys, Var values, const AttentionLayout& layout,
                   std::vector<Tensor>* weights, Var& readout) const {
    Var q = transition(p, "dec.q", y, s);
    Var ctx = attention(q, keys, values, layout, 1, false, weights);
    Var next = transition(p, "dec.d", ctx, q);
    const Var parts[] = {next, ctx, y};
    readout = tanh(linear(p, "dec.read", concat(parts, 1)));
    return next;
  }

  ModelSpec s_;
};

}  // namespace

std::shared_ptr<const Architecture> make_dtmt(const ModelSpec& spec) { return std::make_shared<Dtmt>(spec); }

}  // namespace nmtforge
