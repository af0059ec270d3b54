// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <mutex>
#include <numeric>

#include "architecture.h"
#include "nmtforge/errors.h"

namespace nmtforge {
namespace {

// Position table shared by all models of one width, grown on demand.
const Tensor& position_table(int64_t min_rows, int64_t dim) {
  static std::mutex mu;
  static std::map<int64_t, Tensor> tables;
  std::lock_guard<std::mutex> lock(mu);
  Tensor& t = tables[dim];
  if (t.rows() < min_rows || t.cols() != dim) {
    t = sinusoidal_positions(0, std::max<int64_t>(min_rows, 256), dim);
  }
  return t;
}

Tensor positions_for(std::span<const int64_t> positions, int64_t dim) {
  int64_t max_pos = 0;
  for (int64_t p : positions) max_pos = std::max(max_pos, p);
  const Tensor& table = position_table(max_pos + 1, dim);
  Tensor out({static_cast<int64_t>(positions.size()), dim});
  for (size_t r = 0; r < positions.size(); ++r) {
    std::copy_n(table.row(positions[r]).data(), dim, out.row(static_cast<int64_t>(r)).data());
  }
  return out;
}

std::vector<int64_t> ragged_positions(const std::vector<Ids>& seqs) {
  std::vector<int64_t> pos;
  for (const auto& s : seqs) {
    for (size_t j = 0; j < s.size(); ++j) pos.push_back(static_cast<int64_t>(j));
  }
  return pos;
}

class TransformerState : public DecoderState {
 public:
  size_t rows() const override { return row_source.size(); }
  size_t steps() const override { return steps_; }

  void select(std::span<const size_t> picked) override {
    for (size_t r : picked) {
      if (r >= rows()) throw StateError("decoder state: row " + std::to_string(r) + " out of range");
    }
    std::vector<size_t> sources;
    for (size_t r : picked) sources.push_back(row_source[r]);
    for (auto* caches : {&self_k, &self_v}) {
      for (Tensor& c : *caches) {
        Tensor next({static_cast<int64_t>(picked.size() * steps_), c.cols()});
        for (size_t i = 0; i < picked.size(); ++i) {
          std::copy_n(c.row(static_cast<int64_t>(picked[i] * steps_)).data(), steps_ * c.cols(),
                      next.row(static_cast<int64_t>(i * steps_)).data());
        }
        c = std::move(next);
      }
    }
    for (Tensor& s : sums) {
      Tensor next({static_cast<int64_t>(picked.size()), s.cols()});
      for (size_t i = 0; i < picked.size(); ++i) {
        std::copy_n(s.row(static_cast<int64_t>(picked[i])).data(), s.cols(), next.row(static_cast<int64_t>(i)).data());
      }
      s = std::move(next);
    }
    row_source = std::move(sources);
  }

  size_t steps_ = 0;
  std::vector<size_t> row_source;
  std::vector<int64_t> src_begin, src_end;
  std::vector<Tensor> mem_k, mem_v;
  // Standard self-attention: per layer, rows x steps cached keys/values,
  // row-major by hypothesis.
  std::vector<Tensor> self_k, self_v;
  // Average attention: per layer running sum of the layer inputs.
  std::vector<Tensor> sums;
};

class Transformer : public Architecture {
 public:
  explicit Transformer(ModelSpec spec) : s_(std::move(spec)) {}

  Var encode(Graph& g, const ParameterStore& ps, const std::vector<Ids>& src) const override {
    Params p(g, ps);
    const auto offsets = offsets_of(src);
    Var x = embed(p, "src_emb", flatten(src), ragged_positions(src));
    const AttentionLayout layout = AttentionLayout::self(offsets);
    for (int l = 0; l < s_.enc_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l);
      auto att = [&](Var h) { return mha(p, pre + ".att", h, h, layout, false); };
      auto ffn = [&](Var h) { return feed_forward(p, pre + ".ffn", h); };
      x = sublayer(p, pre + ".ln1", x, att);
      x = sublayer(p, pre + ".ln2", x, ffn);
    }
    if (s_.prenorm && s_.enc_layers > 0) x = norm(p, "enc.ln", x);
    return x;
  }

  Var forward(Graph& g, const ParameterStore& ps, const Batch& batch, const ForwardOptions&) const override {
    Params p(g, ps);
    Var memory = encode(g, ps, batch.src);
    const auto src_off = batch.src_offsets();
    const auto tgt_off = batch.tgt_offsets();
    const AttentionLayout self_layout = AttentionLayout::self(tgt_off);
    const AttentionLayout cross_layout{tgt_off, src_off, {}};
    Var x = embed(p, "tgt_emb", flatten(batch.tgt_in), ragged_positions(batch.tgt_in));
    for (int l = 0; l < s_.dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      auto self = [&](Var h) {
        if (s_.decoder_self_attention == DecoderSelfAttention::average) {
          return average_attention(p, pre, h, cumulative_mean(h, tgt_off));
        }
        return mha(p, pre + ".self", h, h, self_layout, true);
      };
      auto cross = [&](Var h) { return mha(p, pre + ".cross", h, memory, cross_layout, false); };
      auto ffn = [&](Var h) { return feed_forward(p, pre + ".ffn", h); };
      x = sublayer(p, pre + ".ln1", x, self);
      x = sublayer(p, pre + ".ln2", x, cross);
      x = sublayer(p, pre + ".ln3", x, ffn);
    }
    if (s_.prenorm) x = norm(p, "dec.ln", x);
    return linear(p, "out", x);
  }

  std::unique_ptr<DecoderState> start(const ParameterStore& ps, const std::vector<Ids>& src) const override {
    auto state = std::make_unique<TransformerState>();
    Graph g(false);
    Params p(g, ps);
    Var memory = encode(g, ps, src);
    const auto off = offsets_of(src);
    for (size_t i = 0; i < src.size(); ++i) {
      state->row_source.push_back(i);
      state->src_begin.push_back(off[i]);
      state->src_end.push_back(off[i + 1]);
    }
    const int64_t h = s_.hidden;
    for (int l = 0; l < s_.dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l) + ".cross";
      state->mem_k.push_back(linear(p, pre + ".k", memory).value());
      state->mem_v.push_back(linear(p, pre + ".v", memory).value());
      if (s_.decoder_self_attention == DecoderSelfAttention::standard) {
        state->self_k.emplace_back(Shape{0, h});
        state->self_v.emplace_back(Shape{0, h});
      } else {
        state->sums.emplace_back(Shape{static_cast<int64_t>(src.size()), h});
      }
    }
    return state;
  }

  Tensor step(const ParameterStore& ps, DecoderState& base, std::span<const int> last) const override {
    auto& st = dynamic_cast<TransformerState&>(base);
    const size_t rows = st.rows();
    if (last.size() != rows) {
      throw StateError("decoder step: " + std::to_string(last.size()) + " tokens for " + std::to_string(rows) +
                       " hypotheses");
    }
    const size_t t = st.steps_;
    Graph g(false);
    Params p(g, ps);
    const std::vector<int64_t> pos(rows, static_cast<int64_t>(t));
    Var x = embed(p, "tgt_emb", Ids(last.begin(), last.end()), pos);

    std::vector<int64_t> q_off(rows + 1);
    std::iota(q_off.begin(), q_off.end(), 0);
    AttentionLayout cross_layout{q_off, {}, {}};
    for (size_t r = 0; r < rows; ++r) {
      cross_layout.k.push_back(st.src_begin[st.row_source[r]]);
      cross_layout.k_end.push_back(st.src_end[st.row_source[r]]);
    }
    AttentionLayout self_layout{q_off, {}, {}};
    for (size_t r = 0; r <= rows; ++r) self_layout.k.push_back(static_cast<int64_t>(r * (t + 1)));

    for (int l = 0; l < s_.dec_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      const auto li = static_cast<size_t>(l);
      auto self = [&](Var h) {
        if (s_.decoder_self_attention == DecoderSelfAttention::average) {
          Tensor& sum = st.sums[li];
          sum.matrix() += h.value().matrix();
          Tensor avg = sum;
          avg.matrix() /= static_cast<Real>(t + 1);
          return average_attention(p, pre, h, g.constant(std::move(avg)));
        }
        Var q = linear(p, pre + ".self.q", h);
        const Tensor k = linear(p, pre + ".self.k", h).value();
        const Tensor v = linear(p, pre + ".self.v", h).value();
        st.self_k[li] = append_step(st.self_k[li], k, rows, t);
        st.self_v[li] = append_step(st.self_v[li], v, rows, t);
        Var o = attention(q, g.constant(st.self_k[li]), g.constant(st.self_v[li]), self_layout, s_.heads, false);
        return linear(p, pre + ".self.o", o);
      };
      auto cross = [&](Var h) {
        Var q = linear(p, pre + ".cross.q", h);
        Var o = attention(q, g.constant(st.mem_k[li]), g.constant(st.mem_v[li]), cross_layout, s_.heads, false);
        return linear(p, pre + ".cross.o", o);
      };
      auto ffn = [&](Var h) { return feed_forward(p, pre + ".ffn", h); };
      x = sublayer(p, pre + ".ln1", x, self);
      x = sublayer(p, pre + ".ln2", x, cross);
      x = sublayer(p, pre + ".ln3", x, ffn);
    }
    if (s_.prenorm) x = norm(p, "dec.ln", x);
    ++st.steps_;
    return log_softmax(linear(p, "out", x)).value();
  }

 private:
  Var embed(const Params& p, const std::string& table, const Ids& ids, std::span<const int64_t> pos) const {
    Var e = scale(embedding_lookup(p(table), ids), std::sqrt(static_cast<Real>(s_.hidden)));
    if (!s_.positional) return e;
    return add(e, p.graph().constant(positions_for(pos, s_.hidden)));
  }

  // Residual block: pre-norm x + f(LN(x)) or post-norm LN(x + f(x)).
  template <typename F>
  Var sublayer(const Params& p, const std::string& ln, Var x, F&& f) const {
    if (s_.prenorm) return add(x, f(norm(p, ln, x)));
    return norm(p, ln, add(x, f(x)));
  }

  Var mha(const Params& p, const std::string& prefix, Var q_in, Var kv_in, const AttentionLayout& layout,
          bool causal) const {
    Var q = linear(p, prefix + ".q", q_in);
    Var k = linear(p, prefix + ".k", kv_in);
    Var v = linear(p, prefix + ".v", kv_in);
    return linear(p, prefix + ".o", attention(q, k, v, layout, s_.heads, causal));
  }

  // Gated combination of the layer input with the FFN of its prefix average.
  Var average_attention(const Params& p, const std::string& pre, Var h, Var avg) const {
    const int64_t d = s_.hidden;
    Var g = feed_forward(p, pre + ".aan.ffn", avg);
    const Var both[] = {h, g};
    Var gates = sigmoid(linear(p, pre + ".aan.gate", concat(both, 1)));
    return add(mul(slice(gates, 1, 0, d), h), mul(slice(gates, 1, d, 2 * d), g));
  }

  static Tensor append_step(const Tensor& cache, const Tensor& fresh, size_t rows, size_t t) {
    const int64_t d = fresh.cols();
    Tensor out({static_cast<int64_t>(rows * (t + 1)), d});
    for (size_t r = 0; r < rows; ++r) {
      if (t > 0) {
        std::copy_n(cache.row(static_cast<int64_t>(r * t)).data(), t * d, out.row(static_cast<int64_t>(r * (t + 1))).data());
      }
      std::copy_n(fresh.row(static_cast<int64_t>(r)).data(), d, out.row(static_cast<int64_t>(r * (t + 1) + t)).data());
    }
    return out;
  }

  ModelSpec s_;
};

}  // namespace

std::shared_ptr<const Architecture> make_transformer(const ModelSpec& spec) {
  return std::make_shared<Transformer>(spec);
}

}  // namespace nmtforge
