// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "nmtforge/numerics/graph.h"

namespace nmtforge {

// Differentiable operations. Every op reads its inputs as matrices and records
// a node with its gradient rule on the inputs' graph.
//
// Binary elementwise ops broadcast when one operand has a single row
// (row vector) or a single column (column vector) matching the other's size.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real factor);
// factor * a + shift
Var affine(Var a, Real factor, Real shift);

// axis 0 stacks rows, axis 1 stacks columns.
Var concat(std::span<const Var> parts, int axis);
Var slice(Var a, int axis, int64_t begin, int64_t end);
Var transpose(Var a);
// Row gather; indices may repeat.
Var gather_rows(Var a, std::span<const int64_t> rows);
Var embedding_lookup(Var table, std::span<const int> ids);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);

// Row-wise.
Var softmax(Var a);
Var log_softmax(Var a);
Var layer_norm(Var x, Var gain, Var bias, Real eps = 1e-6);

Var sum(Var a);
Var mean(Var a);

// Mean over rows of -log probs[r, targets[r]]; probs rows are distributions.
Var cross_entropy(Var probs, std::span<const int> targets);
// Fused log-softmax + cross entropy with uniform label smoothing, averaged
// over rows.
Var softmax_cross_entropy(Var logits, std::span<const int> targets, Real smoothing = 0.0);
// Column of log-softmax(logits)[r, targets[r]].
Var token_log_probs(Var logits, std::span<const int> targets);

// Sums consecutive row blocks: rows [offsets[s], offsets[s+1]) -> output row s.
Var segment_sum(Var a, std::span<const int64_t> offsets);
// Running mean over rows within each segment; empty offsets = one segment.
Var cumulative_mean(Var x, std::span<const int64_t> offsets = {});

// Segment layout of a batched attention call: query rows [q[s], q[s+1]) attend
// to key rows [k[s], k[s+1]). When k_end is set, k holds one begin per segment
// and the key rows are [k[s], k_end[s]); ranges may then overlap, which lets
// several query segments share one encoder memory.
struct AttentionLayout {
  std::vector<int64_t> q;
  std::vector<int64_t> k;
  std::vector<int64_t> k_end;

  size_t segments() const { return q.empty() ? 0 : q.size() - 1; }
  int64_t key_begin(size_t s) const { return k[s]; }
  int64_t key_end(size_t s) const { return k_end.empty() ? k[s + 1] : k_end[s]; }
  // Each segment has equal-length queries and keys (self-attention).
  static AttentionLayout self(std::span<const int64_t> offsets);
};

// Scaled dot-product multi-head attention. With causal set, query i of a
// segment sees keys j <= i + (klen - qlen). When weights is non-null it
// receives one (qlen x klen) tensor per segment per head.
Var attention(Var q, Var k, Var v, const AttentionLayout& layout, int heads, bool causal,
              std::vector<Tensor>* weights = nullptr);

}  // namespace nmtforge
