#pragma once

// Minimal neural core for the two sequence models: tensors are Eigen
// matrices, the BiLSTM stack and linear head are plain structs, and the
// backward pass is derived by hand for exactly this architecture.
//
// Batched sequence layout: a batch of B sequences padded to T steps is a
// d x (B*T) matrix whose columns [t*B, t*B+B) hold every item's frame t.
// Padded columns are forced to zero state each step, so short items see
// exactly the math they would see alone; padded frames never reach a loss.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "calldet/errors.hpp"
#include "calldet/rng.hpp"

namespace calldet {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Gate rows in every 4h-tall tensor: input, forget, cell, output.
struct LstmDirParams {
  MatrixXd w_in;   // 4h x d
  MatrixXd w_rec;  // 4h x h
  VectorXd bias;   // 4h
};

struct LstmLayerParams {
  LstmDirParams fwd;
  LstmDirParams bwd;
};

struct BiLstmStack {
  std::vector<LstmLayerParams> layers;
  int hidden_size = 16;  // per direction
  int input_size = 40;

  // 0 layers is a valid degenerate stack: latents are the inputs themselves
  // (used by the frame-independent logistic baseline).
  int output_size() const {
    return layers.empty() ? input_size : 2 * hidden_size;
  }
};

struct LinearHead {
  MatrixXd weights;  // out x in
  VectorXd bias;     // out
};

inline double sigmoid(double z) { return 0.5 * (1.0 + std::tanh(0.5 * z)); }

namespace nn_detail {

inline void check(bool ok, const char* msg) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, msg);
}

// Eigen vectorizes exp for double but not tanh or expm1, so the gate
// nonlinearities are built on exp directly. Both stay within a few ulp of
// the libm results (covered by a unit test), using one division each and a
// small-|x| polynomial branch for tanh to avoid the 1 - e^(-2x) cancellation.

// sigma(z): p = e^(-|z|), q = 1/(1+p); z >= 0 -> q, z < 0 -> p*q.
template <typename BlockA, typename BlockP, typename BlockQ>
void sigmoid_block(BlockA&& a, BlockP&& p, BlockQ&& q) {
  p = (-a.abs()).exp();
  q = 1.0 / (1.0 + p);
  a = (a >= 0.0).select(q, p * q);
}

// tanh(x): |x| >= 1/8 via (1-t)/(1+t), t = e^(-2|x|), as 2/(1+t) - 1;
// |x| < 1/8 via the odd Taylor polynomial through x^13.
template <typename BlockA, typename BlockP, typename BlockQ>
void tanh_block(BlockA&& a, BlockP&& p, BlockQ&& q) {
  p = (-2.0 * a.abs()).exp();
  p = 2.0 / (1.0 + p) - 1.0;
  q = a * a;
  a = (a.abs() < 0.125)
          .select(a * (1.0 +
                       q * (-1.0 / 3.0 +
                            q * (2.0 / 15.0 +
                                 q * (-17.0 / 315.0 +
                                      q * (62.0 / 2835.0 +
                                           q * (-1382.0 / 155925.0 +
                                                q * (21844.0 / 6081075.0))))))),
                  (a >= 0.0).select(p, -p));
}

}  // namespace nn_detail

inline LstmDirParams zeros_like(const LstmDirParams& p) {
  return {MatrixXd::Zero(p.w_in.rows(), p.w_in.cols()),
          MatrixXd::Zero(p.w_rec.rows(), p.w_rec.cols()),
          VectorXd::Zero(p.bias.size())};
}

inline BiLstmStack zeros_like(const BiLstmStack& s) {
  BiLstmStack g;
  g.hidden_size = s.hidden_size;
  g.input_size = s.input_size;
  for (const auto& l : s.layers)
    g.layers.push_back({zeros_like(l.fwd), zeros_like(l.bwd)});
  return g;
}

inline LinearHead zeros_like(const LinearHead& h) {
  return {MatrixXd::Zero(h.weights.rows(), h.weights.cols()),
          VectorXd::Zero(h.bias.size())};
}

// Uniform(+-1/sqrt(h)) weights, forget-gate bias 1, other biases 0.
inline LstmDirParams init_lstm_dir(int hidden, int input, Rng& rng) {
  LstmDirParams p;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  p.w_in.resize(4 * hidden, input);
  p.w_rec.resize(4 * hidden, hidden);
  for (Index j = 0; j < p.w_in.cols(); ++j)
    for (Index i = 0; i < p.w_in.rows(); ++i)
      p.w_in(i, j) = rng.uniform(-bound, bound);
  for (Index j = 0; j < p.w_rec.cols(); ++j)
    for (Index i = 0; i < p.w_rec.rows(); ++i)
      p.w_rec(i, j) = rng.uniform(-bound, bound);
  p.bias = VectorXd::Zero(4 * hidden);
  p.bias.segment(hidden, hidden).setOnes();
  return p;
}

inline BiLstmStack init_bilstm_stack(int layers, int hidden, int input, Rng& rng) {
  BiLstmStack s;
  s.hidden_size = hidden;
  s.input_size = input;
  for (int l = 0; l < layers; ++l) {
    const int d = (l == 0) ? input : 2 * hidden;
    s.layers.push_back({init_lstm_dir(hidden, d, rng), init_lstm_dir(hidden, d, rng)});
  }
  return s;
}

inline LinearHead init_linear_head(int out, int in, Rng& rng) {
  LinearHead h;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  h.weights.resize(out, in);
  for (Index j = 0; j < in; ++j)
    for (Index i = 0; i < out; ++i) h.weights(i, j) = rng.uniform(-bound, bound);
  h.bias = VectorXd::Zero(out);
  return h;
}

// ---------------------------------------------------------------------------
// Batched sequences

struct SeqBatch {
  Index t_max = 0;
  Index batch = 0;
  std::vector<Index> lengths;
  MatrixXd x;  // d x (batch * t_max)

  Index total_real_frames() const {
    Index n = 0;
    for (Index l : lengths) n += l;
    return n;
  }
};

// Pack row-major per-sequence feature matrices (T_i x d) into one batch.
inline SeqBatch make_seq_batch(const std::vector<const MatrixXd*>& seqs) {
  if (seqs.empty()) throw Error(ErrorCode::EmptyDataset, "empty batch");
  SeqBatch b;
  b.batch = static_cast<Index>(seqs.size());
  const Index d = seqs.front()->cols();
  for (const auto* s : seqs) {
    nn_detail::check(s->cols() == d, "inconsistent feature width in batch");
    nn_detail::check(s->rows() >= 1, "empty sequence in batch");
    b.lengths.push_back(s->rows());
    b.t_max = std::max(b.t_max, s->rows());
  }
  b.x = MatrixXd::Zero(d, b.batch * b.t_max);
  for (Index i = 0; i < b.batch; ++i)
    for (Index t = 0; t < seqs[i]->rows(); ++t)
      b.x.col(t * b.batch + i) = seqs[i]->row(t).transpose();
  return b;
}

struct LstmDirCache {
  MatrixXd gates;   // 4h x (B*T), post-activation
  MatrixXd cells;   // h x (B*T)
  MatrixXd tanh_c;  // h x (B*T)
};

namespace nn_detail {

inline void mask_short_block(double* col0, Index rows, Index batch, Index t,
                             const std::vector<Index>& lengths) {
  for (Index b = 0; b < batch; ++b)
    if (t >= lengths[b]) std::fill(col0 + b * rows, col0 + (b + 1) * rows, 0.0);
}

// The per-step cell update is memory- and exp-bound, so it runs as a fused
// kernel on Eigen's packet primitives (exp is packetized for double; tanh is
// not). Scalar twins below keep the same formulas for widths that do not
// fill a packet.

using DPacket = Eigen::internal::packet_traits<double>::type;
constexpr Index kDPacketSize = Eigen::internal::packet_traits<double>::size;

template <typename P>
EIGEN_STRONG_INLINE P packet_sigmoid(const P& z) {
  using namespace Eigen::internal;
  const P one = pset1<P>(1.0);
  const P p = pexp(pnegate(pabs(z)));
  const P q = pdiv(one, padd(one, p));
  return pselect(pcmp_le(pset1<P>(0.0), z), q, pmul(p, q));
}

template <typename P>
EIGEN_STRONG_INLINE P packet_tanh(const P& x) {
  using namespace Eigen::internal;
  const P one = pset1<P>(1.0);
  const P ax = pabs(x);
  const P t = pexp(pmul(pset1<P>(-2.0), ax));
  const P big = psub(pdiv(pset1<P>(2.0), padd(one, t)), one);
  const P x2 = pmul(x, x);
  P poly = pset1<P>(21844.0 / 6081075.0);
  poly = pmadd(poly, x2, pset1<P>(-1382.0 / 155925.0));
  poly = pmadd(poly, x2, pset1<P>(62.0 / 2835.0));
  poly = pmadd(poly, x2, pset1<P>(-17.0 / 315.0));
  poly = pmadd(poly, x2, pset1<P>(2.0 / 15.0));
  poly = pmadd(poly, x2, pset1<P>(-1.0 / 3.0));
  poly = pmadd(poly, x2, one);
  poly = pmul(poly, x);
  const P signed_big =
      pselect(pcmp_le(pset1<P>(0.0), x), big, pnegate(big));
  return pselect(pcmp_lt(ax, pset1<P>(0.125)), poly, signed_big);
}

inline double scalar_sigmoid(double z) {
  const double p = std::exp(-std::abs(z));
  const double q = 1.0 / (1.0 + p);
  return z >= 0.0 ? q : p * q;
}

inline double scalar_tanh(double x) {
  const double ax = std::abs(x);
  if (ax < 0.125) {
    const double x2 = x * x;
    double poly = 21844.0 / 6081075.0;
    poly = poly * x2 - 1382.0 / 155925.0;
    poly = poly * x2 + 62.0 / 2835.0;
    poly = poly * x2 - 17.0 / 315.0;
    poly = poly * x2 + 2.0 / 15.0;
    poly = poly * x2 - 1.0 / 3.0;
    poly = poly * x2 + 1.0;
    return poly * x;
  }
  const double t = std::exp(-2.0 * ax);
  const double big = 2.0 / (1.0 + t) - 1.0;
  return x >= 0.0 ? big : -big;
}

// Activations + cell update for one time step over a contiguous block of
// `batch` columns. g (4h tall) is overwritten pre- to post-activation;
// c_prev may be null at an entry step (state 0).
inline void fused_step_forward(double* g, const double* c_prev, double* c_out,
                               double* tc_out, double* h_out, Index h,
                               Index batch) {
  using namespace Eigen::internal;
  if (h % kDPacketSize == 0) {
    for (Index b = 0; b < batch; ++b) {
      double* gc = g + b * 4 * h;
      const double* cp = c_prev ? c_prev + b * h : nullptr;
      for (Index j = 0; j < h; j += kDPacketSize) {
        const DPacket si = packet_sigmoid(ploadu<DPacket>(gc + j));
        const DPacket sf = packet_sigmoid(ploadu<DPacket>(gc + h + j));
        const DPacket sg = packet_tanh(ploadu<DPacket>(gc + 2 * h + j));
        const DPacket so = packet_sigmoid(ploadu<DPacket>(gc + 3 * h + j));
        pstoreu(gc + j, si);
        pstoreu(gc + h + j, sf);
        pstoreu(gc + 2 * h + j, sg);
        pstoreu(gc + 3 * h + j, so);
        DPacket c = pmul(si, sg);
        if (cp) c = pmadd(sf, ploadu<DPacket>(cp + j), c);
        const DPacket tc = packet_tanh(c);
        pstoreu(c_out + b * h + j, c);
        pstoreu(tc_out + b * h + j, tc);
        pstoreu(h_out + b * h + j, pmul(so, tc));
      }
    }
    return;
  }
  for (Index b = 0; b < batch; ++b) {
    double* gc = g + b * 4 * h;
    const double* cp = c_prev ? c_prev + b * h : nullptr;
    for (Index j = 0; j < h; ++j) {
      const double si = scalar_sigmoid(gc[j]);
      const double sf = scalar_sigmoid(gc[h + j]);
      const double sg = scalar_tanh(gc[2 * h + j]);
      const double so = scalar_sigmoid(gc[3 * h + j]);
      gc[j] = si;
      gc[h + j] = sf;
      gc[2 * h + j] = sg;
      gc[3 * h + j] = so;
      const double c = si * sg + (cp ? sf * cp[j] : 0.0);
      const double tc = scalar_tanh(c);
      c_out[b * h + j] = c;
      tc_out[b * h + j] = tc;
      h_out[b * h + j] = so * tc;
    }
  }
}

// dz assembly for one step: reads post-activation gates, cached tanh(c) and
// the previous cell state, combines the upstream dh with the recurrent dh,
// and updates dc_rec in place. dh_out must be zero on padded columns (the
// losses guarantee that), which keeps every padded gradient at exactly zero
// without explicit masks.
inline void fused_step_backward(const double* g, const double* tc,
                                const double* c_prev, const double* dh_out,
                                const double* dh_rec, double* dc_rec,
                                double* dz, Index h, Index batch) {
  using namespace Eigen::internal;
  if (h % kDPacketSize == 0) {
    const DPacket one = pset1<DPacket>(1.0);
    for (Index b = 0; b < batch; ++b) {
      const double* gc = g + b * 4 * h;
      double* dzc = dz + b * 4 * h;
      const double* cp = c_prev ? c_prev + b * h : nullptr;
      for (Index j = 0; j < h; j += kDPacketSize) {
        const DPacket gi = ploadu<DPacket>(gc + j);
        const DPacket gf = ploadu<DPacket>(gc + h + j);
        const DPacket gg = ploadu<DPacket>(gc + 2 * h + j);
        const DPacket go = ploadu<DPacket>(gc + 3 * h + j);
        const DPacket tcv = ploadu<DPacket>(tc + b * h + j);
        const DPacket dh = padd(ploadu<DPacket>(dh_out + b * h + j),
                                ploadu<DPacket>(dh_rec + b * h + j));
        const DPacket dhgo = pmul(dh, go);
        const DPacket dc =
            pmadd(dhgo, psub(one, pmul(tcv, tcv)),
                  ploadu<DPacket>(dc_rec + b * h + j));
        pstoreu(dzc + j, pmul(pmul(dc, gg), pmul(gi, psub(one, gi))));
        if (cp)
          pstoreu(dzc + h + j, pmul(pmul(dc, ploadu<DPacket>(cp + j)),
                                    pmul(gf, psub(one, gf))));
        else
          pstoreu(dzc + h + j, pset1<DPacket>(0.0));
        pstoreu(dzc + 2 * h + j,
                pmul(pmul(dc, gi), psub(one, pmul(gg, gg))));
        pstoreu(dzc + 3 * h + j,
                pmul(pmul(dh, tcv), pmul(go, psub(one, go))));
        pstoreu(dc_rec + b * h + j, pmul(dc, gf));
      }
    }
    return;
  }
  for (Index b = 0; b < batch; ++b) {
    const double* gc = g + b * 4 * h;
    double* dzc = dz + b * 4 * h;
    const double* cp = c_prev ? c_prev + b * h : nullptr;
    for (Index j = 0; j < h; ++j) {
      const double gi = gc[j], gf = gc[h + j], gg = gc[2 * h + j],
                   go = gc[3 * h + j];
      const double tcv = tc[b * h + j];
      const double dh = dh_out[b * h + j] + dh_rec[b * h + j];
      const double dc = dh * go * (1.0 - tcv * tcv) + dc_rec[b * h + j];
      dzc[j] = dc * gg * gi * (1.0 - gi);
      dzc[h + j] = cp ? dc * cp[j] * gf * (1.0 - gf) : 0.0;
      dzc[2 * h + j] = dc * gi * (1.0 - gg * gg);
      dzc[3 * h + j] = dh * tcv * go * (1.0 - go);
      dc_rec[b * h + j] = dc * gf;
    }
  }
}

// One direction over the whole batch. h_out is h x (B*T) in original time
// order; cache may be null for inference. The running h state lives in
// h_out itself, the running c state in the cells buffer, so masked padding
// columns double as the zero entry state of shorter items.
inline void lstm_dir_forward(const LstmDirParams& p, const MatrixXd& x,
                             const std::vector<Index>& lengths, Index t_max,
                             Index batch, bool reverse, MatrixXd& h_out,
                             LstmDirCache* cache) {
  const Index h = p.w_rec.cols();
  check(p.w_in.cols() == x.rows(), "lstm input width mismatch");
  check(p.w_in.rows() == 4 * h && p.w_rec.rows() == 4 * h &&
            p.bias.size() == 4 * h,
        "lstm parameter shapes disagree");

  static thread_local MatrixXd tl_gates, tl_cells, tl_tanh_c;
  MatrixXd& gates = cache ? cache->gates : tl_gates;
  MatrixXd& cells = cache ? cache->cells : tl_cells;
  MatrixXd& tanh_c = cache ? cache->tanh_c : tl_tanh_c;
  gates.resize(4 * h, batch * t_max);
  cells.resize(h, batch * t_max);
  tanh_c.resize(h, cache ? batch * t_max : batch);
  h_out.resize(h, batch * t_max);

  gates.noalias() = p.w_in * x;  // whole-sequence input projection
  gates.colwise() += p.bias;

  bool padded = false;
  for (Index l : lengths) padded = padded || (l != t_max);

  for (Index s = 0; s < t_max; ++s) {
    const Index t = reverse ? t_max - 1 - s : s;
    const Index col0 = t * batch;
    const Index prev0 = (reverse ? t + 1 : t - 1) * batch;
    const double* c_prev = nullptr;
    if (s > 0) {
      gates.middleCols(col0, batch).noalias() +=
          p.w_rec * h_out.middleCols(prev0, batch);
      c_prev = cells.data() + prev0 * h;
    }
    fused_step_forward(gates.data() + col0 * 4 * h, c_prev,
                       cells.data() + col0 * h,
                       tanh_c.data() + (cache ? col0 * h : 0),
                       h_out.data() + col0 * h, h, batch);
    if (padded) {
      mask_short_block(h_out.data() + col0 * h, h, batch, t, lengths);
      mask_short_block(cells.data() + col0 * h, h, batch, t, lengths);
    }
  }
}

// Backward through one direction. Accumulates parameter grads; dx may be
// null when the input gradient is not needed (bottom layer). h_latents is
// the forward output of this direction (original time order).
inline void lstm_dir_backward(const LstmDirParams& p, const MatrixXd& x,
                              const MatrixXd& h_latents,
                              const LstmDirCache& cache, const MatrixXd& dh_out,
                              const std::vector<Index>& lengths, Index t_max,
                              Index batch, bool reverse, LstmDirParams& grads,
                              MatrixXd* dx) {
  const Index h = p.w_rec.cols();
  static thread_local MatrixXd tl_dz;
  MatrixXd& dz_all = tl_dz;
  dz_all.resize(4 * h, batch * t_max);
  MatrixXd dh_rec = MatrixXd::Zero(h, batch);
  MatrixXd dc_rec = MatrixXd::Zero(h, batch);

  bool padded = false;
  for (Index l : lengths) padded = padded || (l != t_max);

  for (Index s = t_max - 1; s >= 0; --s) {
    const Index t = reverse ? t_max - 1 - s : s;
    const Index col0 = t * batch;
    const Index prev_t = reverse ? t + 1 : t - 1;
    const double* c_prev =
        s > 0 ? cache.cells.data() + prev_t * batch * h : nullptr;
    fused_step_backward(cache.gates.data() + col0 * 4 * h,
                        cache.tanh_c.data() + col0 * h, c_prev,
                        dh_out.data() + col0 * h, dh_rec.data(), dc_rec.data(),
                        dz_all.data() + col0 * 4 * h, h, batch);
    if (padded) {
      // recurrent gradient arriving at a masked position dies there: the
      // forward pinned that state to the constant 0
      mask_short_block(dz_all.data() + col0 * 4 * h, 4 * h, batch, t, lengths);
      mask_short_block(dc_rec.data(), h, batch, t, lengths);
    }
    if (s > 0)
      dh_rec.noalias() = p.w_rec.transpose() * dz_all.middleCols(col0, batch);
  }

  // Hoisted weight-gradient GEMMs. The (dz_t, h_prev) pairing is a column
  // shift by one step block, so both factors are plain views; entry steps
  // pair real dz with masked zero latents and contribute nothing.
  grads.w_in.noalias() += dz_all * x.transpose();
  if (t_max > 1) {
    const Index n = batch * (t_max - 1);
    if (reverse)
      grads.w_rec.noalias() +=
          dz_all.leftCols(n) * h_latents.rightCols(n).transpose();
    else
      grads.w_rec.noalias() +=
          dz_all.rightCols(n) * h_latents.leftCols(n).transpose();
  }
  grads.bias += dz_all.rowwise().sum();
  if (dx) dx->noalias() += p.w_in.transpose() * dz_all;
}

}  // namespace nn_detail

// Per-layer activations kept for the backward pass.
struct StackCache {
  std::vector<MatrixXd> inputs;      // input to each layer, d_l x (B*T)
  std::vector<LstmDirCache> fwd;     // per layer
  std::vector<LstmDirCache> bwd;
  std::vector<MatrixXd> h_fwd;       // latents per layer, h x (B*T)
  std::vector<MatrixXd> h_bwd;
};

// Runs the stack over a batch; returns the last layer's (2h) x (B*T) latents
// (or the inputs themselves for an empty stack).
inline MatrixXd bilstm_stack_forward_batched(const BiLstmStack& stack,
                                             const SeqBatch& batch,
                                             StackCache* cache) {
  nn_detail::check(batch.x.rows() == stack.input_size,
                   "stack input width mismatch");
  const Index h = stack.hidden_size;
  MatrixXd cur = batch.x;
  if (cache) {
    const auto n = stack.layers.size();
    cache->inputs.resize(n);
    cache->fwd.resize(n);
    cache->bwd.resize(n);
    cache->h_fwd.resize(n);
    cache->h_bwd.resize(n);
  }
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    MatrixXd hf, hb;
    nn_detail::lstm_dir_forward(stack.layers[l].fwd, cur, batch.lengths,
                                batch.t_max, batch.batch, false, hf,
                                cache ? &cache->fwd[l] : nullptr);
    nn_detail::lstm_dir_forward(stack.layers[l].bwd, cur, batch.lengths,
                                batch.t_max, batch.batch, true, hb,
                                cache ? &cache->bwd[l] : nullptr);
    MatrixXd next(2 * h, cur.cols());
    next.topRows(h) = hf;
    next.bottomRows(h) = hb;
    if (cache) {
      cache->inputs[l] = std::move(cur);
      cache->h_fwd[l] = std::move(hf);
      cache->h_bwd[l] = std::move(hb);
    }
    cur = std::move(next);
  }
  return cur;
}

// Backpropagates d(loss)/d(latents) through the stack, accumulating into
// grads (which must be zeros_like(stack) on entry or hold prior sums).
inline void bilstm_stack_backward_batched(const BiLstmStack& stack,
                                          const SeqBatch& batch,
                                          const StackCache& cache,
                                          const MatrixXd& d_latents,
                                          BiLstmStack& grads) {
  const Index h = stack.hidden_size;
  MatrixXd d_out = d_latents;
  for (std::size_t li = stack.layers.size(); li-- > 0;) {
    MatrixXd d_in;
    MatrixXd* d_in_ptr = nullptr;
    if (li > 0) {
      d_in = MatrixXd::Zero(cache.inputs[li].rows(), cache.inputs[li].cols());
      d_in_ptr = &d_in;
    }
    nn_detail::lstm_dir_backward(stack.layers[li].fwd, cache.inputs[li],
                                 cache.h_fwd[li], cache.fwd[li],
                                 d_out.topRows(h), batch.lengths, batch.t_max,
                                 batch.batch, false, grads.layers[li].fwd,
                                 d_in_ptr);
    nn_detail::lstm_dir_backward(stack.layers[li].bwd, cache.inputs[li],
                                 cache.h_bwd[li], cache.bwd[li],
                                 d_out.bottomRows(h), batch.lengths,
                                 batch.t_max, batch.batch, true,
                                 grads.layers[li].bwd, d_in_ptr);
    if (li > 0) d_out = std::move(d_in);
  }
}

// ---------------------------------------------------------------------------
// Spec-level single-sequence operations (row-major T x d views)

inline MatrixXd lstm_direction_forward(const LstmDirParams& params,
                                       const MatrixXd& inputs, bool reverse) {
  nn_detail::check(params.w_in.cols() == inputs.cols(),
                   "input width does not match w_in");
  const Index t = inputs.rows();
  SeqBatch b;
  b.t_max = t;
  b.batch = 1;
  b.lengths = {t};
  b.x = inputs.transpose();
  MatrixXd h_out;
  nn_detail::lstm_dir_forward(params, b.x, b.lengths, t, 1, reverse, h_out,
                              nullptr);
  return h_out.transpose();
}

inline MatrixXd bilstm_stack_forward(const BiLstmStack& stack,
                                     const MatrixXd& features) {
  SeqBatch b;
  b.t_max = features.rows();
  b.batch = 1;
  b.lengths = {features.rows()};
  b.x = features.transpose();
  return bilstm_stack_forward_batched(stack, b, nullptr).transpose();
}

inline MatrixXd linear_forward(const LinearHead& head, const MatrixXd& latents) {
  nn_detail::check(head.weights.cols() == latents.cols(),
                   "head input width mismatch");
  MatrixXd z = head.weights * latents.transpose();
  z.colwise() += head.bias;
  return z.transpose();
}

// ---------------------------------------------------------------------------
// Losses

struct LossGrad {
  double loss = 0.0;
  VectorXd grad;
};

// Mean over frames of the stable logit-form binary cross entropy;
// grad = (sigmoid(z) - y) / T.
inline LossGrad bce_loss(const VectorXd& logits, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(logits.size()) != labels.size())
    throw Error(ErrorCode::LengthMismatch, "logits vs labels");
  if (logits.size() == 0) throw Error(ErrorCode::Empty, "no frames");
  const double n = static_cast<double>(logits.size());
  LossGrad out;
  out.grad.resize(logits.size());
  for (Index t = 0; t < logits.size(); ++t) {
    const double z = logits[t];
    const double y = static_cast<double>(labels[t]);
    out.loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    out.grad[t] = (sigmoid(z) - y) / n;
  }
  out.loss /= n;
  return out;
}

// -log softmax(logits)[label], log-sum-exp stabilized; grad = softmax - onehot.
inline LossGrad cross_entropy_loss(const VectorXd& logits, int label) {
  if (logits.size() < 2) throw Error(ErrorCode::BadLabel, "need K >= 2 classes");
  if (label < 0 || label >= logits.size())
    throw Error(ErrorCode::BadLabel, "label out of range");
  const double m = logits.maxCoeff();
  const VectorXd shifted = (logits.array() - m).exp();
  const double z = shifted.sum();
  LossGrad out;
  out.loss = std::log(z) - (logits[label] - m);
  out.grad = shifted / z;
  out.grad[label] -= 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Full-model losses (forward + hand-derived backward)

struct SequenceModelGrads {
  BiLstmStack stack;
  LinearHead head;
};

// BCE over every real frame of the batch (global frame mean). Labels are one
// vector of 0/1 per item. Returns per-frame probabilities for callers that
// also want metrics.
struct BinarySeqResult {
  double loss = 0.0;
  MatrixXd probs;  // 1 x (B*T), padded cols zero
};

inline BinarySeqResult binary_sequence_loss(
    const BiLstmStack& stack, const LinearHead& head, const SeqBatch& batch,
    const std::vector<std::vector<int>>& labels, SequenceModelGrads* grads) {
  nn_detail::check(head.weights.rows() == 1, "binary head must have out = 1");
  nn_detail::check(head.weights.cols() == stack.output_size(),
                   "head input width != stack output width");
  nn_detail::check(static_cast<Index>(labels.size()) == batch.batch,
                   "labels vs batch size");
  StackCache cache;
  const MatrixXd latents =
      bilstm_stack_forward_batched(stack, batch, grads ? &cache : nullptr);
  MatrixXd logits = head.weights * latents;  // 1 x (B*T)
  logits.array() += head.bias[0];

  const double n_real = static_cast<double>(batch.total_real_frames());
  BinarySeqResult res;
  res.probs = MatrixXd::Zero(1, logits.cols());
  MatrixXd dlogits = MatrixXd::Zero(1, logits.cols());
  for (Index b = 0; b < batch.batch; ++b) {
    nn_detail::check(static_cast<Index>(labels[b].size()) == batch.lengths[b],
                     "label length != sequence length");
    for (Index t = 0; t < batch.lengths[b]; ++t) {
      const Index c = t * batch.batch + b;
      const double z = logits(0, c);
      const double y = static_cast<double>(labels[b][t]);
      res.loss +=
          std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      const double p = sigmoid(z);
      res.probs(0, c) = p;
      dlogits(0, c) = (p - y) / n_real;
    }
  }
  res.loss /= n_real;

  if (grads) {
    grads->head.weights.noalias() += dlogits * latents.transpose();
    grads->head.bias[0] += dlogits.sum();
    MatrixXd d_latents = head.weights.transpose() * dlogits;
    bilstm_stack_backward_batched(stack, batch, cache, d_latents, grads->stack);
  }
  return res;
}

// Cross entropy on mean-pooled latents, one label per item; loss is the mean
// over items. Pooling averages each item's real frames only.
struct PooledClassResult {
  double loss = 0.0;
  MatrixXd probs;  // K x B softmax columns
};

inline PooledClassResult pooled_class_loss(const BiLstmStack& stack,
                                           const LinearHead& head,
                                           const SeqBatch& batch,
                                           const std::vector<int>& labels,
                                           SequenceModelGrads* grads) {
  const Index k = head.weights.rows();
  nn_detail::check(k >= 2, "classifier head needs K >= 2");
  nn_detail::check(head.weights.cols() == stack.output_size(),
                   "head input width != stack output width");
  nn_detail::check(static_cast<Index>(labels.size()) == batch.batch,
                   "labels vs batch size");
  StackCache cache;
  const MatrixXd latents =
      bilstm_stack_forward_batched(stack, batch, grads ? &cache : nullptr);

  const Index width = stack.output_size();
  MatrixXd pooled = MatrixXd::Zero(width, batch.batch);
  for (Index t = 0; t < batch.t_max; ++t)
    for (Index b = 0; b < batch.batch; ++b)
      if (t < batch.lengths[b]) pooled.col(b) += latents.col(t * batch.batch + b);
  for (Index b = 0; b < batch.batch; ++b)
    pooled.col(b) /= static_cast<double>(batch.lengths[b]);

  MatrixXd logits = head.weights * pooled;
  logits.colwise() += head.bias;

  PooledClassResult res;
  res.probs.resize(k, batch.batch);
  MatrixXd dlogits(k, batch.batch);
  const double inv_b = 1.0 / static_cast<double>(batch.batch);
  for (Index b = 0; b < batch.batch; ++b) {
    const LossGrad lg = cross_entropy_loss(logits.col(b), labels[b]);
    res.loss += lg.loss * inv_b;
    res.probs.col(b) = lg.grad;  // softmax - onehot; fix up below
    res.probs(labels[b], b) += 1.0;
    dlogits.col(b) = lg.grad * inv_b;
  }

  if (grads) {
    grads->head.weights.noalias() += dlogits * pooled.transpose();
    grads->head.bias += dlogits.rowwise().sum();
    const MatrixXd d_pooled = head.weights.transpose() * dlogits;
    MatrixXd d_latents = MatrixXd::Zero(width, latents.cols());
    for (Index t = 0; t < batch.t_max; ++t)
      for (Index b = 0; b < batch.batch; ++b)
        if (t < batch.lengths[b])
          d_latents.col(t * batch.batch + b) =
              d_pooled.col(b) / static_cast<double>(batch.lengths[b]);
    bilstm_stack_backward_batched(stack, batch, cache, d_latents, grads->stack);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Parameter views, Adam, gradient checking

struct ParamView {
  double* data;
  Index size;
};

inline void collect_views(LstmDirParams& p, std::vector<ParamView>& out) {
  out.push_back({p.w_in.data(), p.w_in.size()});
  out.push_back({p.w_rec.data(), p.w_rec.size()});
  out.push_back({p.bias.data(), p.bias.size()});
}

inline std::vector<ParamView> param_views(BiLstmStack& stack, LinearHead& head) {
  std::vector<ParamView> v;
  for (auto& l : stack.layers) {
    collect_views(l.fwd, v);
    collect_views(l.bwd, v);
  }
  v.push_back({head.weights.data(), head.weights.size()});
  v.push_back({head.bias.data(), head.bias.size()});
  return v;
}

inline Index total_size(const std::vector<ParamView>& views) {
  Index n = 0;
  for (const auto& v : views) n += v.size;
  return n;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 5.0;
};

struct AdamState {
  long step = 0;
  VectorXd m;
  VectorXd v;
  AdamConfig cfg;
};

// Standard Adam with bias correction, applied after global gradient-norm
// clipping. The caller's gradients are not modified.
inline void adam_step(const std::vector<ParamView>& params,
                      const std::vector<ParamView>& grads, AdamState& state) {
  if (params.size() != grads.size())
    throw Error(ErrorCode::ShapeMismatch, "params vs grads view count");
  const Index n = total_size(params);
  if (total_size(grads) != n)
    throw Error(ErrorCode::ShapeMismatch, "params vs grads total size");
  if (state.m.size() == 0) {
    state.m = VectorXd::Zero(n);
    state.v = VectorXd::Zero(n);
  } else if (state.m.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, "Adam state size mismatch");
  }

  double sq = 0.0;
  for (const auto& g : grads)
    for (Index i = 0; i < g.size; ++i) sq += g.data[i] * g.data[i];
  const double norm = std::sqrt(sq);
  const double scale =
      (norm > state.cfg.clip_norm && norm > 0.0) ? state.cfg.clip_norm / norm : 1.0;

  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.cfg.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.cfg.beta2, state.step);
  Index off = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size != grads[k].size)
      throw Error(ErrorCode::ShapeMismatch, "view size mismatch");
    for (Index i = 0; i < params[k].size; ++i, ++off) {
      const double g = grads[k].data[i] * scale;
      state.m[off] = state.cfg.beta1 * state.m[off] + (1.0 - state.cfg.beta1) * g;
      state.v[off] = state.cfg.beta2 * state.v[off] + (1.0 - state.cfg.beta2) * g * g;
      const double mhat = state.m[off] / bc1;
      const double vhat = state.v[off] / bc2;
      params[k].data[i] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.epsilon);
    }
  }
}

// Central-difference check: for each scalar parameter, compare the analytic
// gradient against (L(th+eps) - L(th-eps)) / 2eps. loss_fn must recompute the
// full forward loss at the current parameter values.
inline double grad_check(const std::vector<ParamView>& params,
                         const std::vector<ParamView>& analytic,
                         const std::function<double()>& loss_fn,
                         double epsilon) {
  if (epsilon <= 0.0)
    throw Error(ErrorCode::BadArgument, "epsilon must be positive");
  if (params.size() != analytic.size())
    throw Error(ErrorCode::ShapeMismatch, "params vs analytic view count");
  double max_rel = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Index i = 0; i < params[k].size; ++i) {
      double& th = params[k].data[i];
      const double saved = th;
      th = saved + epsilon;
      const double lp = loss_fn();
      th = saved - epsilon;
      const double lm = loss_fn();
      th = saved;
      const double numeric = (lp - lm) / (2.0 * epsilon);
      const double a = analytic[k].data[i];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

namespace nn_detail {

template <typename S>
S ref_sigmoid(S z) {
  const S p = std::exp(z < S(0) ? z : -z);
  const S q = S(1) / (S(1) + p);
  return z >= S(0) ? q : p * q;
}

// Scalar per-item stack forward on an arbitrary scalar type. Returns the
// top-layer latents for item b, real frames only (len rows of 2h values,
// or d values for an empty stack).
template <typename S>
std::vector<std::vector<S>> ref_item_latents(const BiLstmStack& stack,
                                             const SeqBatch& batch, Index b) {
  const Index len = batch.lengths[static_cast<std::size_t>(b)];
  const Index d = batch.x.rows();
  std::vector<std::vector<S>> cur(static_cast<std::size_t>(len));
  for (Index t = 0; t < len; ++t) {
    auto& row = cur[static_cast<std::size_t>(t)];
    row.resize(static_cast<std::size_t>(d));
    for (Index j = 0; j < d; ++j)
      row[static_cast<std::size_t>(j)] = S(batch.x(j, t * batch.batch + b));
  }
  const Index h = stack.hidden_size;
  for (const auto& layer : stack.layers) {
    std::vector<std::vector<S>> next(
        static_cast<std::size_t>(len),
        std::vector<S>(static_cast<std::size_t>(2 * h)));
    for (int dir = 0; dir < 2; ++dir) {
      const LstmDirParams& p = dir == 0 ? layer.fwd : layer.bwd;
      std::vector<S> hs(static_cast<std::size_t>(h), S(0));
      std::vector<S> cs(static_cast<std::size_t>(h), S(0));
      std::vector<S> hnew(static_cast<std::size_t>(h));
      for (Index s = 0; s < len; ++s) {
        const Index t = dir == 0 ? s : len - 1 - s;
        const auto& x = cur[static_cast<std::size_t>(t)];
        for (Index j = 0; j < h; ++j) {
          S zi = S(p.bias[j]);
          S zf = S(p.bias[h + j]);
          S zg = S(p.bias[2 * h + j]);
          S zo = S(p.bias[3 * h + j]);
          for (std::size_t k = 0; k < x.size(); ++k) {
            const Index ki = static_cast<Index>(k);
            const S xv = x[k];
            zi += S(p.w_in(j, ki)) * xv;
            zf += S(p.w_in(h + j, ki)) * xv;
            zg += S(p.w_in(2 * h + j, ki)) * xv;
            zo += S(p.w_in(3 * h + j, ki)) * xv;
          }
          for (Index k = 0; k < h; ++k) {
            const S hp = hs[static_cast<std::size_t>(k)];
            zi += S(p.w_rec(j, k)) * hp;
            zf += S(p.w_rec(h + j, k)) * hp;
            zg += S(p.w_rec(2 * h + j, k)) * hp;
            zo += S(p.w_rec(3 * h + j, k)) * hp;
          }
          auto& cj = cs[static_cast<std::size_t>(j)];
          cj = ref_sigmoid(zf) * cj + ref_sigmoid(zi) * std::tanh(zg);
          hnew[static_cast<std::size_t>(j)] = ref_sigmoid(zo) * std::tanh(cj);
          next[static_cast<std::size_t>(t)]
              [static_cast<std::size_t>(dir * h + j)] =
                  hnew[static_cast<std::size_t>(j)];
        }
        hs = hnew;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

template <typename S>
S ref_detector_loss(const BiLstmStack& stack, const LinearHead& head,
                    const SeqBatch& batch,
                    const std::vector<std::vector<int>>& labels) {
  S sum = S(0);
  Index total = 0;
  for (Index b = 0; b < batch.batch; ++b) {
    const auto lat = ref_item_latents<S>(stack, batch, b);
    for (std::size_t t = 0; t < lat.size(); ++t) {
      S z = S(head.bias[0]);
      for (std::size_t j = 0; j < lat[t].size(); ++j)
        z += S(head.weights(0, static_cast<Index>(j))) * lat[t][j];
      const S y = S(labels[static_cast<std::size_t>(b)][t]);
      const S az = z < S(0) ? -z : z;
      sum += (z > S(0) ? z : S(0)) - z * y + std::log1p(std::exp(-az));
      ++total;
    }
  }
  return sum / S(total);
}

template <typename S>
S ref_classifier_loss(const BiLstmStack& stack, const LinearHead& head,
                      const SeqBatch& batch, const std::vector<int>& labels) {
  S sum = S(0);
  for (Index b = 0; b < batch.batch; ++b) {
    const auto lat = ref_item_latents<S>(stack, batch, b);
    const std::size_t width = lat.front().size();
    std::vector<S> pooled(width, S(0));
    for (const auto& row : lat)
      for (std::size_t j = 0; j < width; ++j) pooled[j] += row[j];
    for (auto& v : pooled) v /= S(lat.size());
    const Index kk = head.weights.rows();
    std::vector<S> logits(static_cast<std::size_t>(kk));
    S m = -std::numeric_limits<S>::infinity();
    for (Index c = 0; c < kk; ++c) {
      S z = S(head.bias[c]);
      for (std::size_t j = 0; j < width; ++j)
        z += S(head.weights(c, static_cast<Index>(j))) * pooled[j];
      logits[static_cast<std::size_t>(c)] = z;
      m = std::max(m, z);
    }
    S acc = S(0);
    for (const S z : logits) acc += std::exp(z - m);
    const S lse = m + std::log(acc);
    sum += lse - logits[static_cast<std::size_t>(
                     labels[static_cast<std::size_t>(b)])];
  }
  return sum / S(batch.batch);
}

// Two-point f64 screen per parameter; entries near the loss's own rounding
// floor are re-estimated with a fourth-order central stencil (same step) on
// the extended-precision reference forward before the final comparison.
template <typename LossFn, typename RefFn>
double hybrid_grad_check(BiLstmStack& stack, LinearHead& head, double epsilon,
                         LossFn&& loss, RefFn&& ref) {
  if (epsilon <= 0.0)
    throw Error(ErrorCode::BadArgument, "epsilon must be positive");
  SequenceModelGrads grads{zeros_like(stack), zeros_like(head)};
  loss(&grads);
  auto pv = param_views(stack, head);
  auto gv = param_views(grads.stack, grads.head);
  const auto rel_err = [](double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
  };
  double max_rel = 0.0;
  for (std::size_t k = 0; k < pv.size(); ++k) {
    for (Index i = 0; i < pv[k].size; ++i) {
      double& th = pv[k].data[i];
      const double saved = th;
      th = saved + epsilon;
      const double lp = loss(nullptr);
      th = saved - epsilon;
      const double lm = loss(nullptr);
      th = saved;
      const double a = gv[k].data[i];
      double n = (lp - lm) / (2.0 * epsilon);
      double rel = rel_err(a, n);
      if (rel >= 1e-6) {
        const auto at = [&](double d) {
          th = saved + d;
          const long double v = ref();
          th = saved;
          return v;
        };
        const long double e = epsilon;
        const long double n4 = (-at(2.0 * epsilon) + 8.0L * at(epsilon) -
                                8.0L * at(-epsilon) + at(-2.0 * epsilon)) /
                               (12.0L * e);
        n = static_cast<double>(n4);
        rel = rel_err(a, n);
      }
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace nn_detail

// Full-model gradient checks against central finite differences; the
// detector flavour takes per-frame 0/1 labels, the classifier flavour one
// class label per item. Models are checked on copies.
inline double grad_check(const BiLstmStack& stack0, const LinearHead& head0,
                         const SeqBatch& batch,
                         const std::vector<std::vector<int>>& frame_labels,
                         double epsilon) {
  BiLstmStack stack = stack0;
  LinearHead head = head0;
  return nn_detail::hybrid_grad_check(
      stack, head, epsilon,
      [&](SequenceModelGrads* g) {
        return binary_sequence_loss(stack, head, batch, frame_labels, g).loss;
      },
      [&] {
        return nn_detail::ref_detector_loss<long double>(stack, head, batch,
                                                         frame_labels);
      });
}

inline double grad_check(const BiLstmStack& stack0, const LinearHead& head0,
                         const SeqBatch& batch,
                         const std::vector<int>& class_labels, double epsilon) {
  BiLstmStack stack = stack0;
  LinearHead head = head0;
  return nn_detail::hybrid_grad_check(
      stack, head, epsilon,
      [&](SequenceModelGrads* g) {
        return pooled_class_loss(stack, head, batch, class_labels, g).loss;
      },
      [&] {
        return nn_detail::ref_classifier_loss<long double>(stack, head, batch,
                                                           class_labels);
      });
}

}  // namespace calldet
