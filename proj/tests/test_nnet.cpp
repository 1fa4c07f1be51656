#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "calldet/nnet.hpp"
#include "calldet/rng.hpp"
#include "helpers.hpp"

using namespace calldet;

namespace {

// ---------------------------------------------------------------------------
// Independent scalar references, written with plain loops and libm.

long double ref_sig(long double z) { return 1.0L / (1.0L + std::exp(-z)); }

// One LSTM direction over a T x d sequence, gate rows stacked i, f, g, o.
Eigen::MatrixXd ref_lstm_dir(const LstmDirParams& p, const Eigen::MatrixXd& x,
                             bool reverse) {
  const Eigen::Index t_len = x.rows();
  const Eigen::Index h = p.w_rec.cols();
  const Eigen::Index d = x.cols();
  std::vector<long double> hs(h, 0.0L), cs(h, 0.0L);
  Eigen::MatrixXd out(t_len, h);
  for (Eigen::Index step = 0; step < t_len; ++step) {
    const Eigen::Index t = reverse ? t_len - 1 - step : step;
    std::vector<long double> z(4 * h, 0.0L);
    for (Eigen::Index r = 0; r < 4 * h; ++r) {
      long double acc = p.bias[r];
      for (Eigen::Index j = 0; j < d; ++j) acc += (long double)p.w_in(r, j) * x(t, j);
      for (Eigen::Index j = 0; j < h; ++j) acc += (long double)p.w_rec(r, j) * hs[j];
      z[r] = acc;
    }
    std::vector<long double> hn(h), cn(h);
    for (Eigen::Index k = 0; k < h; ++k) {
      const long double i = ref_sig(z[k]);
      const long double f = ref_sig(z[h + k]);
      const long double g = std::tanh(z[2 * h + k]);
      const long double o = ref_sig(z[3 * h + k]);
      cn[k] = f * cs[k] + i * g;
      hn[k] = o * std::tanh(cn[k]);
    }
    hs = hn;
    cs = cn;
    for (Eigen::Index k = 0; k < h; ++k) out(t, k) = (double)hs[k];
  }
  return out;
}

Eigen::MatrixXd ref_stack(const BiLstmStack& stack, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd cur = x;
  for (const auto& layer : stack.layers) {
    Eigen::MatrixXd nf = ref_lstm_dir(layer.fwd, cur, false);
    Eigen::MatrixXd nb = ref_lstm_dir(layer.bwd, cur, true);
    Eigen::MatrixXd next(cur.rows(), nf.cols() + nb.cols());
    next << nf, nb;
    cur = std::move(next);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Forward-mode dual numbers in long double: an exact-derivative oracle that
// shares no code with the backward pass.

struct Dual {
  long double v = 0.0L;
  long double d = 0.0L;
};

Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
Dual operator*(long double s, Dual a) { return {s * a.v, s * a.d}; }
Dual operator/(Dual a, long double s) { return {a.v / s, a.d / s}; }
Dual dual_exp(Dual a) {
  const long double e = std::exp(a.v);
  return {e, e * a.d};
}
Dual dual_tanh(Dual a) {
  const long double t = std::tanh(a.v);
  return {t, (1.0L - t * t) * a.d};
}
Dual dual_sig(Dual a) {
  const long double s = 1.0L / (1.0L + std::exp(-a.v));
  return {s, s * (1.0L - s) * a.d};
}
Dual dual_log(Dual a) { return {std::log(a.v), a.d / a.v}; }

// Reads model parameters as duals, with the derivative seed on one flat
// parameter index. Flat order matches param_views.
struct DualModel {
  const BiLstmStack* stack;
  const LinearHead* head;
  Eigen::Index seed = -1;

  mutable Eigen::Index cursor = 0;
  Dual at(double v) const {
    Dual out{(long double)v, cursor == seed ? 1.0L : 0.0L};
    ++cursor;
    return out;
  }
};

// Mirrors the column-major flat order of param_views over one direction.
std::vector<Dual> dual_dir_params(const DualModel& m, const LstmDirParams& p) {
  std::vector<Dual> flat;
  flat.reserve(p.w_in.size() + p.w_rec.size() + p.bias.size());
  for (Eigen::Index i = 0; i < p.w_in.size(); ++i) flat.push_back(m.at(p.w_in.data()[i]));
  for (Eigen::Index i = 0; i < p.w_rec.size(); ++i) flat.push_back(m.at(p.w_rec.data()[i]));
  for (Eigen::Index i = 0; i < p.bias.size(); ++i) flat.push_back(m.at(p.bias.data()[i]));
  return flat;
}

std::vector<std::vector<Dual>> dual_item_latents(
    const DualModel& m, const std::vector<std::vector<std::vector<Dual>>>& params,
    const Eigen::MatrixXd& x) {
  const Eigen::Index h = m.stack->hidden_size;
  const Eigen::Index t_len = x.rows();
  std::vector<std::vector<Dual>> cur(t_len);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    cur[t].resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) cur[t][j] = {(long double)x(t, j), 0.0L};
  }
  for (std::size_t li = 0; li < m.stack->layers.size(); ++li) {
    const Eigen::Index d = (Eigen::Index)cur[0].size();
    std::vector<std::vector<Dual>> next(t_len, std::vector<Dual>(2 * h));
    for (int dir = 0; dir < 2; ++dir) {
      const std::vector<Dual>& f = params[li][dir];
      // f layout: w_in (4h x d col-major), w_rec (4h x h), bias (4h)
      auto w_in = [&](Eigen::Index r, Eigen::Index c) { return f[c * 4 * h + r]; };
      auto w_rec = [&](Eigen::Index r, Eigen::Index c) {
        return f[4 * h * d + c * 4 * h + r];
      };
      auto bias = [&](Eigen::Index r) { return f[4 * h * d + 4 * h * h + r]; };
      std::vector<Dual> hs(h), cs(h);
      for (Eigen::Index step = 0; step < t_len; ++step) {
        const Eigen::Index t = dir == 0 ? step : t_len - 1 - step;
        std::vector<Dual> z(4 * h);
        for (Eigen::Index r = 0; r < 4 * h; ++r) {
          Dual acc = bias(r);
          for (Eigen::Index j = 0; j < d; ++j) acc = acc + w_in(r, j) * cur[t][j];
          for (Eigen::Index j = 0; j < h; ++j) acc = acc + w_rec(r, j) * hs[j];
          z[r] = acc;
        }
        std::vector<Dual> hn(h), cn(h);
        for (Eigen::Index k = 0; k < h; ++k) {
          const Dual i = dual_sig(z[k]);
          const Dual fg = dual_sig(z[h + k]);
          const Dual g = dual_tanh(z[2 * h + k]);
          const Dual o = dual_sig(z[3 * h + k]);
          cn[k] = fg * cs[k] + i * g;
          hn[k] = o * dual_tanh(cn[k]);
        }
        hs = hn;
        cs = cn;
        for (Eigen::Index k = 0; k < h; ++k) next[t][dir * h + k] = hs[k];
      }
    }
    cur = std::move(next);
  }
  return cur;
}

struct DualSetup {
  std::vector<std::vector<std::vector<Dual>>> stack_params;  // [layer][dir]
  std::vector<Dual> head_w;  // col-major
  std::vector<Dual> head_b;
};

DualSetup dual_params(const DualModel& m) {
  DualSetup s;
  for (const auto& layer : m.stack->layers)
    s.stack_params.push_back(
        {dual_dir_params(m, layer.fwd), dual_dir_params(m, layer.bwd)});
  for (Eigen::Index i = 0; i < m.head->weights.size(); ++i)
    s.head_w.push_back(m.at(m.head->weights.data()[i]));
  for (Eigen::Index i = 0; i < m.head->bias.size(); ++i)
    s.head_b.push_back(m.at(m.head->bias.data()[i]));
  return s;
}

// Global frame-mean BCE of the detector on raw per-item sequences.
long double dual_detector_loss(const BiLstmStack& stack, const LinearHead& head,
                               const std::vector<Eigen::MatrixXd>& items,
                               const std::vector<std::vector<int>>& labels,
                               Eigen::Index seed, long double* val = nullptr) {
  DualModel m{&stack, &head, seed};
  const DualSetup s = dual_params(m);
  const Eigen::Index width = stack.output_size();
  Dual total{0.0L, 0.0L};
  long long frames = 0;
  for (std::size_t b = 0; b < items.size(); ++b) {
    auto lat = dual_item_latents(m, s.stack_params, items[b]);
    for (std::size_t t = 0; t < lat.size(); ++t) {
      Dual z = s.head_b[0];
      for (Eigen::Index j = 0; j < width; ++j)
        z = z + s.head_w[j] * lat[t][j];  // head is 1 x width, col-major
      const Dual p = dual_sig(z);
      const Dual q = Dual{1.0L, 0.0L} - p;
      total = total + (labels[b][t] ? Dual{0.0L, 0.0L} - dual_log(p)
                                    : Dual{0.0L, 0.0L} - dual_log(q));
      ++frames;
    }
  }
  total = total / (long double)frames;
  if (val) *val = total.v;
  return total.d;
}

long double dual_classifier_loss(const BiLstmStack& stack,
                                 const LinearHead& head,
                                 const std::vector<Eigen::MatrixXd>& items,
                                 const std::vector<int>& labels,
                                 Eigen::Index seed) {
  DualModel m{&stack, &head, seed};
  const DualSetup s = dual_params(m);
  const Eigen::Index width = stack.output_size();
  const Eigen::Index k = head.weights.rows();
  Dual total{0.0L, 0.0L};
  for (std::size_t b = 0; b < items.size(); ++b) {
    auto lat = dual_item_latents(m, s.stack_params, items[b]);
    std::vector<Dual> pooled(width, Dual{0.0L, 0.0L});
    for (const auto& row : lat)
      for (Eigen::Index j = 0; j < width; ++j) pooled[j] = pooled[j] + row[j];
    for (Eigen::Index j = 0; j < width; ++j)
      pooled[j] = pooled[j] / (long double)lat.size();
    std::vector<Dual> logits(k);
    for (Eigen::Index r = 0; r < k; ++r) {
      Dual z = s.head_b[r];
      for (Eigen::Index j = 0; j < width; ++j)
        z = z + s.head_w[j * k + r] * pooled[j];
      logits[r] = z;
    }
    Dual lse{0.0L, 0.0L};
    long double mx = logits[0].v;
    for (const Dual& l : logits) mx = std::max(mx, l.v);
    for (const Dual& l : logits) lse = lse + dual_exp(l - Dual{mx, 0.0L});
    total = total + dual_log(lse) + Dual{mx, 0.0L} - logits[labels[b]];
  }
  return (total / (long double)items.size()).d;
}

std::vector<Eigen::MatrixXd> random_items(Rng& rng, int d,
                                          std::initializer_list<int> lens) {
  std::vector<Eigen::MatrixXd> items;
  for (int t : lens) {
    Eigen::MatrixXd x(t, d);
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x.data()[i] = rng.uniform(-1.5, 1.5);
    items.push_back(std::move(x));
  }
  return items;
}

SeqBatch batch_of(const std::vector<Eigen::MatrixXd>& items) {
  std::vector<const Eigen::MatrixXd*> ptrs;
  for (const auto& m : items) ptrs.push_back(&m);
  return make_seq_batch(ptrs);
}

std::vector<double> flat_grads(const BiLstmStack& stack0, const LinearHead& head0,
                               SequenceModelGrads& grads) {
  BiLstmStack sg = grads.stack;
  LinearHead hg = grads.head;
  auto views = param_views(sg, hg);
  std::vector<double> flat;
  for (const auto& v : views)
    for (Eigen::Index i = 0; i < v.size; ++i) flat.push_back(v.data[i]);
  (void)stack0;
  (void)head0;
  return flat;
}

}  // namespace

TEST_CASE("lstm direction matches the scalar reference", "[nnet]") {
  Rng rng(21);
  LstmDirParams p = init_lstm_dir(4, 3, rng);
  Eigen::MatrixXd x(6, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-2.0, 2.0);

  for (bool reverse : {false, true}) {
    const Eigen::MatrixXd got = lstm_direction_forward(p, x, reverse);
    const Eigen::MatrixXd want = ref_lstm_dir(p, x, reverse);
    REQUIRE(got.rows() == 6);
    REQUIRE(got.cols() == 4);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("stack forward matches the scalar reference", "[nnet]") {
  Rng rng(22);
  BiLstmStack stack = init_bilstm_stack(3, 5, 4, rng);
  Eigen::MatrixXd x(9, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-2.0, 2.0);
  const Eigen::MatrixXd got = bilstm_stack_forward(stack, x);
  const Eigen::MatrixXd want = ref_stack(stack, x);
  REQUIRE(got.rows() == 9);
  REQUIRE(got.cols() == 10);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("time reversal flips a direction's output", "[nnet]") {
  Rng rng(23);
  LstmDirParams p = init_lstm_dir(3, 2, rng);
  Eigen::MatrixXd x(7, 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
  const Eigen::MatrixXd fwd = lstm_direction_forward(p, x, false);
  const Eigen::MatrixXd rev =
      lstm_direction_forward(p, x.colwise().reverse(), true);
  for (Eigen::Index t = 0; t < 7; ++t)
    CHECK((fwd.row(t) - rev.row(6 - t)).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("batched forward equals per-item forward on ragged batches", "[nnet]") {
  Rng rng(24);
  BiLstmStack stack = init_bilstm_stack(2, 4, 3, rng);
  auto items = random_items(rng, 3, {5, 9, 2, 7});
  const SeqBatch batch = batch_of(items);
  REQUIRE(batch.t_max == 9);
  REQUIRE(batch.batch == 4);
  const Eigen::MatrixXd latents = bilstm_stack_forward_batched(stack, batch, nullptr);
  for (std::size_t b = 0; b < items.size(); ++b) {
    const Eigen::MatrixXd single = bilstm_stack_forward(stack, items[b]);
    for (Eigen::Index t = 0; t < items[b].rows(); ++t) {
      const auto col = latents.col(t * batch.batch + (Eigen::Index)b);
      CHECK((col.transpose() - single.row(t)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("seq batch packing and guards", "[nnet]") {
  Rng rng(25);
  auto items = random_items(rng, 2, {3, 1});
  const SeqBatch b = batch_of(items);
  CHECK(b.lengths == std::vector<Eigen::Index>{3, 1});
  CHECK(b.total_real_frames() == 4);
  // column t*batch + i holds item i's frame t
  CHECK(b.x.col(0 * 2 + 0) == items[0].row(0).transpose());
  CHECK(b.x.col(2 * 2 + 0) == items[0].row(2).transpose());
  CHECK(b.x.col(0 * 2 + 1) == items[1].row(0).transpose());
  // padded column is zero
  CHECK(b.x.col(1 * 2 + 1).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_MATCHES(make_seq_batch({}), Error,
                       ErrorHasCode(ErrorCode::EmptyDataset));
  Eigen::MatrixXd wrong(2, 5);
  wrong.setZero();
  CHECK_THROWS_MATCHES(make_seq_batch({&items[0], &wrong}), Error,
                       ErrorHasCode(ErrorCode::ShapeMismatch));
}

TEST_CASE("analytic gradients match dual-number derivatives", "[nnet]") {
  Rng rng(26);
  BiLstmStack stack = init_bilstm_stack(2, 2, 3, rng);
  LinearHead head = init_linear_head(1, 4, rng);
  auto items = random_items(rng, 3, {4, 2, 3});
  const SeqBatch batch = batch_of(items);
  std::vector<std::vector<int>> labels = {{1, 0, 1, 1}, {0, 0}, {1, 0, 0}};

  SequenceModelGrads grads{zeros_like(stack), zeros_like(head)};
  const BinarySeqResult res =
      binary_sequence_loss(stack, head, batch, labels, &grads);
  const std::vector<double> analytic = flat_grads(stack, head, grads);

  long double ref_loss = 0.0L;
  (void)dual_detector_loss(stack, head, items, labels, -1, &ref_loss);
  CHECK(std::abs(res.loss - (double)ref_loss) < 1e-12);

  double max_rel = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const long double want =
        dual_detector_loss(stack, head, items, labels, (Eigen::Index)i);
    const double rel = std::abs(analytic[i] - (double)want) /
                       std::max({std::abs(analytic[i]),
                                 std::abs((double)want), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  CHECK(max_rel < 1e-10);
}

TEST_CASE("classifier gradients match dual-number derivatives", "[nnet]") {
  Rng rng(27);
  BiLstmStack stack = init_bilstm_stack(2, 2, 3, rng);
  LinearHead head = init_linear_head(3, 4, rng);
  auto items = random_items(rng, 3, {3, 5, 4});
  const SeqBatch batch = batch_of(items);
  std::vector<int> labels = {2, 0, 1};

  SequenceModelGrads grads{zeros_like(stack), zeros_like(head)};
  pooled_class_loss(stack, head, batch, labels, &grads);
  const std::vector<double> analytic = flat_grads(stack, head, grads);

  double max_rel = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const long double want =
        dual_classifier_loss(stack, head, items, labels, (Eigen::Index)i);
    const double rel = std::abs(analytic[i] - (double)want) /
                       std::max({std::abs(analytic[i]),
                                 std::abs((double)want), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  CHECK(max_rel < 1e-10);
}

TEST_CASE("zero upstream gradient backpropagates to zero", "[nnet]") {
  Rng rng(28);
  BiLstmStack stack = init_bilstm_stack(2, 3, 2, rng);
  auto items = random_items(rng, 2, {4, 6});
  const SeqBatch batch = batch_of(items);
  StackCache cache;
  const Eigen::MatrixXd latents = bilstm_stack_forward_batched(stack, batch, &cache);
  BiLstmStack grads = zeros_like(stack);
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(latents.rows(), latents.cols());
  bilstm_stack_backward_batched(stack, batch, cache, zero, grads);
  for (const auto& l : grads.layers)
    for (const auto* p : {&l.fwd, &l.bwd}) {
      CHECK(p->w_in.cwiseAbs().maxCoeff() == 0.0);
      CHECK(p->w_rec.cwiseAbs().maxCoeff() == 0.0);
      CHECK(p->bias.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("finite difference check on a linear model", "[nnet]") {
  // no recurrent part: the generic closure form on a head-only model
  Rng rng(29);
  BiLstmStack empty;
  empty.input_size = 5;
  empty.hidden_size = 16;
  LinearHead head = init_linear_head(1, 5, rng);
  auto items = random_items(rng, 5, {6, 4});
  const SeqBatch batch = batch_of(items);
  std::vector<std::vector<int>> labels = {{1, 0, 1, 0, 1, 1}, {0, 1, 0, 0}};

  SequenceModelGrads grads{zeros_like(empty), zeros_like(head)};
  binary_sequence_loss(empty, head, batch, labels, &grads);

  auto params = param_views(empty, head);
  auto analytic = param_views(grads.stack, grads.head);
  const double max_rel = grad_check(
      params, analytic,
      [&] { return binary_sequence_loss(empty, head, batch, labels, nullptr).loss; },
      1e-4);
  CHECK(max_rel < 1e-6);
}

TEST_CASE("full model finite difference checks", "[nnet]") {
  Rng rng(30);
  BiLstmStack stack = init_bilstm_stack(3, 16, 40, rng);
  LinearHead det_head = init_linear_head(1, 32, rng);
  LinearHead cls_head = init_linear_head(3, 32, rng);
  auto items = random_items(rng, 40, {8, 8});
  const SeqBatch batch = batch_of(items);

  std::vector<std::vector<int>> frame_labels(2);
  for (auto& l : frame_labels)
    for (int t = 0; t < 8; ++t) l.push_back(rng.uniform() < 0.5 ? 1 : 0);
  CHECK(grad_check(stack, det_head, batch, frame_labels, 1e-4) < 1e-5);

  std::vector<int> class_labels = {2, 0};
  CHECK(grad_check(stack, cls_head, batch, class_labels, 1e-4) < 1e-5);
}

TEST_CASE("longer sequence finite difference check", "[nnet]") {
  Rng rng(31);
  BiLstmStack stack = init_bilstm_stack(3, 16, 40, rng);
  LinearHead head = init_linear_head(1, 32, rng);
  auto items = random_items(rng, 40, {20});
  const SeqBatch batch = batch_of(items);
  std::vector<std::vector<int>> labels(1);
  for (int t = 0; t < 20; ++t) labels[0].push_back(t % 3 == 0 ? 1 : 0);
  CHECK(grad_check(stack, head, batch, labels, 1e-4) < 1e-5);
}

TEST_CASE("grad check rejects non-positive epsilon", "[nnet]") {
  Rng rng(32);
  BiLstmStack stack = init_bilstm_stack(1, 2, 2, rng);
  LinearHead head = init_linear_head(1, 4, rng);
  auto items = random_items(rng, 2, {3});
  const SeqBatch batch = batch_of(items);
  std::vector<std::vector<int>> labels = {{1, 0, 1}};
  CHECK_THROWS_MATCHES(grad_check(stack, head, batch, labels, 0.0), Error,
                       ErrorHasCode(ErrorCode::BadArgument));
  CHECK_THROWS_MATCHES(grad_check(stack, head, batch, labels, -1e-4), Error,
                       ErrorHasCode(ErrorCode::BadArgument));
}

TEST_CASE("loss values at fixed points", "[nnet]") {
  SECTION("binary cross entropy at zero logits") {
    Eigen::VectorXd logits = Eigen::VectorXd::Zero(4);
    const LossGrad on = bce_loss(logits, {1, 1, 1, 1});
    CHECK(on.loss == Catch::Approx(std::log(2.0)).epsilon(1e-14));
    for (int t = 0; t < 4; ++t)
      CHECK(on.grad[t] == Catch::Approx(-0.125).epsilon(1e-14));
    const LossGrad off = bce_loss(logits, {0, 0, 0, 0});
    CHECK(off.loss == Catch::Approx(std::log(2.0)).epsilon(1e-14));
    for (int t = 0; t < 4; ++t)
      CHECK(off.grad[t] == Catch::Approx(0.125).epsilon(1e-14));
  }
  SECTION("cross entropy at uniform logits") {
    Eigen::VectorXd logits = Eigen::VectorXd::Zero(3);
    const LossGrad lg = cross_entropy_loss(logits, 2);
    CHECK(lg.loss == Catch::Approx(std::log(3.0)).epsilon(1e-14));
    CHECK(lg.grad[0] == Catch::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(lg.grad[2] == Catch::Approx(-2.0 / 3.0).epsilon(1e-14));
  }
  SECTION("guards") {
    Eigen::VectorXd logits = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_MATCHES(bce_loss(logits, {1, 0}), Error,
                         ErrorHasCode(ErrorCode::LengthMismatch));
    CHECK_THROWS_MATCHES(cross_entropy_loss(logits, 3), Error,
                         ErrorHasCode(ErrorCode::BadLabel));
    CHECK_THROWS_MATCHES(cross_entropy_loss(logits, -1), Error,
                         ErrorHasCode(ErrorCode::BadLabel));
    CHECK_THROWS_MATCHES(cross_entropy_loss(Eigen::VectorXd::Zero(1), 0), Error,
                         ErrorHasCode(ErrorCode::BadLabel));
  }
}

TEST_CASE("loss values match an extended precision oracle", "[nnet]") {
  Rng rng(33);
  SECTION("bce") {
    Eigen::VectorXd logits(16);
    std::vector<int> labels(16);
    for (int t = 0; t < 16; ++t) {
      logits[t] = rng.uniform(-8.0, 8.0);
      labels[t] = rng.uniform() < 0.5;
    }
    const LossGrad lg = bce_loss(logits, labels);
    long double want = 0.0L;
    for (int t = 0; t < 16; ++t) {
      const long double p = ref_sig(logits[t]);
      want -= labels[t] ? std::log(p) : std::log(1.0L - p);
    }
    want /= 16.0L;
    CHECK(std::abs(lg.loss - (double)want) < 1e-10);
  }
  SECTION("cross entropy") {
    Eigen::VectorXd logits(5);
    for (int k = 0; k < 5; ++k) logits[k] = rng.uniform(-6.0, 6.0);
    const LossGrad lg = cross_entropy_loss(logits, 3);
    long double z = 0.0L;
    for (int k = 0; k < 5; ++k) z += std::exp((long double)logits[k]);
    const long double want = std::log(z) - logits[3];
    CHECK(std::abs(lg.loss - (double)want) < 1e-10);
  }
}

TEST_CASE("sequence loss semantics", "[nnet]") {
  Rng rng(34);
  BiLstmStack stack = init_bilstm_stack(1, 3, 2, rng);
  LinearHead head = init_linear_head(1, 6, rng);
  auto items = random_items(rng, 2, {5, 2});
  const SeqBatch batch = batch_of(items);
  std::vector<std::vector<int>> labels = {{1, 0, 1, 0, 1}, {0, 1}};

  const BinarySeqResult res = binary_sequence_loss(stack, head, batch, labels, nullptr);
  REQUIRE(res.probs.cols() == batch.batch * batch.t_max);

  // padded columns stay zero, real columns carry probabilities
  for (Eigen::Index t = 0; t < batch.t_max; ++t)
    for (Eigen::Index b = 0; b < batch.batch; ++b) {
      const double p = res.probs(0, t * batch.batch + b);
      if (t < batch.lengths[b]) {
        CHECK(p > 0.0);
        CHECK(p < 1.0);
      } else {
        CHECK(p == 0.0);
      }
    }

  // loss is the mean over the 7 real frames
  long double want = 0.0L;
  for (Eigen::Index b = 0; b < 2; ++b) {
    const Eigen::MatrixXd lat = bilstm_stack_forward(stack, items[b]);
    const Eigen::MatrixXd z = linear_forward(head, lat);
    for (Eigen::Index t = 0; t < batch.lengths[b]; ++t) {
      const long double p = ref_sig(z(t, 0));
      want -= labels[b][t] ? std::log(p) : std::log(1.0L - p);
    }
  }
  want /= 7.0L;
  CHECK(res.loss == Catch::Approx((double)want).epsilon(1e-12));

  SECTION("label length mismatch") {
    labels[1] = {0, 1, 1};
    CHECK_THROWS_MATCHES(binary_sequence_loss(stack, head, batch, labels, nullptr),
                         Error, ErrorHasCode(ErrorCode::ShapeMismatch));
  }
}

TEST_CASE("pooled class loss semantics", "[nnet]") {
  Rng rng(35);
  BiLstmStack stack = init_bilstm_stack(1, 3, 2, rng);
  LinearHead head = init_linear_head(3, 6, rng);
  auto items = random_items(rng, 2, {4, 7, 3});
  const SeqBatch batch = batch_of(items);
  std::vector<int> labels = {0, 2, 1};

  const PooledClassResult res = pooled_class_loss(stack, head, batch, labels, nullptr);
  REQUIRE(res.probs.rows() == 3);
  REQUIRE(res.probs.cols() == 3);
  for (Eigen::Index b = 0; b < 3; ++b) {
    CHECK(std::abs(res.probs.col(b).sum() - 1.0) < 1e-12);
    CHECK(res.probs.col(b).minCoeff() > 0.0);
  }

  // against a straightforward single-item computation
  long double want = 0.0L;
  for (Eigen::Index b = 0; b < 3; ++b) {
    const Eigen::MatrixXd lat = bilstm_stack_forward(stack, items[b]);
    const Eigen::VectorXd pooled = lat.colwise().mean().transpose();
    const Eigen::VectorXd z = head.weights * pooled + head.bias;
    long double lse = 0.0L;
    for (Eigen::Index k = 0; k < 3; ++k) lse += std::exp((long double)z[k]);
    want += std::log(lse) - z[labels[b]];
  }
  want /= 3.0L;
  CHECK(res.loss == Catch::Approx((double)want).epsilon(1e-11));
}

TEST_CASE("initialization conventions", "[nnet]") {
  Rng rng(36);
  const LstmDirParams p = init_lstm_dir(8, 5, rng);
  const double bound = 1.0 / std::sqrt(8.0);
  CHECK(p.w_in.cwiseAbs().maxCoeff() <= bound);
  CHECK(p.w_rec.cwiseAbs().maxCoeff() <= bound);
  // forget gate biases start at one, everything else at zero
  for (int r = 0; r < 32; ++r)
    CHECK(p.bias[r] == (r >= 8 && r < 16 ? 1.0 : 0.0));

  Rng a(5), b(5), c(6);
  const BiLstmStack s1 = init_bilstm_stack(2, 4, 3, a);
  const BiLstmStack s2 = init_bilstm_stack(2, 4, 3, b);
  const BiLstmStack s3 = init_bilstm_stack(2, 4, 3, c);
  CHECK((s1.layers[0].fwd.w_in - s2.layers[0].fwd.w_in).cwiseAbs().maxCoeff() == 0.0);
  CHECK((s1.layers[1].bwd.w_rec - s2.layers[1].bwd.w_rec).cwiseAbs().maxCoeff() == 0.0);
  CHECK((s1.layers[0].fwd.w_in - s3.layers[0].fwd.w_in).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("gate activation kernels track libm", "[nnet]") {
  Eigen::ArrayXd xs(2001);
  for (int i = 0; i <= 2000; ++i) xs[i] = -25.0 + 0.025 * i;
  Eigen::ArrayXd a = xs, p(2001), q(2001);
  nn_detail::sigmoid_block(a, p, q);
  double worst = 0.0;
  for (int i = 0; i <= 2000; ++i) {
    const double want = 1.0 / (1.0 + std::exp(-xs[i]));
    worst = std::max(worst, std::abs(a[i] - want) / want);
  }
  CHECK(worst < 1e-14);

  a = xs;
  nn_detail::tanh_block(a, p, q);
  worst = 0.0;
  for (int i = 0; i <= 2000; ++i) {
    const double want = std::tanh(xs[i]);
    const double denom = std::max(std::abs(want), 1e-12);
    worst = std::max(worst, std::abs(a[i] - want) / denom);
  }
  CHECK(worst < 1e-14);
}

TEST_CASE("adam behaviour", "[nnet]") {
  SECTION("zero gradients leave parameters untouched") {
    Eigen::VectorXd theta(3);
    theta << 1.0, -2.0, 0.5;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(3);
    std::vector<ParamView> params = {{theta.data(), 3}};
    std::vector<ParamView> grads = {{g.data(), 3}};
    AdamState st;
    adam_step(params, grads, st);
    CHECK(theta[0] == 1.0);
    CHECK(theta[1] == -2.0);
    CHECK(theta[2] == 0.5);
  }
  SECTION("first step moves by about lr in the gradient direction") {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd g(2);
    g << 0.7, -0.01;
    std::vector<ParamView> params = {{theta.data(), 2}};
    std::vector<ParamView> grads = {{g.data(), 2}};
    AdamState st;
    adam_step(params, grads, st);
    CHECK(theta[0] == Catch::Approx(-1e-3).epsilon(1e-4));
    CHECK(theta[1] == Catch::Approx(1e-3).epsilon(1e-3));
  }
  SECTION("global norm clipping rescales large gradients") {
    Eigen::VectorXd t1 = Eigen::VectorXd::Zero(2), t2 = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd big(2), small(2);
    big << 30.0, 40.0;     // norm 50, clipped to 5
    small << 3.0, 4.0;     // already norm 5
    AdamState s1, s2;
    adam_step({{t1.data(), 2}}, {{big.data(), 2}}, s1);
    adam_step({{t2.data(), 2}}, {{small.data(), 2}}, s2);
    CHECK(t1[0] == Catch::Approx(t2[0]).epsilon(1e-12));
    CHECK(t1[1] == Catch::Approx(t2[1]).epsilon(1e-12));
  }
  SECTION("quadratic bowl converges") {
    Eigen::VectorXd theta(2);
    theta << 8.0, -6.0;
    AdamState st;
    st.cfg.lr = 0.05;
    Eigen::VectorXd g(2);
    std::vector<ParamView> params = {{theta.data(), 2}};
    std::vector<ParamView> grads = {{g.data(), 2}};
    for (int it = 0; it < 2000; ++it) {
      g[0] = 2.0 * (theta[0] - 3.0);
      g[1] = 4.0 * (theta[1] + 1.0);
      adam_step(params, grads, st);
    }
    CHECK(std::abs(theta[0] - 3.0) < 1e-3);
    CHECK(std::abs(theta[1] + 1.0) < 1e-3);
  }
  SECTION("state size mismatch is rejected") {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(2);
    AdamState st;
    adam_step({{theta.data(), 2}}, {{g.data(), 2}}, st);
    Eigen::VectorXd t3 = Eigen::VectorXd::Zero(3);
    Eigen::VectorXd g3 = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_MATCHES(adam_step({{t3.data(), 3}}, {{g3.data(), 3}}, st),
                         Error, ErrorHasCode(ErrorCode::ShapeMismatch));
  }
}

TEST_CASE("training steps reduce the loss on a fixed batch", "[nnet]") {
  Rng rng(37);
  BiLstmStack stack = init_bilstm_stack(1, 4, 3, rng);
  LinearHead head = init_linear_head(1, 8, rng);
  auto items = random_items(rng, 3, {10, 10});
  const SeqBatch batch = batch_of(items);
  std::vector<std::vector<int>> labels(2, std::vector<int>(10));
  for (auto& l : labels)
    for (auto& y : l) y = rng.uniform() < 0.5;

  AdamState st;
  st.cfg.lr = 5e-3;
  const double initial =
      binary_sequence_loss(stack, head, batch, labels, nullptr).loss;
  double last = initial;
  for (int it = 0; it < 50; ++it) {
    SequenceModelGrads grads{zeros_like(stack), zeros_like(head)};
    last = binary_sequence_loss(stack, head, batch, labels, &grads).loss;
    auto params = param_views(stack, head);
    auto gviews = param_views(grads.stack, grads.head);
    adam_step(params, gviews, st);
  }
  CHECK(last < initial);
}
