#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pcaplm/errors.hpp"
#include "pcaplm/tokenizer.hpp"
#include "pcaplm/util.hpp"

namespace pcaplm {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int hidden_dim = 128;
  int intermediate_dim = 512;
  double dropout = 0.1;
  int max_positions = 64;
  int vocab_size = 4096;
  int chunk_size = 64;

  static ModelConfig desk_scale();   // 2 layers / 4 heads / 128 / 512
  static ModelConfig paper_scale();  // 6 layers / 12 heads / 768 / 3072, vocab 30522
  void validate() const;
};

struct TrainConfig {
  double lr = 2e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 2;
  int max_epochs = 200;
  int patience = 12;
  uint64_t seed = 0;
  double mask_rate = 0.20;
  int threads = 1;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Scalar math
// ---------------------------------------------------------------------------

inline constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

template <typename T>
T gelu(T x) {
  // Exact erf form: x * Phi(x).
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::erf(x * static_cast<T>(kInvSqrt2)));
}

template <typename T>
T gelu_grad(T x) {
  const T phi = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x * static_cast<T>(kInvSqrt2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(kInvSqrt2Pi);
  return phi + x * pdf;
}

// Max-shifted softmax over a dense vector, accumulated in double.
inline Eigen::VectorXd softmax(const Eigen::Ref<const Eigen::VectorXd>& logits) {
  const Eigen::Index n = logits.size();
  if (n == 0) fail(Errc::degenerate_logits, "empty logit vector");
  double mx = logits.maxCoeff();
  if (std::isinf(mx) && mx < 0) fail(Errc::degenerate_logits, "all logits are -inf");
  Eigen::VectorXd out(n);
  if (std::isinf(mx)) {
    // +inf entries split the mass evenly; everything finite gets zero.
    double k = 0;
    for (Eigen::Index i = 0; i < n; ++i) k += (logits[i] == mx) ? 1.0 : 0.0;
    for (Eigen::Index i = 0; i < n; ++i) out[i] = (logits[i] == mx) ? 1.0 / k : 0.0;
    return out;
  }
  out = (logits.array() - mx).exp();
  out /= out.sum();
  return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Params {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  struct Layer {
    Mat wq, wk, wv, wo;      // hidden x hidden
    Mat bq, bk, bv, bo;      // 1 x hidden
    Mat ln1_gamma, ln1_beta; // 1 x hidden
    Mat w1, b1;              // hidden x inter, 1 x inter
    Mat w2, b2;              // inter x hidden, 1 x hidden
    Mat ln2_gamma, ln2_beta; // 1 x hidden
  };

  ModelConfig config;
  Mat tok_emb;               // vocab x hidden
  Mat pos_emb;               // max_positions x hidden
  Mat emb_ln_gamma, emb_ln_beta;  // 1 x hidden
  std::vector<Layer> layers;
  Mat w_out;                 // hidden x vocab
  Mat b_out;                 // 1 x vocab

  static Params zeros(const ModelConfig& mc) {
    mc.validate();
    Params p;
    p.config = mc;
    const int d = mc.hidden_dim, inter = mc.intermediate_dim;
    p.tok_emb = Mat::Zero(mc.vocab_size, d);
    p.pos_emb = Mat::Zero(mc.max_positions, d);
    p.emb_ln_gamma = Mat::Zero(1, d);
    p.emb_ln_beta = Mat::Zero(1, d);
    p.layers.resize(static_cast<size_t>(mc.layers));
    for (auto& l : p.layers) {
      l.wq = Mat::Zero(d, d); l.wk = Mat::Zero(d, d);
      l.wv = Mat::Zero(d, d); l.wo = Mat::Zero(d, d);
      l.bq = Mat::Zero(1, d); l.bk = Mat::Zero(1, d);
      l.bv = Mat::Zero(1, d); l.bo = Mat::Zero(1, d);
      l.ln1_gamma = Mat::Zero(1, d); l.ln1_beta = Mat::Zero(1, d);
      l.w1 = Mat::Zero(d, inter); l.b1 = Mat::Zero(1, inter);
      l.w2 = Mat::Zero(inter, d); l.b2 = Mat::Zero(1, d);
      l.ln2_gamma = Mat::Zero(1, d); l.ln2_beta = Mat::Zero(1, d);
    }
    p.w_out = Mat::Zero(d, mc.vocab_size);
    p.b_out = Mat::Zero(1, mc.vocab_size);
    return p;
  }

  static Params random_init(const ModelConfig& mc, uint64_t seed) {
    Params p = zeros(mc);
    DetRng rng(mix64(seed, 0x70617261ull));  // parameter stream
    const Scalar std_dev = static_cast<Scalar>(0.02);
    auto fill_normal = [&](Mat& m) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
          m(i, j) = static_cast<Scalar>(rng.next_normal()) * std_dev;
    };
    fill_normal(p.tok_emb);
    fill_normal(p.pos_emb);
    p.emb_ln_gamma.setOnes();
    for (auto& l : p.layers) {
      fill_normal(l.wq); fill_normal(l.wk); fill_normal(l.wv); fill_normal(l.wo);
      fill_normal(l.w1); fill_normal(l.w2);
      l.ln1_gamma.setOnes();
      l.ln2_gamma.setOnes();
    }
    fill_normal(p.w_out);
    return p;
  }

  // Fixed traversal order shared by the optimizer, the checkpoint format and
  // the gradient checker.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn("embeddings.token", tok_emb);
    fn("embeddings.position", pos_emb);
    fn("embeddings.norm.gamma", emb_ln_gamma);
    fn("embeddings.norm.beta", emb_ln_beta);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string base = "layers." + std::to_string(i) + ".";
      Layer& l = layers[i];
      fn(base + "attention.query.weight", l.wq);
      fn(base + "attention.query.bias", l.bq);
      fn(base + "attention.key.weight", l.wk);
      fn(base + "attention.key.bias", l.bk);
      fn(base + "attention.value.weight", l.wv);
      fn(base + "attention.value.bias", l.bv);
      fn(base + "attention.out.weight", l.wo);
      fn(base + "attention.out.bias", l.bo);
      fn(base + "norm1.gamma", l.ln1_gamma);
      fn(base + "norm1.beta", l.ln1_beta);
      fn(base + "ffn.in.weight", l.w1);
      fn(base + "ffn.in.bias", l.b1);
      fn(base + "ffn.out.weight", l.w2);
      fn(base + "ffn.out.bias", l.b2);
      fn(base + "norm2.gamma", l.ln2_gamma);
      fn(base + "norm2.beta", l.ln2_beta);
    }
    fn("output.weight", w_out);
    fn("output.bias", b_out);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<Params*>(this)->for_each_tensor(
        [&](const std::string& name, Mat& m) { fn(name, static_cast<const Mat&>(m)); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
    return ok;
  }
};

// ---------------------------------------------------------------------------
// Forward / prediction
// ---------------------------------------------------------------------------

enum class Mode { train, eval };

struct TraceBase {
  virtual ~TraceBase() = default;
};

// Per-position probability vectors over the vocabulary at masked positions.
struct ChunkPrediction {
  std::string capture_id;
  int chunk_index = 0;
  std::vector<int> masked_positions;
  std::vector<Eigen::VectorXd> probabilities;  // each sums to 1
  std::vector<int> predicted_ids;              // argmax, ties to the lowest id
  std::vector<int> true_ids;
  std::shared_ptr<TraceBase> trace;  // retained in train mode, for backward()
};

namespace detail {

template <typename Scalar>
struct LayerTrace {
  using Mat = typename Params<Scalar>::Mat;
  Mat x_in;                  // layer input (S x D)
  Mat q, k, v;               // projections (S x D)
  std::vector<Mat> attn_p;      // per head, post-softmax pre-dropout (S x S)
  std::vector<Mat> attn_drop;   // per head dropout factors, empty when off
  Mat context;               // concatenated post-dropout attention output (S x D)
  Mat attn_out_drop;         // dropout factors, empty when off
  Mat x_mid;                 // post first layer norm (S x D)
  Mat xhat1;                 // normalized pre-gamma activations
  Eigen::VectorXd rstd1;
  Mat z;                     // FFN pre-gelu (S x I)
  Mat g;                     // gelu(z)
  Mat ffn_drop;              // dropout factors, empty when off
  Mat xhat2;
  Eigen::VectorXd rstd2;
};

template <typename Scalar>
struct Trace : TraceBase {
  using Mat = typename Params<Scalar>::Mat;
  MaskedChunk chunk;
  Mat xhat_e;
  Eigen::VectorXd rstd_e;
  Mat emb_drop;  // empty when off
  std::vector<LayerTrace<Scalar>> layers;
  Mat hidden;  // final encoder output (S x D)
};

// Row-wise layer norm with statistics accumulated in double.
// Writes the normalized activations and 1/std so backward can reuse them.
template <typename Scalar>
void layer_norm(const typename Params<Scalar>::Mat& x, const typename Params<Scalar>::Mat& gamma,
                const typename Params<Scalar>::Mat& beta, typename Params<Scalar>::Mat& out,
                typename Params<Scalar>::Mat& xhat, Eigen::VectorXd& rstd) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  out.resize(rows, cols);
  xhat.resize(rows, cols);
  rstd.resize(rows);
  constexpr double kEps = 1e-12;
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mean = 0;
    for (Eigen::Index c = 0; c < cols; ++c) mean += static_cast<double>(x(r, c));
    mean /= static_cast<double>(cols);
    double var = 0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      double d = static_cast<double>(x(r, c)) - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double rs = 1.0 / std::sqrt(var + kEps);
    rstd[r] = rs;
    for (Eigen::Index c = 0; c < cols; ++c) {
      double xh = (static_cast<double>(x(r, c)) - mean) * rs;
      xhat(r, c) = static_cast<Scalar>(xh);
      out(r, c) = static_cast<Scalar>(xh * static_cast<double>(gamma(0, c)) +
                                      static_cast<double>(beta(0, c)));
    }
  }
}

template <typename Scalar>
void layer_norm_backward(const typename Params<Scalar>::Mat& dy,
                         const typename Params<Scalar>::Mat& xhat, const Eigen::VectorXd& rstd,
                         const typename Params<Scalar>::Mat& gamma,
                         typename Params<Scalar>::Mat& dx, typename Params<Scalar>::Mat& dgamma,
                         typename Params<Scalar>::Mat& dbeta) {
  const Eigen::Index rows = dy.rows(), cols = dy.cols();
  dx.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      double dxh = static_cast<double>(dy(r, c)) * static_cast<double>(gamma(0, c));
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * static_cast<double>(xhat(r, c));
    }
    double inv_n = 1.0 / static_cast<double>(cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
      double dxh = static_cast<double>(dy(r, c)) * static_cast<double>(gamma(0, c));
      double val = rstd[r] * (dxh - inv_n * sum_dxhat -
                              static_cast<double>(xhat(r, c)) * inv_n * sum_dxhat_xhat);
      dx(r, c) = static_cast<Scalar>(val);
    }
  }
  for (Eigen::Index c = 0; c < cols; ++c) {
    double dg = 0, db = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
      dg += static_cast<double>(dy(r, c)) * static_cast<double>(xhat(r, c));
      db += static_cast<double>(dy(r, c));
    }
    dgamma(0, c) += static_cast<Scalar>(dg);
    dbeta(0, c) += static_cast<Scalar>(db);
  }
}

// Inverted-dropout factor matrix: entries are 0 or 1/(1-rate).
template <typename Mat>
Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, DetRng& rng) {
  using Scalar = typename Mat::Scalar;
  Mat m(rows, cols);
  const Scalar keep = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = rng.next_double() >= rate ? keep : Scalar(0);
  return m;
}

// Row-wise max-shifted softmax of attention scores, double accumulation.
template <typename Mat>
void softmax_rows_inplace(Mat& scores) {
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < scores.cols(); ++c)
      mx = std::max(mx, static_cast<double>(scores(r, c)));
    double sum = 0;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      double e = std::exp(static_cast<double>(scores(r, c)) - mx);
      scores(r, c) = static_cast<typename Mat::Scalar>(e);
      sum += e;
    }
    for (Eigen::Index c = 0; c < scores.cols(); ++c)
      scores(r, c) = static_cast<typename Mat::Scalar>(static_cast<double>(scores(r, c)) / sum);
  }
}

}  // namespace detail

// Forward pass for one masked chunk. Self-attention never looks at pad
// positions; probabilities are produced only at masked positions (all that
// the loss and the chunk metrics need). In train mode the full activation
// trace rides along in the prediction for backward().
template <typename Scalar>
ChunkPrediction forward(const Params<Scalar>& params, const MaskedChunk& mc, Mode mode,
                        DetRng* dropout_rng = nullptr) {
  using Mat = typename Params<Scalar>::Mat;
  const ModelConfig& cfg = params.config;
  const int S = static_cast<int>(mc.chunk.token_ids.size());
  if (S == 0 || S > cfg.max_positions)
    fail(Errc::shape_mismatch, "chunk length " + std::to_string(S) + " vs max positions " +
                                   std::to_string(cfg.max_positions));
  if (mc.chunk.non_pad() <= 0) fail(Errc::all_pad, "no unmasked content in chunk");
  if (mc.masked_positions.empty()) fail(Errc::empty_mask, "chunk carries no masked positions");
  for (int id : mc.chunk.token_ids)
    if (id < 0 || id >= cfg.vocab_size)
      fail(Errc::shape_mismatch, "token id " + std::to_string(id) + " outside vocabulary");

  const int D = cfg.hidden_dim, H = cfg.heads, dk = D / H;
  const Scalar inv_sqrt_dk = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dk)));
  const int non_pad = mc.chunk.non_pad();
  const bool use_dropout = mode == Mode::train && cfg.dropout > 0.0 && dropout_rng != nullptr;
  const double rate = cfg.dropout;

  auto trace = std::make_shared<detail::Trace<Scalar>>();
  trace->chunk = mc;

  Mat x(S, D);
  for (int s = 0; s < S; ++s)
    x.row(s) = params.tok_emb.row(mc.chunk.token_ids[static_cast<size_t>(s)]) + params.pos_emb.row(s);

  Mat normed;
  detail::layer_norm<Scalar>(x, params.emb_ln_gamma, params.emb_ln_beta, normed, trace->xhat_e,
                             trace->rstd_e);
  x = normed;
  if (use_dropout) {
    trace->emb_drop = detail::dropout_mask<Mat>(S, D, rate, *dropout_rng);
    x.array() *= trace->emb_drop.array();
  }

  trace->layers.resize(static_cast<size_t>(cfg.layers));
  for (int li = 0; li < cfg.layers; ++li) {
    const auto& l = params.layers[static_cast<size_t>(li)];
    auto& lt = trace->layers[static_cast<size_t>(li)];
    lt.x_in = x;
    lt.q = (x * l.wq).rowwise() + l.bq.row(0);
    lt.k = (x * l.wk).rowwise() + l.bk.row(0);
    lt.v = (x * l.wv).rowwise() + l.bv.row(0);

    lt.attn_p.resize(static_cast<size_t>(H));
    if (use_dropout) lt.attn_drop.resize(static_cast<size_t>(H));
    Mat context(S, D);
    const Scalar neg_large = static_cast<Scalar>(-1e30);
    for (int h = 0; h < H; ++h) {
      auto qh = lt.q.middleCols(h * dk, dk);
      auto kh = lt.k.middleCols(h * dk, dk);
      auto vh = lt.v.middleCols(h * dk, dk);
      Mat scores = qh * kh.transpose() * inv_sqrt_dk;
      if (non_pad < S)
        scores.rightCols(S - non_pad).setConstant(neg_large);  // pad keys are invisible
      detail::softmax_rows_inplace(scores);
      lt.attn_p[static_cast<size_t>(h)] = scores;
      if (use_dropout) {
        lt.attn_drop[static_cast<size_t>(h)] =
            detail::dropout_mask<Mat>(S, S, rate, *dropout_rng);
        scores.array() *= lt.attn_drop[static_cast<size_t>(h)].array();
      }
      context.middleCols(h * dk, dk) = scores * vh;
    }
    lt.context = context;

    Mat attn_out = (context * l.wo).rowwise() + l.bo.row(0);
    if (use_dropout) {
      lt.attn_out_drop = detail::dropout_mask<Mat>(S, D, rate, *dropout_rng);
      attn_out.array() *= lt.attn_out_drop.array();
    }
    Mat resid1 = x + attn_out;
    detail::layer_norm<Scalar>(resid1, l.ln1_gamma, l.ln1_beta, lt.x_mid, lt.xhat1, lt.rstd1);

    lt.z = (lt.x_mid * l.w1).rowwise() + l.b1.row(0);
    lt.g = lt.z.unaryExpr([](Scalar v) { return gelu(v); });
    Mat ffn_out = (lt.g * l.w2).rowwise() + l.b2.row(0);
    if (use_dropout) {
      lt.ffn_drop = detail::dropout_mask<Mat>(S, D, rate, *dropout_rng);
      ffn_out.array() *= lt.ffn_drop.array();
    }
    Mat resid2 = lt.x_mid + ffn_out;
    Mat out;
    detail::layer_norm<Scalar>(resid2, l.ln2_gamma, l.ln2_beta, out, lt.xhat2, lt.rstd2);
    x = out;
  }
  trace->hidden = x;

  ChunkPrediction pred;
  pred.capture_id = mc.chunk.capture_id;
  pred.chunk_index = mc.chunk.chunk_index;
  pred.masked_positions = mc.masked_positions;
  pred.true_ids = mc.original_ids;
  const size_t M = mc.masked_positions.size();
  pred.probabilities.reserve(M);
  pred.predicted_ids.reserve(M);
  Eigen::VectorXd logits(cfg.vocab_size);
  for (size_t i = 0; i < M; ++i) {
    int pos = mc.masked_positions[i];
    auto row = (x.row(pos) * params.w_out + params.b_out.row(0)).eval();
    for (int vtok = 0; vtok < cfg.vocab_size; ++vtok)
      logits[vtok] = static_cast<double>(row(0, vtok));
    Eigen::VectorXd probs = softmax(logits);
    int arg = 0;
    double best = probs[0];
    for (int vtok = 1; vtok < cfg.vocab_size; ++vtok)
      if (probs[vtok] > best) {  // strict: ties keep the lowest id
        best = probs[vtok];
        arg = vtok;
      }
    pred.probabilities.push_back(std::move(probs));
    pred.predicted_ids.push_back(arg);
  }
  if (mode == Mode::train) pred.trace = trace;
  return pred;
}

// Mean negative log-likelihood over masked positions (the one-hot label
// collapses the vocabulary sum to the true token's probability).
inline double nll_loss(const ChunkPrediction& pred) {
  if (pred.masked_positions.empty()) fail(Errc::empty_mask, "prediction has no masked positions");
  double total = 0;
  for (size_t i = 0; i < pred.masked_positions.size(); ++i)
    total += -std::log(pred.probabilities[i][pred.true_ids[i]]);
  return total / static_cast<double>(pred.masked_positions.size());
}

// Analytic gradients of nll_loss accumulated into `grads` (shaped like the
// parameters; callers zero it when they want plain gradients).
template <typename Scalar>
void backward_into(const Params<Scalar>& params, const ChunkPrediction& pred,
                   Params<Scalar>& grads) {
  using Mat = typename Params<Scalar>::Mat;
  auto* trace = dynamic_cast<detail::Trace<Scalar>*>(pred.trace.get());
  if (trace == nullptr)
    fail(Errc::missing_trace, "prediction does not carry a forward trace for this scalar type");

  const ModelConfig& cfg = params.config;
  const MaskedChunk& mc = trace->chunk;
  const int S = static_cast<int>(mc.chunk.token_ids.size());
  const int D = cfg.hidden_dim, H = cfg.heads, dk = D / H;
  const Scalar inv_sqrt_dk = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dk)));
  const size_t M = pred.masked_positions.size();
  const bool used_dropout = trace->emb_drop.size() > 0;

  // Output head: dlogits = (softmax - onehot) / M at masked rows only.
  Mat dhidden = Mat::Zero(S, D);
  for (size_t i = 0; i < M; ++i) {
    const int pos = pred.masked_positions[i];
    Mat dlogits(1, cfg.vocab_size);
    const Eigen::VectorXd& p = pred.probabilities[i];
    const double inv_m = 1.0 / static_cast<double>(M);
    for (int vtok = 0; vtok < cfg.vocab_size; ++vtok)
      dlogits(0, vtok) = static_cast<Scalar>(p[vtok] * inv_m);
    dlogits(0, pred.true_ids[i]) -= static_cast<Scalar>(inv_m);
    grads.w_out.noalias() += trace->hidden.row(pos).transpose() * dlogits;
    grads.b_out += dlogits;
    dhidden.row(pos) += dlogits * params.w_out.transpose();
  }

  Mat dx = dhidden;
  for (int li = cfg.layers - 1; li >= 0; --li) {
    const auto& l = params.layers[static_cast<size_t>(li)];
    auto& gl = grads.layers[static_cast<size_t>(li)];
    auto& lt = trace->layers[static_cast<size_t>(li)];

    // Second layer norm.
    Mat dresid2;
    detail::layer_norm_backward<Scalar>(dx, lt.xhat2, lt.rstd2, l.ln2_gamma, dresid2,
                                        gl.ln2_gamma, gl.ln2_beta);
    Mat dx_mid = dresid2;
    Mat dffn = dresid2;
    if (used_dropout) dffn.array() *= lt.ffn_drop.array();
    gl.w2.noalias() += lt.g.transpose() * dffn;
    gl.b2 += dffn.colwise().sum();
    Mat dg = dffn * l.w2.transpose();
    Mat dz = dg.array() * lt.z.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
    gl.w1.noalias() += lt.x_mid.transpose() * dz;
    gl.b1 += dz.colwise().sum();
    dx_mid.noalias() += dz * l.w1.transpose();

    // First layer norm.
    Mat dresid1;
    detail::layer_norm_backward<Scalar>(dx_mid, lt.xhat1, lt.rstd1, l.ln1_gamma, dresid1,
                                        gl.ln1_gamma, gl.ln1_beta);
    Mat dx_in = dresid1;
    Mat dattn_out = dresid1;
    if (used_dropout) dattn_out.array() *= lt.attn_out_drop.array();
    gl.wo.noalias() += lt.context.transpose() * dattn_out;
    gl.bo += dattn_out.colwise().sum();
    Mat dcontext = dattn_out * l.wo.transpose();

    Mat dq(S, D), dkm(S, D), dv(S, D);
    for (int h = 0; h < H; ++h) {
      auto vh = lt.v.middleCols(h * dk, dk);
      const Mat& p = lt.attn_p[static_cast<size_t>(h)];
      Mat p_used = p;
      if (used_dropout) p_used.array() *= lt.attn_drop[static_cast<size_t>(h)].array();
      auto dctx = dcontext.middleCols(h * dk, dk);
      Mat dp_used = dctx * vh.transpose();
      dv.middleCols(h * dk, dk).noalias() = p_used.transpose() * dctx;
      if (used_dropout) dp_used.array() *= lt.attn_drop[static_cast<size_t>(h)].array();
      // Softmax backward row by row: ds = p .* (dp - (dp . p)).
      Mat dscores(S, S);
      for (int r = 0; r < S; ++r) {
        double dot = 0;
        for (int c = 0; c < S; ++c)
          dot += static_cast<double>(dp_used(r, c)) * static_cast<double>(p(r, c));
        for (int c = 0; c < S; ++c)
          dscores(r, c) = static_cast<Scalar>(static_cast<double>(p(r, c)) *
                                              (static_cast<double>(dp_used(r, c)) - dot));
      }
      dscores *= inv_sqrt_dk;
      auto qh = lt.q.middleCols(h * dk, dk);
      auto kh = lt.k.middleCols(h * dk, dk);
      dq.middleCols(h * dk, dk).noalias() = dscores * kh;
      dkm.middleCols(h * dk, dk).noalias() = dscores.transpose() * qh;
    }
    gl.wq.noalias() += lt.x_in.transpose() * dq;
    gl.bq += dq.colwise().sum();
    gl.wk.noalias() += lt.x_in.transpose() * dkm;
    gl.bk += dkm.colwise().sum();
    gl.wv.noalias() += lt.x_in.transpose() * dv;
    gl.bv += dv.colwise().sum();
    dx_in.noalias() += dq * l.wq.transpose();
    dx_in.noalias() += dkm * l.wk.transpose();
    dx_in.noalias() += dv * l.wv.transpose();
    dx = dx_in;
  }

  if (used_dropout) dx.array() *= trace->emb_drop.array();
  Mat dx0;
  detail::layer_norm_backward<Scalar>(dx, trace->xhat_e, trace->rstd_e, params.emb_ln_gamma, dx0,
                                      grads.emb_ln_gamma, grads.emb_ln_beta);
  for (int s = 0; s < S; ++s) {
    grads.tok_emb.row(mc.chunk.token_ids[static_cast<size_t>(s)]) += dx0.row(s);
    grads.pos_emb.row(s) += dx0.row(s);
  }
}

template <typename Scalar>
Params<Scalar> backward(const Params<Scalar>& params, const ChunkPrediction& pred) {
  Params<Scalar> grads = Params<Scalar>::zeros(params.config);
  backward_into(params, pred, grads);
  return grads;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

template <typename Scalar>
struct AdamState {
  using Mat = typename Params<Scalar>::Mat;
  std::vector<Mat> m, v;

  static AdamState like(const Params<Scalar>& p) {
    AdamState st;
    p.for_each_tensor([&](const std::string&, const Mat& t) {
      st.m.push_back(Mat::Zero(t.rows(), t.cols()));
      st.v.push_back(Mat::Zero(t.rows(), t.cols()));
    });
    return st;
  }
};

// Decoupled weight decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <typename Scalar>
void adamw_step(Params<Scalar>& params, const Params<Scalar>& grads, AdamState<Scalar>& state,
                const TrainConfig& tc, int step) {
  using Mat = typename Params<Scalar>::Mat;
  if (step < 1) fail(Errc::bad_config, "optimizer step numbering starts at 1");
  if (!grads.all_finite()) fail(Errc::non_finite_gradient, "gradient contains inf or nan");

  std::vector<const Mat*> grad_list;
  grads.for_each_tensor([&](const std::string&, const Mat& g) { grad_list.push_back(&g); });

  const Scalar b1 = static_cast<Scalar>(tc.beta1), b2 = static_cast<Scalar>(tc.beta2);
  const Scalar lr = static_cast<Scalar>(tc.lr), wd = static_cast<Scalar>(tc.weight_decay);
  const Scalar eps = static_cast<Scalar>(tc.epsilon);
  const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(tc.beta1, step));
  const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(tc.beta2, step));

  size_t idx = 0;
  params.for_each_tensor([&](const std::string&, Mat& p) {
    const Mat& g = *grad_list[idx];
    Mat& m = state.m[idx];
    Mat& v = state.v[idx];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = (b2 * v.array() + (Scalar(1) - b2) * g.array().square()).matrix();
    auto m_hat = m.array() / bc1;
    auto v_hat = v.array() / bc2;
    p.array() -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p.array());
    ++idx;
  });
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_nll = 0;
  double val_nll = 0;
};

template <typename Scalar>
struct TrainResult {
  Params<Scalar> params;  // best-validation parameters
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_nll = 0;
};

namespace detail {

// Static-partition parallel map with a fixed-order reduction done by the
// caller; per-index work must be independent.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  std::exception_ptr first_error;
  std::mutex err_mu;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

template <typename Scalar>
void accumulate(Params<Scalar>& into, const Params<Scalar>& other, Scalar factor) {
  using Mat = typename Params<Scalar>::Mat;
  std::vector<const Mat*> src;
  other.for_each_tensor([&](const std::string&, const Mat& t) { src.push_back(&t); });
  size_t idx = 0;
  into.for_each_tensor([&](const std::string&, Mat& t) { t += factor * (*src[idx++]); });
}

}  // namespace detail

template <typename Scalar>
TrainResult<Scalar> train(const std::vector<Chunk>& train_chunks,
                          const std::vector<Chunk>& val_chunks, const ModelConfig& mc,
                          const TrainConfig& tc) {
  mc.validate();
  tc.validate();
  if (train_chunks.empty()) fail(Errc::empty_set, "training chunk set is empty");
  if (val_chunks.empty()) fail(Errc::empty_set, "validation chunk set is empty");

  Params<Scalar> params = Params<Scalar>::random_init(mc, tc.seed);
  AdamState<Scalar> state = AdamState<Scalar>::like(params);

  // Validation masks are frozen across epochs so early stopping compares
  // like with like.
  std::vector<MaskedChunk> val_masked;
  val_masked.reserve(val_chunks.size());
  for (const Chunk& c : val_chunks) val_masked.push_back(mask(c, tc.mask_rate, mix64(tc.seed, 0x76616cull)));

  auto eval_mean_nll = [&](const Params<Scalar>& p) {
    std::vector<double> losses(val_masked.size());
    detail::parallel_for(static_cast<int>(val_masked.size()), tc.threads, [&](int i) {
      ChunkPrediction pred = forward(p, val_masked[static_cast<size_t>(i)], Mode::eval);
      losses[static_cast<size_t>(i)] = nll_loss(pred);
    });
    double sum = 0;
    for (double l : losses) sum += l;
    return sum / static_cast<double>(losses.size());
  };

  TrainResult<Scalar> result;
  result.params = params;
  result.best_val_nll = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
  int step = 0;

  std::vector<int> order(train_chunks.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    // Fresh masks and a fresh order every epoch.
    DetRng shuffle_rng(mix64(tc.seed, mix64(0x73687566ull, static_cast<uint64_t>(epoch))));
    shuffle_rng.shuffle(order);
    const uint64_t mask_seed = mix64(tc.seed, mix64(0x6d61736bull, static_cast<uint64_t>(epoch)));

    double epoch_loss_sum = 0;
    int64_t epoch_loss_count = 0;
    // Per-thread gradient accumulators; chunk-to-thread assignment and the
    // final reduction order are fixed, so training is bitwise reproducible
    // for a given thread count.
    const int pool = std::max(1, std::min(tc.threads, tc.batch_size));
    std::vector<Params<Scalar>> thread_grads;
    thread_grads.reserve(static_cast<size_t>(pool));
    for (int t = 0; t < pool; ++t) thread_grads.push_back(Params<Scalar>::zeros(mc));

    for (size_t batch_start = 0; batch_start < order.size();
         batch_start += static_cast<size_t>(tc.batch_size)) {
      const int bsz = static_cast<int>(
          std::min(static_cast<size_t>(tc.batch_size), order.size() - batch_start));
      std::vector<double> batch_losses(static_cast<size_t>(bsz));
      std::exception_ptr worker_error;
      std::mutex err_mu;
      auto worker = [&](int t) {
        try {
          for (int bi = t; bi < bsz; bi += pool) {
            const Chunk& c =
                train_chunks[static_cast<size_t>(order[batch_start + static_cast<size_t>(bi)])];
            MaskedChunk mcd = mask(c, tc.mask_rate, mask_seed);
            DetRng drop_rng(mix64(mask_seed,
                                  mix64(0x64726f70ull,
                                        fnv1a64(c.capture_id) ^ static_cast<uint64_t>(c.chunk_index))));
            ChunkPrediction pred = forward(params, mcd, Mode::train, &drop_rng);
            batch_losses[static_cast<size_t>(bi)] = nll_loss(pred);
            backward_into(params, pred, thread_grads[static_cast<size_t>(t)]);
          }
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!worker_error) worker_error = std::current_exception();
        }
      };
      if (pool == 1) {
        worker(0);
      } else {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<size_t>(pool));
        for (int t = 0; t < pool; ++t) threads.emplace_back(worker, t);
        for (auto& th : threads) th.join();
      }
      if (worker_error) std::rethrow_exception(worker_error);
      for (int bi = 0; bi < bsz; ++bi) {
        double loss = batch_losses[static_cast<size_t>(bi)];
        if (!std::isfinite(loss)) fail(Errc::diverged_loss, "non-finite training loss");
        epoch_loss_sum += loss;
        ++epoch_loss_count;
      }
      const Scalar inv_b = static_cast<Scalar>(1.0 / bsz);
      Params<Scalar>& grads = thread_grads[0];
      for (int t = 1; t < pool; ++t) detail::accumulate(grads, thread_grads[static_cast<size_t>(t)], Scalar(1));
      grads.for_each_tensor([&](const std::string&, typename Params<Scalar>::Mat& g) { g *= inv_b; });
      adamw_step(params, grads, state, tc, ++step);
      for (int t = 0; t < pool; ++t)
        thread_grads[static_cast<size_t>(t)].for_each_tensor(
            [](const std::string&, typename Params<Scalar>::Mat& g) { g.setZero(); });
    }

    double val_nll = eval_mean_nll(params);
    if (!std::isfinite(val_nll)) fail(Errc::diverged_loss, "non-finite validation loss");
    result.log.push_back({epoch, epoch_loss_sum / static_cast<double>(epoch_loss_count), val_nll});

    if (val_nll < result.best_val_nll) {
      result.best_val_nll = val_nll;
      result.best_epoch = epoch;
      result.params = params;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
      if (epochs_since_best >= tc.patience) break;
    }
  }
  return result;
}

// Order-preserving batch prediction; chunks are independent of one another.
template <typename Scalar>
std::vector<ChunkPrediction> predict(const Params<Scalar>& params,
                                     const std::vector<MaskedChunk>& chunks, int threads = 1) {
  std::vector<ChunkPrediction> out(chunks.size());
  detail::parallel_for(static_cast<int>(chunks.size()), threads, [&](int i) {
    out[static_cast<size_t>(i)] = forward(params, chunks[static_cast<size_t>(i)], Mode::eval);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "LCAP", version, text header, float32 tensors.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  ModelConfig model;
  TrainConfig train;
  uint64_t vocab_hash = 0;
  std::string repr = "pct-dict";
  uint64_t config_hash = 0;
};

void write_checkpoint_file(const std::string& path, const CheckpointMeta& meta,
                           const std::vector<std::pair<std::string, Eigen::MatrixXf>>& tensors);
void read_checkpoint_file(const std::string& path, CheckpointMeta& meta,
                          std::vector<std::pair<std::string, Eigen::MatrixXf>>& tensors);

template <typename Scalar>
void save_checkpoint(const Params<Scalar>& params, const CheckpointMeta& meta_in,
                     const std::string& path) {
  CheckpointMeta meta = meta_in;
  meta.model = params.config;
  std::vector<std::pair<std::string, Eigen::MatrixXf>> tensors;
  params.for_each_tensor([&](const std::string& name, const typename Params<Scalar>::Mat& t) {
    tensors.emplace_back(name, t.template cast<float>());
  });
  write_checkpoint_file(path, meta, tensors);
}

template <typename Scalar>
Params<Scalar> load_checkpoint(const std::string& path, CheckpointMeta& meta) {
  std::vector<std::pair<std::string, Eigen::MatrixXf>> tensors;
  read_checkpoint_file(path, meta, tensors);
  Params<Scalar> params = Params<Scalar>::zeros(meta.model);
  size_t idx = 0;
  params.for_each_tensor([&](const std::string& name, typename Params<Scalar>::Mat& t) {
    if (idx >= tensors.size() || tensors[idx].first != name)
      fail(Errc::shape_mismatch, "checkpoint tensor order mismatch at " + name);
    const Eigen::MatrixXf& src = tensors[idx].second;
    if (src.rows() != t.rows() || src.cols() != t.cols())
      fail(Errc::shape_mismatch, "checkpoint tensor shape mismatch at " + name);
    t = src.cast<Scalar>();
    ++idx;
  });
  if (idx != tensors.size()) fail(Errc::shape_mismatch, "checkpoint holds extra tensors");
  return params;
}

}  // namespace pcaplm
