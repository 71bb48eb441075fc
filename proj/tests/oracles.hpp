#pragma once

// Naive reference implementations. Plain nested loops over std::vector,
// written without the library's ops so the tests compare against something
// independent.

#include <cmath>
#include <cstddef>
#include <vector>

#include "nrnm/rng.hpp"
#include "nrnm/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;

inline Mat from(const nrnm::Tensor& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.storage()[r * t.cols() + c];
  return m;
}

inline Vec vec(const nrnm::Tensor& t) { return t.storage(); }

inline nrnm::Tensor to_tensor(const Mat& m) {
  nrnm::Tensor t({m.size(), m.empty() ? 0 : m[0].size()});
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < m[r].size(); ++c) t.at(r, c) = m[r][c];
  return t;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), Vec(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b[0].size(); ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < b.size(); ++j) s += a[i][j] * b[j][k];
      out[i][k] = s;
    }
  return out;
}

// Row vector times matrix.
inline Vec vecmat(const Vec& x, const Mat& w) {
  Vec out(w[0].size(), 0.0);
  for (std::size_t j = 0; j < w[0].size(); ++j)
    for (std::size_t i = 0; i < x.size(); ++i) out[j] += x[i] * w[i][j];
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec softmax(const Vec& z) {
  double mx = z[0];
  for (double v : z) mx = v > mx ? v : mx;
  Vec e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(z[i] - mx);
  for (double& v : e) v /= s;
  return e;
}

inline nrnm::Tensor random_tensor(nrnm::Shape shape, nrnm::Rng& rng, double lo = -1.0, double hi = 1.0) {
  nrnm::Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

struct LstmWeights {
  Mat Wi, Wf, Wo, Wc, Ui, Uf, Uo, Uc;
  Vec bi, bf, bo, bc;
};

struct LstmState {
  Vec h, c;
};

// c' = f*c + i*g (+ extra), h' = o*tanh(c')
inline LstmState lstm_step(const LstmWeights& w, const LstmState& s, const Vec& x, const Vec* extra = nullptr) {
  const std::size_t n = s.h.size();
  Vec xi = vecmat(x, w.Wi), xf = vecmat(x, w.Wf), xo = vecmat(x, w.Wo), xc = vecmat(x, w.Wc);
  Vec hi = vecmat(s.h, w.Ui), hf = vecmat(s.h, w.Uf), ho = vecmat(s.h, w.Uo), hc = vecmat(s.h, w.Uc);
  LstmState out{Vec(n), Vec(n)};
  for (std::size_t j = 0; j < n; ++j) {
    const double i = sigmoid(xi[j] + hi[j] + w.bi[j]);
    const double f = sigmoid(xf[j] + hf[j] + w.bf[j]);
    const double o = sigmoid(xo[j] + ho[j] + w.bo[j]);
    const double g = std::tanh(xc[j] + hc[j] + w.bc[j]);
    out.c[j] = f * s.c[j] + i * g + (extra ? (*extra)[j] : 0.0);
    out.h[j] = o * std::tanh(out.c[j]);
  }
  return out;
}

struct GruWeights {
  Mat Wz, Wr, Wn, Uz, Ur, Un;
  Vec bz, br, bn;
};

// z = s(xWz + hUz + bz), r = s(xWr + hUr + br), n = tanh(xWn + (r*h)Un + bn),
// h' = (1 - z) * n + z * h
inline Vec gru_step(const GruWeights& w, const Vec& h, const Vec& x) {
  const std::size_t n = h.size();
  Vec xz = vecmat(x, w.Wz), xr = vecmat(x, w.Wr), xn = vecmat(x, w.Wn);
  Vec hz = vecmat(h, w.Uz), hr = vecmat(h, w.Ur);
  Vec r(n), z(n);
  for (std::size_t j = 0; j < n; ++j) {
    z[j] = sigmoid(xz[j] + hz[j] + w.bz[j]);
    r[j] = sigmoid(xr[j] + hr[j] + w.br[j]);
  }
  Vec rh(n);
  for (std::size_t j = 0; j < n; ++j) rh[j] = r[j] * h[j];
  Vec hn = vecmat(rh, w.Un);
  Vec out(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double cand = std::tanh(xn[j] + hn[j] + w.bn[j]);
    out[j] = (1.0 - z[j]) * cand + z[j] * h[j];
  }
  return out;
}

// Multi-head attention over one block C [R, m] with explicit column slicing.
struct AttentionOut {
  Mat out;                     // [R, m], heads concatenated (before W_o)
  std::vector<Mat> weights;    // per head [R, R]
};

inline AttentionOut attention(const Mat& Q, const Mat& K, const Mat& V, std::size_t heads, double scale) {
  const std::size_t R = Q.size(), m = Q[0].size(), dk = m / heads;
  AttentionOut res{Mat(R, Vec(m, 0.0)), {}};
  for (std::size_t h = 0; h < heads; ++h) {
    Mat w(R, Vec(R));
    for (std::size_t i = 0; i < R; ++i) {
      Vec logits(R);
      for (std::size_t j = 0; j < R; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dk; ++c) s += Q[i][h * dk + c] * K[j][h * dk + c];
        logits[j] = s * scale;
      }
      w[i] = softmax(logits);
      for (std::size_t c = 0; c < dk; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < R; ++j) acc += w[i][j] * V[j][h * dk + c];
        res.out[i][h * dk + c] = acc;
      }
    }
    res.weights.push_back(w);
  }
  return res;
}

}  // namespace oracle
