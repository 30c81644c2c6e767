#pragma once

#include <cassert>
#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "asrlab/matrix.hpp"

namespace asrlab {

// Reverse-mode tape over Mat values. Leaves reference external storage;
// interior nodes own their values. backward() runs the recorded closures in
// reverse order and adds parameter gradients into the registered sinks.
class Tape {
 public:
  int input(const Mat* value) { return add_leaf(value, nullptr); }

  int param(const Mat* value, Mat* grad_sink) { return add_leaf(value, grad_sink); }

  const Mat& val(int i) const {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    return n.external ? *n.external : n.value;
  }

  Mat& grad(int i) { return nodes_[static_cast<std::size_t>(i)].grad; }

  int matmul(int a, int b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    int out = add_node(Mat(av.rows, bv.cols));
    matmul_acc(av, bv, value_of(out));
    record(out, [this, a, b, out] {
      matmul_a_bt_acc(grad(out), val(b), grad(a));
      matmul_at_b_acc(val(a), grad(out), grad(b));
    });
    return out;
  }

  // a * b^T
  int matmul_nt(int a, int b) {
    const Mat& av = val(a);
    const Mat& bv = val(b);
    int out = add_node(Mat(av.rows, bv.rows));
    matmul_a_bt_acc(av, bv, value_of(out));
    record(out, [this, a, b, out] {
      matmul_acc(grad(out), val(b), grad(a));
      matmul_at_b_acc(grad(out), val(a), grad(b));
    });
    return out;
  }

  int add(int a, int b) {
    const Mat& av = val(a);
    assert(av.same_shape(val(b)));
    int out = add_node(av);
    Mat& ov = value_of(out);
    const Mat& bv = val(b);
    for (std::size_t i = 0; i < ov.size(); ++i) ov.data[i] += bv.data[i];
    record(out, [this, a, b, out] {
      accumulate(grad(a), grad(out));
      accumulate(grad(b), grad(out));
    });
    return out;
  }

  // bias is 1 x C, broadcast over rows of a
  int add_row_broadcast(int a, int bias) {
    const Mat& av = val(a);
    const Mat& bv = val(bias);
    assert(bv.rows == 1 && bv.cols == av.cols);
    int out = add_node(av);
    Mat& ov = value_of(out);
    for (int r = 0; r < ov.rows; ++r) {
      double* row = ov.row(r);
      for (int c = 0; c < ov.cols; ++c) row[c] += bv.at(0, c);
    }
    record(out, [this, a, bias, out] {
      accumulate(grad(a), grad(out));
      Mat& bg = grad(bias);
      const Mat& og = grad(out);
      for (int r = 0; r < og.rows; ++r) {
        const double* row = og.row(r);
        for (int c = 0; c < og.cols; ++c) bg.at(0, c) += row[c];
      }
    });
    return out;
  }

  int scale(int a, double s) {
    int out = add_node(val(a));
    Mat& ov = value_of(out);
    for (auto& x : ov.data) x *= s;
    record(out, [this, a, s, out] {
      Mat& ag = grad(a);
      const Mat& og = grad(out);
      for (std::size_t i = 0; i < og.size(); ++i) ag.data[i] += s * og.data[i];
    });
    return out;
  }

  int gelu(int a) {
    int out = add_node(val(a));
    Mat& ov = value_of(out);
    for (auto& x : ov.data) x = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    record(out, [this, a, out] {
      Mat& ag = grad(a);
      const Mat& og = grad(out);
      const Mat& av = val(a);
      for (std::size_t i = 0; i < og.size(); ++i) {
        const double x = av.data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = std::exp(-0.5 * x * x) * kInvSqrt2Pi;
        ag.data[i] += og.data[i] * (cdf + x * pdf);
      }
    });
    return out;
  }

  // Row-wise layer norm with gain and bias (each 1 x C).
  int layernorm(int a, int gain, int bias, double eps = 1e-5) {
    const Mat& av = val(a);
    const Mat& gv = val(gain);
    const Mat& bv = val(bias);
    assert(gv.rows == 1 && gv.cols == av.cols && bv.cols == av.cols);
    int out = add_node(Mat(av.rows, av.cols));
    Mat& ov = value_of(out);
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(av.rows) * 2);
    for (int r = 0; r < av.rows; ++r) {
      const double* x = av.row(r);
      double mean = 0.0;
      for (int c = 0; c < av.cols; ++c) mean += x[c];
      mean /= av.cols;
      double var = 0.0;
      for (int c = 0; c < av.cols; ++c) var += (x[c] - mean) * (x[c] - mean);
      var /= av.cols;
      const double rstd = 1.0 / std::sqrt(var + eps);
      (*stats)[static_cast<std::size_t>(r) * 2] = mean;
      (*stats)[static_cast<std::size_t>(r) * 2 + 1] = rstd;
      double* y = ov.row(r);
      for (int c = 0; c < av.cols; ++c) {
        y[c] = (x[c] - mean) * rstd * gv.at(0, c) + bv.at(0, c);
      }
    }
    record(out, [this, a, gain, bias, out, stats] {
      const Mat& av2 = val(a);
      const Mat& gv2 = val(gain);
      const Mat& og = grad(out);
      Mat& ag = grad(a);
      Mat& gg = grad(gain);
      Mat& bg = grad(bias);
      const int C = av2.cols;
      for (int r = 0; r < av2.rows; ++r) {
        const double mean = (*stats)[static_cast<std::size_t>(r) * 2];
        const double rstd = (*stats)[static_cast<std::size_t>(r) * 2 + 1];
        const double* x = av2.row(r);
        const double* dy = og.row(r);
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (int c = 0; c < C; ++c) {
          const double xhat = (x[c] - mean) * rstd;
          const double dxhat = dy[c] * gv2.at(0, c);
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          gg.at(0, c) += dy[c] * xhat;
          bg.at(0, c) += dy[c];
        }
        double* dx = ag.row(r);
        for (int c = 0; c < C; ++c) {
          const double xhat = (x[c] - mean) * rstd;
          const double dxhat = dy[c] * gv2.at(0, c);
          dx[c] += rstd * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / C);
        }
      }
    });
    return out;
  }

  // Square score matrix; row i is softmaxed over columns 0..i, the rest 0.
  int softmax_causal(int a) {
    const Mat& av = val(a);
    assert(av.rows == av.cols);
    int out = add_node(Mat(av.rows, av.cols));
    Mat& ov = value_of(out);
    for (int r = 0; r < av.rows; ++r) {
      const double* x = av.row(r);
      double mx = x[0];
      for (int c = 1; c <= r; ++c) mx = std::max(mx, x[c]);
      double z = 0.0;
      double* y = ov.row(r);
      for (int c = 0; c <= r; ++c) {
        y[c] = std::exp(x[c] - mx);
        z += y[c];
      }
      for (int c = 0; c <= r; ++c) y[c] /= z;
    }
    record(out, [this, a, out] {
      const Mat& p = val(out);
      const Mat& og = grad(out);
      Mat& ag = grad(a);
      for (int r = 0; r < p.rows; ++r) {
        const double* pr = p.row(r);
        const double* dy = og.row(r);
        double dot = 0.0;
        for (int c = 0; c <= r; ++c) dot += pr[c] * dy[c];
        double* dx = ag.row(r);
        for (int c = 0; c <= r; ++c) dx[c] += pr[c] * (dy[c] - dot);
      }
    });
    return out;
  }

  int slice_cols(int a, int c0, int width) {
    const Mat& av = val(a);
    assert(c0 >= 0 && c0 + width <= av.cols);
    int out = add_node(Mat(av.rows, width));
    Mat& ov = value_of(out);
    for (int r = 0; r < av.rows; ++r) {
      const double* src = av.row(r) + c0;
      double* dst = ov.row(r);
      for (int c = 0; c < width; ++c) dst[c] = src[c];
    }
    record(out, [this, a, c0, width, out] {
      Mat& ag = grad(a);
      const Mat& og = grad(out);
      for (int r = 0; r < og.rows; ++r) {
        double* dst = ag.row(r) + c0;
        const double* src = og.row(r);
        for (int c = 0; c < width; ++c) dst[c] += src[c];
      }
    });
    return out;
  }

  int slice_rows(int a, int r0, int count) {
    const Mat& av = val(a);
    assert(r0 >= 0 && r0 + count <= av.rows);
    int out = add_node(Mat(count, av.cols));
    Mat& ov = value_of(out);
    for (int r = 0; r < count; ++r) {
      const double* src = av.row(r0 + r);
      double* dst = ov.row(r);
      for (int c = 0; c < av.cols; ++c) dst[c] = src[c];
    }
    record(out, [this, a, r0, count, out] {
      Mat& ag = grad(a);
      const Mat& og = grad(out);
      for (int r = 0; r < count; ++r) {
        double* dst = ag.row(r0 + r);
        const double* src = og.row(r);
        for (int c = 0; c < og.cols; ++c) dst[c] += src[c];
      }
    });
    return out;
  }

  int concat_cols(const std::vector<int>& parts) {
    assert(!parts.empty());
    int rows = val(parts[0]).rows;
    int cols = 0;
    for (int p : parts) cols += val(p).cols;
    int out = add_node(Mat(rows, cols));
    Mat& ov = value_of(out);
    int off = 0;
    for (int p : parts) {
      const Mat& pv = val(p);
      for (int r = 0; r < rows; ++r) {
        const double* src = pv.row(r);
        double* dst = ov.row(r) + off;
        for (int c = 0; c < pv.cols; ++c) dst[c] = src[c];
      }
      off += pv.cols;
    }
    auto parts_copy = std::make_shared<std::vector<int>>(parts);
    record(out, [this, parts_copy, out] {
      const Mat& og = grad(out);
      int off2 = 0;
      for (int p : *parts_copy) {
        Mat& pg = grad(p);
        for (int r = 0; r < og.rows; ++r) {
          const double* src = og.row(r) + off2;
          double* dst = pg.row(r);
          for (int c = 0; c < pg.cols; ++c) dst[c] += src[c];
        }
        off2 += pg.cols;
      }
    });
    return out;
  }

  int concat_rows(const std::vector<int>& parts) {
    assert(!parts.empty());
    int cols = val(parts[0]).cols;
    int rows = 0;
    for (int p : parts) rows += val(p).rows;
    int out = add_node(Mat(rows, cols));
    Mat& ov = value_of(out);
    int off = 0;
    for (int p : parts) {
      const Mat& pv = val(p);
      for (int r = 0; r < pv.rows; ++r) {
        const double* src = pv.row(r);
        double* dst = ov.row(off + r);
        for (int c = 0; c < cols; ++c) dst[c] = src[c];
      }
      off += pv.rows;
    }
    auto parts_copy = std::make_shared<std::vector<int>>(parts);
    record(out, [this, parts_copy, out] {
      const Mat& og = grad(out);
      int off2 = 0;
      for (int p : *parts_copy) {
        Mat& pg = grad(p);
        for (int r = 0; r < pg.rows; ++r) {
          const double* src = og.row(off2 + r);
          double* dst = pg.row(r);
          for (int c = 0; c < og.cols; ++c) dst[c] += src[c];
        }
        off2 += pg.rows;
      }
    });
    return out;
  }

  // Embedding lookup; backward scatter-adds into the table gradient.
  int gather_rows(int table, std::vector<int> idx) {
    const Mat& tv = val(table);
    int out = add_node(Mat(static_cast<int>(idx.size()), tv.cols));
    Mat& ov = value_of(out);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const double* src = tv.row(idx[r]);
      double* dst = ov.row(static_cast<int>(r));
      for (int c = 0; c < tv.cols; ++c) dst[c] = src[c];
    }
    auto idx_copy = std::make_shared<std::vector<int>>(std::move(idx));
    record(out, [this, table, idx_copy, out] {
      Mat& tg = grad(table);
      const Mat& og = grad(out);
      for (std::size_t r = 0; r < idx_copy->size(); ++r) {
        double* dst = tg.row((*idx_copy)[r]);
        const double* src = og.row(static_cast<int>(r));
        for (int c = 0; c < og.cols; ++c) dst[c] += src[c];
      }
    });
    return out;
  }

  // 1-D convolution over rows. x: T x Cin, w: Cout x (k*Cin), bias: 1 x Cout,
  // kernel k = 3, padding 1. T_out = ceil(T / stride).
  int conv1d(int x, int w, int bias, int stride) {
    const Mat& xv = val(x);
    const Mat& wv = val(w);
    const Mat& bv = val(bias);
    constexpr int k = 3;
    const int cin = xv.cols;
    const int cout = wv.rows;
    assert(wv.cols == k * cin && bv.cols == cout);
    const int t_out = (xv.rows + 2 - k) / stride + 1;
    int out = add_node(Mat(t_out, cout));
    Mat& ov = value_of(out);
    for (int t = 0; t < t_out; ++t) {
      double* y = ov.row(t);
      for (int o = 0; o < cout; ++o) y[o] = bv.at(0, o);
      for (int dk = 0; dk < k; ++dk) {
        const int src = t * stride + dk - 1;
        if (src < 0 || src >= xv.rows) continue;
        const double* xr = xv.row(src);
        for (int o = 0; o < cout; ++o) {
          const double* wr = wv.row(o) + dk * cin;
          double s = 0.0;
          for (int c = 0; c < cin; ++c) s += xr[c] * wr[c];
          y[o] += s;
        }
      }
    }
    record(out, [this, x, w, bias, stride, out] {
      constexpr int kk = 3;
      const Mat& xv2 = val(x);
      const Mat& wv2 = val(w);
      const Mat& og = grad(out);
      Mat& xg = grad(x);
      Mat& wg = grad(w);
      Mat& bg = grad(bias);
      const int cin2 = xv2.cols;
      for (int t = 0; t < og.rows; ++t) {
        const double* dy = og.row(t);
        for (int o = 0; o < og.cols; ++o) bg.at(0, o) += dy[o];
        for (int dk = 0; dk < kk; ++dk) {
          const int src = t * stride + dk - 1;
          if (src < 0 || src >= xv2.rows) continue;
          const double* xr = xv2.row(src);
          double* dxr = xg.row(src);
          for (int o = 0; o < og.cols; ++o) {
            const double g = dy[o];
            if (g == 0.0) continue;
            const double* wr = wv2.row(o) + dk * cin2;
            double* dwr = wg.row(o) + dk * cin2;
            for (int c = 0; c < cin2; ++c) {
              dxr[c] += g * wr[c];
              dwr[c] += g * xr[c];
            }
          }
        }
      }
    });
    return out;
  }

  // Sum of per-row softmax NLL over rows with target >= 0. Returns a 1x1 node.
  int cross_entropy(int logits, std::vector<int> targets) {
    const Mat& lv = val(logits);
    assert(static_cast<int>(targets.size()) == lv.rows);
    int out = add_node(Mat(1, 1));
    auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
    double loss = 0.0;
    for (int r = 0; r < lv.rows; ++r) {
      const int t = (*tgt)[static_cast<std::size_t>(r)];
      if (t < 0) continue;
      const double* x = lv.row(r);
      double mx = x[0];
      for (int c = 1; c < lv.cols; ++c) mx = std::max(mx, x[c]);
      double z = 0.0;
      for (int c = 0; c < lv.cols; ++c) z += std::exp(x[c] - mx);
      loss += mx + std::log(z) - x[t];
    }
    value_of(out).at(0, 0) = loss;
    record(out, [this, logits, tgt, out] {
      const double g = grad(out).at(0, 0);
      const Mat& lv2 = val(logits);
      Mat& lg = grad(logits);
      for (int r = 0; r < lv2.rows; ++r) {
        const int t = (*tgt)[static_cast<std::size_t>(r)];
        if (t < 0) continue;
        const double* x = lv2.row(r);
        double mx = x[0];
        for (int c = 1; c < lv2.cols; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (int c = 0; c < lv2.cols; ++c) z += std::exp(x[c] - mx);
        double* dx = lg.row(r);
        for (int c = 0; c < lv2.cols; ++c) {
          dx[c] += g * (std::exp(x[c] - mx) / z - (c == t ? 1.0 : 0.0));
        }
      }
    });
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and runs the tape backward. Parameter leaf
  // gradients are added into their registered sinks.
  void backward(int loss_node) {
    for (auto& n : nodes_) {
      const Mat& v = n.external ? *n.external : n.value;
      n.grad = Mat(v.rows, v.cols);
    }
    nodes_[static_cast<std::size_t>(loss_node)].grad.at(0, 0) = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back) n.back();
    }
    for (auto& n : nodes_) {
      if (n.grad_sink) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          n.grad_sink->data[i] += n.grad.data[i];
        }
      }
    }
  }

  double scalar(int node) const { return val(node).at(0, 0); }

 private:
  struct Node {
    Mat value;                   // owned (interior nodes)
    const Mat* external = nullptr;  // leaves
    Mat* grad_sink = nullptr;
    Mat grad;
    std::function<void()> back;
  };

  static constexpr double kInvSqrt2 = 0.70710678118654752440;
  static constexpr double kInvSqrt2Pi = 0.39894228040143267794;

  int add_leaf(const Mat* value, Mat* grad_sink) {
    Node n;
    n.external = value;
    n.grad_sink = grad_sink;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_node(Mat value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Mat& value_of(int i) { return nodes_[static_cast<std::size_t>(i)].value; }

  void record(int node, std::function<void()> back) {
    nodes_[static_cast<std::size_t>(node)].back = std::move(back);
  }

  static void accumulate(Mat& dst, const Mat& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
  }

  std::deque<Node> nodes_;  // deque: references stay valid across push_back
};

}  // namespace asrlab
