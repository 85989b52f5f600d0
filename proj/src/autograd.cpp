#include "gamblenet/autograd.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

namespace gamblenet::nn {
namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

struct ConvGeometry {
  int channels, height, width, kernel, stride, pad, out_height, out_width;
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_height * out_width; }
};

// Unfolds (C, H, W) into a (C*k*k, Ho*Wo) patch matrix.
void im2col(const double* image, const ConvGeometry& geo, double* cols) {
  const int k = geo.kernel;
  for (int c = 0; c < geo.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * geo.cols();
        for (int oy = 0; oy < geo.out_height; ++oy) {
          const int iy = oy * geo.stride - geo.pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * geo.out_width;
          if (iy < 0 || iy >= geo.height) {
            std::fill(dst, dst + geo.out_width, 0.0);
            continue;
          }
          const double* src = image + (static_cast<std::size_t>(c) * geo.height + iy) * geo.width;
          for (int ox = 0; ox < geo.out_width; ++ox) {
            const int ix = ox * geo.stride - geo.pad + kx;
            dst[ox] = (ix >= 0 && ix < geo.width) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds patch columns back into (C, H, W).
void col2im(const double* cols, const ConvGeometry& geo, double* image) {
  const int k = geo.kernel;
  std::fill(image, image + static_cast<std::size_t>(geo.channels) * geo.height * geo.width, 0.0);
  for (int c = 0; c < geo.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + static_cast<std::size_t>((c * k + ky) * k + kx) * geo.cols();
        for (int oy = 0; oy < geo.out_height; ++oy) {
          const int iy = oy * geo.stride - geo.pad + ky;
          if (iy < 0 || iy >= geo.height) continue;
          const double* src = row + static_cast<std::size_t>(oy) * geo.out_width;
          double* dst = image + (static_cast<std::size_t>(c) * geo.height + iy) * geo.width;
          for (int ox = 0; ox < geo.out_width; ++ox) {
            const int ix = ox * geo.stride - geo.pad + kx;
            if (ix >= 0 && ix < geo.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void check_scalar(const Tensor& t, const char* what) {
  require(t.size() == 1, ErrorCode::kShapeMismatch, std::string(what) + " expects a scalar node");
}

Tensor scalar(double v) { return Tensor(1, 1, 1, v); }

}  // namespace

int conv_output_size(int input, int kernel, int stride, int pad) {
  return (input + 2 * pad - kernel) / stride + 1;
}

int conv_transpose_output_size(int input, int kernel, int stride, int pad) {
  return (input - 1) * stride - 2 * pad + kernel;
}

// Graph --------------------------------------------------------------------

Graph::Node& Graph::node(Var v) {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorCode::kInvalidArgument,
          "variable does not belong to this graph");
  return *nodes_[static_cast<std::size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorCode::kInvalidArgument,
          "variable does not belong to this graph");
  return *nodes_[static_cast<std::size_t>(v.id)];
}

Var Graph::constant(Tensor value) { return input(std::move(value), false); }

Var Graph::input(Tensor value, bool requires_grad) {
  auto n = std::make_unique<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::parameter(Parameter& param) {
  Var v = input(param.value, param.trainable);
  if (param.trainable) nodes_.back()->param = &param;
  return v;
}

Var Graph::record(Tensor value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (Var p : parents) needs = needs || node(p).requires_grad;
  auto n = std::make_unique<Node>();
  n->value = std::move(value);
  n->requires_grad = needs;
  if (needs) n->backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = node(v);
  if (n.grad.empty() && !n.value.empty()) {
    n.grad = Tensor(n.value.channels(), n.value.height(), n.value.width());
  }
  return n.grad;
}

const Tensor& Graph::grad(Var v) { return grad_buffer(v); }

void Graph::backward(Var out) {
  check_scalar(value(out), "backward");
  for (auto& n : nodes_) n->grad = Tensor();
  if (!node(out).requires_grad) return;
  grad_buffer(out)[0] = 1.0;
  for (int id = out.id; id >= 0; --id) {
    Node& n = *nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      Tensor& acc = n.param->grad;
      if (!acc.same_shape(n.value)) acc = Tensor(n.value.channels(), n.value.height(), n.value.width());
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += n.grad[i];
    }
  }
}

// Layers -------------------------------------------------------------------

Var conv2d(Graph& g, Var x, Var weight, Var bias, int kernel, int stride, int pad) {
  const Tensor& in = g.value(x);
  const Tensor& w = g.value(weight);
  const int out_ch = w.channels();
  require(w.height() == in.channels() && w.width() == kernel * kernel, ErrorCode::kShapeMismatch,
          "conv2d weight " + w.shape_string() + " incompatible with input " + in.shape_string());
  ConvGeometry geo{in.channels(), in.height(), in.width(), kernel, stride, pad,
                   conv_output_size(in.height(), kernel, stride, pad),
                   conv_output_size(in.width(), kernel, stride, pad)};
  require(geo.out_height > 0 && geo.out_width > 0, ErrorCode::kShapeMismatch,
          "conv2d input " + in.shape_string() + " too small for kernel");
  auto cols = std::make_shared<Tensor::Storage>(static_cast<std::size_t>(geo.rows()) * geo.cols());
  im2col(in.data(), geo, cols->data());

  Tensor out(out_ch, geo.out_height, geo.out_width);
  MatrixMap y(out.data(), out_ch, geo.cols());
  y.noalias() = ConstMatrixMap(w.data(), out_ch, geo.rows()) * ConstMatrixMap(cols->data(), geo.rows(), geo.cols());
  const Tensor& b = g.value(bias);
  for (int c = 0; c < out_ch; ++c) y.row(c).array() += b[c];

  return g.record(std::move(out), {x, weight, bias}, [=](Graph& graph, int self) {
    const Tensor& dy = graph.grad_buffer(Var{self});
    ConstMatrixMap dy_m(dy.data(), out_ch, geo.cols());
    if (graph.requires_grad(weight)) {
      Tensor& dw = graph.grad_buffer(weight);
      MatrixMap(dw.data(), out_ch, geo.rows()).noalias() +=
          dy_m * ConstMatrixMap(cols->data(), geo.rows(), geo.cols()).transpose();
    }
    if (graph.requires_grad(bias)) {
      Tensor& db = graph.grad_buffer(bias);
      for (int c = 0; c < out_ch; ++c) db[c] += dy_m.row(c).sum();
    }
    if (graph.requires_grad(x)) {
      const Tensor& wv = graph.value(weight);
      Matrix dcols = ConstMatrixMap(wv.data(), out_ch, geo.rows()).transpose() * dy_m;
      Tensor dx(geo.channels, geo.height, geo.width);
      col2im(dcols.data(), geo, dx.data());
      Tensor& acc = graph.grad_buffer(x);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += dx[i];
    }
  });
}

Var conv_transpose2d(Graph& g, Var x, Var weight, Var bias, int kernel, int stride, int pad) {
  const Tensor& in = g.value(x);
  const Tensor& w = g.value(weight);
  const int in_ch = in.channels();
  const int out_ch = w.height();
  require(w.channels() == in_ch && w.width() == kernel * kernel, ErrorCode::kShapeMismatch,
          "conv_transpose2d weight " + w.shape_string() + " incompatible with input " +
              in.shape_string());
  const int oh = conv_transpose_output_size(in.height(), kernel, stride, pad);
  const int ow = conv_transpose_output_size(in.width(), kernel, stride, pad);
  require(oh > 0 && ow > 0, ErrorCode::kShapeMismatch, "conv_transpose2d output is empty");
  // Geometry of the forward convolution this layer is the adjoint of.
  ConvGeometry geo{out_ch, oh, ow, kernel, stride, pad, in.height(), in.width()};
  require(conv_output_size(oh, kernel, stride, pad) == in.height() &&
              conv_output_size(ow, kernel, stride, pad) == in.width(),
          ErrorCode::kShapeMismatch, "conv_transpose2d geometry is not invertible");

  Matrix cols = ConstMatrixMap(w.data(), in_ch, geo.rows()).transpose() *
                ConstMatrixMap(in.data(), in_ch, geo.cols());
  Tensor out(out_ch, oh, ow);
  col2im(cols.data(), geo, out.data());
  const Tensor& b = g.value(bias);
  for (int c = 0; c < out_ch; ++c) {
    for (double& v : out.channel(c)) v += b[c];
  }

  return g.record(std::move(out), {x, weight, bias}, [=](Graph& graph, int self) {
    const Tensor& dy = graph.grad_buffer(Var{self});
    if (graph.requires_grad(bias)) {
      Tensor& db = graph.grad_buffer(bias);
      for (int c = 0; c < out_ch; ++c) {
        double s = 0.0;
        for (double v : dy.channel(c)) s += v;
        db[c] += s;
      }
    }
    const bool need_w = graph.requires_grad(weight);
    const bool need_x = graph.requires_grad(x);
    if (!need_w && !need_x) return;
    Matrix dcols(geo.rows(), geo.cols());
    im2col(dy.data(), geo, dcols.data());
    if (need_w) {
      const Tensor& xv = graph.value(x);
      Tensor& dw = graph.grad_buffer(weight);
      MatrixMap(dw.data(), in_ch, geo.rows()).noalias() +=
          ConstMatrixMap(xv.data(), in_ch, geo.cols()) * dcols.transpose();
    }
    if (need_x) {
      const Tensor& wv = graph.value(weight);
      Tensor& dx = graph.grad_buffer(x);
      MatrixMap(dx.data(), in_ch, geo.cols()).noalias() +=
          ConstMatrixMap(wv.data(), in_ch, geo.rows()) * dcols;
    }
  });
}

Var instance_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
  const Tensor& in = g.value(x);
  const Tensor& ga = g.value(gamma);
  const Tensor& be = g.value(beta);
  const int channels = in.channels();
  const int n = in.plane();
  require(ga.size() == static_cast<std::size_t>(channels) && be.size() == ga.size(),
          ErrorCode::kShapeMismatch, "instance_norm affine parameters do not match channels");
  auto xhat = std::make_shared<Tensor>(channels, in.height(), in.width());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(channels));
  Tensor out(channels, in.height(), in.width());
  for (int c = 0; c < channels; ++c) {
    const auto src = in.channel(c);
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : src) var += (v - mean) * (v - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[c] = is;
    auto xh = xhat->channel(c);
    auto dst = out.channel(c);
    for (int i = 0; i < n; ++i) {
      xh[i] = (src[i] - mean) * is;
      dst[i] = ga[c] * xh[i] + be[c];
    }
  }
  return g.record(std::move(out), {x, gamma, beta}, [=](Graph& graph, int self) {
    const Tensor& dy = graph.grad_buffer(Var{self});
    const Tensor& gv = graph.value(gamma);
    const bool need_x = graph.requires_grad(x);
    for (int c = 0; c < channels; ++c) {
      const auto dyc = dy.channel(c);
      const auto xh = xhat->channel(c);
      double sum_dy = 0.0;
      double sum_dy_xh = 0.0;
      for (int i = 0; i < n; ++i) {
        sum_dy += dyc[i];
        sum_dy_xh += dyc[i] * xh[i];
      }
      if (graph.requires_grad(gamma)) graph.grad_buffer(gamma)[c] += sum_dy_xh;
      if (graph.requires_grad(beta)) graph.grad_buffer(beta)[c] += sum_dy;
      if (need_x) {
        auto dx = graph.grad_buffer(x).channel(c);
        const double k = gv[c] * (*inv_std)[c] / n;
        for (int i = 0; i < n; ++i) {
          dx[i] += k * (n * dyc[i] - sum_dy - xh[i] * sum_dy_xh);
        }
      }
    }
  });
}

Var leaky_relu(Graph& g, Var x, double slope) {
  const Tensor& in = g.value(x);
  Tensor out = in;
  for (double& v : out.values()) v = v > 0.0 ? v : slope * v;
  return g.record(std::move(out), {x}, [=](Graph& graph, int self) {
    const Tensor& dy = graph.grad_buffer(Var{self});
    const Tensor& xv = graph.value(x);
    Tensor& dx = graph.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv[i] > 0.0 ? dy[i] : slope * dy[i];
  });
}

Var relu(Graph& g, Var x) { return leaky_relu(g, x, 0.0); }

Var sigmoid(Graph& g, Var x) {
  Tensor out = g.value(x);
  for (double& v : out.values()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return g.record(std::move(out), {x}, [=](Graph& graph, int self) {
    const Tensor& dy = graph.grad_buffer(Var{self});
    const Tensor& y = graph.value(Var{self});
    Tensor& dx = graph.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
  });
}

Var softmax(Graph& g, Var x) {
  const Tensor& in = g.value(x);
  const int channels = in.channels();
  const int plane = in.plane();
  Tensor out(channels, in.height(), in.width());
  for (int p = 0; p < plane; ++p) {
    double peak = in[static_cast<std::size_t>(p)];
    for (int c = 1; c < channels; ++c) peak = std::max(peak, in[static_cast<std::size_t>(c) * plane + p]);
    double sum = 0.0;
    for (int c = 0; c < channels; ++c) {
      const std::size_t i = static_cast<std::size_t>(c) * plane + p;
      out[i] = std::exp(in[i] - peak);
      sum += out[i];
    }
    for (int c = 0; c < channels; ++c) out[static_cast<std::size_t>(c) * plane + p] /= sum;
  }
  return g.record(std::move(out), {x}, [=](Graph& graph, int self) {
    const Tensor& dy = graph.grad_buffer(Var{self});
    const Tensor& y = graph.value(Var{self});
    Tensor& dx = graph.grad_buffer(x);
    for (int p = 0; p < plane; ++p) {
      double dot = 0.0;
      for (int c = 0; c < channels; ++c) {
        const std::size_t i = static_cast<std::size_t>(c) * plane + p;
        dot += dy[i] * y[i];
      }
      for (int c = 0; c < channels; ++c) {
        const std::size_t i = static_cast<std::size_t>(c) * plane + p;
        dx[i] += y[i] * (dy[i] - dot);
      }
    }
  });
}

Var concat(Graph& g, Var a, Var b) {
  Tensor out = concat_channels(g.value(a), g.value(b));
  const std::size_t split = g.value(a).size();
  return g.record(std::move(out), {a, b}, [=](Graph& graph, int self) {
    const Tensor& dy = graph.grad_buffer(Var{self});
    if (graph.requires_grad(a)) {
      Tensor& da = graph.grad_buffer(a);
      for (std::size_t i = 0; i < split; ++i) da[i] += dy[i];
    }
    if (graph.requires_grad(b)) {
      Tensor& db = graph.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[split + i];
    }
  });
}

Var detach(Graph& g, Var x) { return g.constant(g.value(x)); }

Var add(Graph& g, Var a, Var b) {
  check_scalar(g.value(a), "add");
  check_scalar(g.value(b), "add");
  return g.record(scalar(g.value(a)[0] + g.value(b)[0]), {a, b}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    if (graph.requires_grad(a)) graph.grad_buffer(a)[0] += d;
    if (graph.requires_grad(b)) graph.grad_buffer(b)[0] += d;
  });
}

Var subtract(Graph& g, Var a, Var b) {
  check_scalar(g.value(a), "subtract");
  check_scalar(g.value(b), "subtract");
  return g.record(scalar(g.value(a)[0] - g.value(b)[0]), {a, b}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    if (graph.requires_grad(a)) graph.grad_buffer(a)[0] += d;
    if (graph.requires_grad(b)) graph.grad_buffer(b)[0] -= d;
  });
}

Var scale(Graph& g, Var a, double factor) {
  check_scalar(g.value(a), "scale");
  return g.record(scalar(g.value(a)[0] * factor), {a}, [=](Graph& graph, int self) {
    graph.grad_buffer(a)[0] += factor * graph.grad_buffer(Var{self})[0];
  });
}

// Loss nodes ---------------------------------------------------------------

Var cross_entropy(Graph& g, Var pred, const LabelMap& label) {
  auto result = std::make_shared<losses::LossGrad>(losses::mean_cross_entropy_grad(g.value(pred), label));
  return g.record(scalar(result->value), {pred}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    Tensor& dp = graph.grad_buffer(pred);
    for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += d * result->d_pred[i];
  });
}

Var focal(Graph& g, Var pred, const LabelMap& label, double gamma) {
  auto result = std::make_shared<losses::LossGrad>(losses::focal_loss_grad(g.value(pred), label, gamma));
  return g.record(scalar(result->value), {pred}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    Tensor& dp = graph.grad_buffer(pred);
    for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += d * result->d_pred[i];
  });
}

Var normalize_bets(Graph& g, Var raw, double beta, std::span<const std::uint8_t> ignore) {
  std::vector<std::uint8_t> mask(ignore.begin(), ignore.end());
  Tensor out = losses::normalize_bets_unchecked(g.value(raw), beta, mask);
  return g.record(std::move(out), {raw}, [=](Graph& graph, int self) {
    const Tensor d_raw =
        losses::normalize_bets_backward(graph.value(raw), beta, mask, graph.grad_buffer(Var{self}));
    Tensor& acc = graph.grad_buffer(raw);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d_raw[i];
  });
}

Var gambling(Graph& g, Var pred, const LabelMap& label, Var bets, losses::BetScale scale) {
  auto result = std::make_shared<losses::GambleGrad>(
      losses::gambling_loss_grad(g.value(pred), label, g.value(bets), scale));
  return g.record(scalar(result->value), {pred, bets}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    if (graph.requires_grad(pred)) {
      Tensor& dp = graph.grad_buffer(pred);
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += d * result->d_pred[i];
    }
    if (graph.requires_grad(bets)) {
      Tensor& db = graph.grad_buffer(bets);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += d * result->d_bets[i];
    }
  });
}

Var bce_mean(Graph& g, Var scores, double target) {
  auto result = std::make_shared<losses::ScoreGrad>(losses::bce_mean_grad(g.value(scores), target));
  return g.record(scalar(result->value), {scores}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    Tensor& ds = graph.grad_buffer(scores);
    for (std::size_t i = 0; i < ds.size(); ++i) ds[i] += d * result->d_scores[i];
  });
}

Var embedding_distance(Graph& g, Var fake, Var real) {
  auto result = std::make_shared<losses::EmbeddingGrad>(
      losses::embedding_loss_grad(g.value(fake).values(), g.value(real).values()));
  return g.record(scalar(result->value), {fake, real}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    if (graph.requires_grad(fake)) {
      Tensor& df = graph.grad_buffer(fake);
      for (std::size_t i = 0; i < df.size(); ++i) df[i] += d * result->d_fake[i];
    }
    if (graph.requires_grad(real)) {
      Tensor& dr = graph.grad_buffer(real);
      for (std::size_t i = 0; i < dr.size(); ++i) dr[i] += d * result->d_real[i];
    }
  });
}

Var squared_error(Graph& g, Var x, const Tensor& target) {
  const Tensor& xv = g.value(x);
  require(xv.size() == target.size(), ErrorCode::kShapeMismatch, "squared_error: size mismatch");
  auto residual = std::make_shared<Tensor>(xv);
  double total = 0.0;
  for (std::size_t i = 0; i < residual->size(); ++i) {
    (*residual)[i] -= target[i];
    total += (*residual)[i] * (*residual)[i];
  }
  return g.record(scalar(0.5 * total), {x}, [=](Graph& graph, int self) {
    const double d = graph.grad_buffer(Var{self})[0];
    Tensor& dx = graph.grad_buffer(x);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d * (*residual)[i];
  });
}

}  // namespace gamblenet::nn
