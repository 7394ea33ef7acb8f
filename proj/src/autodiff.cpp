#include "mango/autodiff.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mango::ad {

namespace {

constexpr double kGeluCoeff = 0.044715;
constexpr double kKlClamp = 1e-8;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a) + " and " + shape_str(b));
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Parameter::Parameter(std::string name_in, Shape shape_in)
    : name(std::move(name_in)), shape(std::move(shape_in)) {
  const auto n = static_cast<size_t>(numel(shape));
  value.assign(n, 0.0);
  grad.assign(n, 0.0);
  moment1.assign(n, 0.0);
  moment2.assign(n, 0.0);
}

void Parameter::zero_grad() { grad.assign(grad.size(), 0.0); }

void Parameter::reset_optimizer_state() {
  moment1.assign(moment1.size(), 0.0);
  moment2.assign(moment2.size(), 0.0);
  step_count = 0;
}

// ---------------------------------------------------------------------------
// Tensor handle

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
int64_t Tensor::size() const { return static_cast<int64_t>(tape_->node(id_).val.size()); }
std::span<const double> Tensor::value() const { return tape_->node(id_).val; }
std::span<const double> Tensor::grad() const { return tape_->node(id_).grad; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::scalar() const {
  const auto& n = tape_->node(id_);
  if (n.val.size() != 1) {
    throw std::invalid_argument("scalar() on tensor of shape " + shape_str(n.shape));
  }
  return n.val[0];
}

bool Tensor::all_finite() const {
  for (double v : tape_->node(id_).val) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape plumbing

Tensor Tape::make(Shape shape, std::vector<double> val, bool requires_grad,
                  std::function<void(Tape&, int)> backprop) {
  if (numel(shape) != static_cast<int64_t>(val.size())) {
    throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
  }
  Node n;
  n.shape = std::move(shape);
  n.val = std::move(val);
  n.requires_grad = requires_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

int Tape::id_of(Tensor t, const char* op) const {
  if (t.tape_ != this) {
    throw std::invalid_argument(std::string(op) + ": tensor does not belong to this tape");
  }
  return t.id_;
}

Tensor Tape::constant(Shape shape, std::vector<double> data) {
  return make(std::move(shape), std::move(data), false, nullptr);
}

Tensor Tape::input(Shape shape, std::vector<double> data, bool requires_grad) {
  return make(std::move(shape), std::move(data), requires_grad, nullptr);
}

Tensor Tape::leaf(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Tensor(this, it->second);
  Tensor t = make(p.shape, p.value, true, nullptr);
  nodes_.back().param = &p;
  param_nodes_.emplace(&p, t.id_);
  return t;
}

void Tape::backward(Tensor loss) {
  const int loss_id = id_of(loss, "backward");
  Node& ln = node(loss_id);
  if (ln.val.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(ln.shape));
  }
  for (int id = 0; id <= loss_id; ++id) {
    Node& n = node(id);
    if (n.requires_grad) n.grad.assign(n.val.size(), 0.0);
  }
  if (!ln.requires_grad) return;  // loss depends on no trainable leaf
  ln.grad[0] = 1.0;
  for (int id = loss_id; id >= 0; --id) {
    Node& n = node(id);
    if (n.requires_grad && n.backprop) n.backprop(*this, id);
  }
  for (int id = 0; id <= loss_id; ++id) {
    Node& n = node(id);
    if (n.param != nullptr) {
      for (size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

Tensor Tape::add(Tensor a, Tensor b) {
  const int ia = id_of(a, "add"), ib = id_of(b, "add");
  const Node &na = node(ia), &nb = node(ib);
  if (na.shape != nb.shape) shape_error("add", na.shape, nb.shape);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] + nb.val[i];
  return make(na.shape, std::move(out), na.requires_grad || nb.requires_grad,
              [ia, ib](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                if (Node& pa = t.node(ia); pa.requires_grad)
                  for (size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i];
                if (Node& pb = t.node(ib); pb.requires_grad)
                  for (size_t i = 0; i < g.size(); ++i) pb.grad[i] += g[i];
              });
}

Tensor Tape::sub(Tensor a, Tensor b) {
  const int ia = id_of(a, "sub"), ib = id_of(b, "sub");
  const Node &na = node(ia), &nb = node(ib);
  if (na.shape != nb.shape) shape_error("sub", na.shape, nb.shape);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] - nb.val[i];
  return make(na.shape, std::move(out), na.requires_grad || nb.requires_grad,
              [ia, ib](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                if (Node& pa = t.node(ia); pa.requires_grad)
                  for (size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i];
                if (Node& pb = t.node(ib); pb.requires_grad)
                  for (size_t i = 0; i < g.size(); ++i) pb.grad[i] -= g[i];
              });
}

Tensor Tape::mul(Tensor a, Tensor b) {
  const int ia = id_of(a, "mul"), ib = id_of(b, "mul");
  const Node &na = node(ia), &nb = node(ib);
  if (na.shape != nb.shape) shape_error("mul", na.shape, nb.shape);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * nb.val[i];
  return make(na.shape, std::move(out), na.requires_grad || nb.requires_grad,
              [ia, ib](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& pa = t.node(ia);
                Node& pb = t.node(ib);
                if (pa.requires_grad)
                  for (size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i] * pb.val[i];
                if (pb.requires_grad)
                  for (size_t i = 0; i < g.size(); ++i) pb.grad[i] += g[i] * pa.val[i];
              });
}

Tensor Tape::scale(Tensor a, double c) {
  const int ia = id_of(a, "scale");
  const Node& na = node(ia);
  std::vector<double> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * c;
  return make(na.shape, std::move(out), na.requires_grad,
              [ia, c](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& pa = t.node(ia);
                for (size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i] * c;
              });
}

Tensor Tape::matmul(Tensor a, Tensor b) {
  const int ia = id_of(a, "matmul"), ib = id_of(b, "matmul");
  const Node &na = node(ia), &nb = node(ib);
  if (na.shape.size() != 2 || nb.shape.size() != 2 || na.shape[1] != nb.shape[0]) {
    shape_error("matmul", na.shape, nb.shape);
  }
  const int m = na.shape[0], k = na.shape[1], n = nb.shape[1];
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int c = 0; c < k; ++c) {
      const double av = na.val[static_cast<size_t>(i) * k + c];
      const double* brow = &nb.val[static_cast<size_t>(c) * n];
      double* orow = &out[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return make({m, n}, std::move(out), na.requires_grad || nb.requires_grad,
              [ia, ib, m, k, n](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& pa = t.node(ia);
                Node& pb = t.node(ib);
                if (pa.requires_grad) {
                  // dA = dC * B^T
                  for (int i = 0; i < m; ++i)
                    for (int c = 0; c < k; ++c) {
                      const double* grow = &g[static_cast<size_t>(i) * n];
                      const double* brow = &pb.val[static_cast<size_t>(c) * n];
                      double acc = 0.0;
                      for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                      pa.grad[static_cast<size_t>(i) * k + c] += acc;
                    }
                }
                if (pb.requires_grad) {
                  // dB = A^T * dC
                  for (int i = 0; i < m; ++i)
                    for (int c = 0; c < k; ++c) {
                      const double av = pa.val[static_cast<size_t>(i) * k + c];
                      const double* grow = &g[static_cast<size_t>(i) * n];
                      double* brow = &pb.grad[static_cast<size_t>(c) * n];
                      for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
              });
}

Tensor Tape::linear(Tensor x, Tensor w, Tensor bias) {
  const int ix = id_of(x, "linear"), iw = id_of(w, "linear");
  const Node &nx = node(ix), &nw = node(iw);
  if (nw.shape.size() != 2 || nx.shape.empty() || nx.shape.back() != nw.shape[0]) {
    shape_error("linear", nx.shape, nw.shape);
  }
  const int in = nw.shape[0], out_w = nw.shape[1];
  const int64_t rows = numel(nx.shape) / in;
  int ibias = -1;
  bool bias_rg = false;
  if (bias.defined()) {
    ibias = id_of(bias, "linear");
    const Node& nb = node(ibias);
    if (nb.shape != Shape{out_w}) shape_error("linear bias", nb.shape, {out_w});
    bias_rg = nb.requires_grad;
  }
  Shape out_shape = nx.shape;
  out_shape.back() = out_w;
  std::vector<double> out(static_cast<size_t>(rows) * out_w, 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    double* orow = &out[static_cast<size_t>(r) * out_w];
    if (ibias >= 0) {
      const auto& bv = node(ibias).val;
      for (int j = 0; j < out_w; ++j) orow[j] = bv[static_cast<size_t>(j)];
    }
    const double* xrow = &nx.val[static_cast<size_t>(r) * in];
    for (int c = 0; c < in; ++c) {
      const double xv = xrow[c];
      const double* wrow = &nw.val[static_cast<size_t>(c) * out_w];
      for (int j = 0; j < out_w; ++j) orow[j] += xv * wrow[j];
    }
  }
  const bool rg = nx.requires_grad || nw.requires_grad || bias_rg;
  return make(std::move(out_shape), std::move(out), rg,
              [ix, iw, ibias, rows, in, out_w](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                Node& pw = t.node(iw);
                if (px.requires_grad) {
                  for (int64_t r = 0; r < rows; ++r) {
                    const double* grow = &g[static_cast<size_t>(r) * out_w];
                    double* xg = &px.grad[static_cast<size_t>(r) * in];
                    for (int c = 0; c < in; ++c) {
                      const double* wrow = &pw.val[static_cast<size_t>(c) * out_w];
                      double acc = 0.0;
                      for (int j = 0; j < out_w; ++j) acc += grow[j] * wrow[j];
                      xg[c] += acc;
                    }
                  }
                }
                if (pw.requires_grad) {
                  for (int64_t r = 0; r < rows; ++r) {
                    const double* grow = &g[static_cast<size_t>(r) * out_w];
                    const double* xrow = &px.val[static_cast<size_t>(r) * in];
                    for (int c = 0; c < in; ++c) {
                      const double xv = xrow[c];
                      double* wg = &pw.grad[static_cast<size_t>(c) * out_w];
                      for (int j = 0; j < out_w; ++j) wg[j] += xv * grow[j];
                    }
                  }
                }
                if (ibias >= 0) {
                  if (Node& pb = t.node(ibias); pb.requires_grad) {
                    for (int64_t r = 0; r < rows; ++r) {
                      const double* grow = &g[static_cast<size_t>(r) * out_w];
                      for (int j = 0; j < out_w; ++j) pb.grad[static_cast<size_t>(j)] += grow[j];
                    }
                  }
                }
              });
}

Tensor Tape::gelu(Tensor x) {
  const int ix = id_of(x, "gelu");
  const Node& nx = node(ix);
  std::vector<double> out(nx.val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = nx.val[i];
    const double u = kSqrt2OverPi * (v + kGeluCoeff * v * v * v);
    out[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  return make(nx.shape, std::move(out), nx.requires_grad,
              [ix](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                for (size_t i = 0; i < g.size(); ++i) {
                  const double v = px.val[i];
                  const double u = kSqrt2OverPi * (v + kGeluCoeff * v * v * v);
                  const double th = std::tanh(u);
                  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v);
                  const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                  px.grad[i] += g[i] * d;
                }
              });
}

// ---------------------------------------------------------------------------
// Row-structured ops

Tensor Tape::softmax_rows(Tensor x) {
  const int ix = id_of(x, "softmax_rows");
  const Node& nx = node(ix);
  if (nx.shape.empty()) shape_error("softmax_rows", nx.shape, {});
  const int width = nx.shape.back();
  const int64_t rows = numel(nx.shape) / width;
  std::vector<double> out(nx.val.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = &nx.val[static_cast<size_t>(r) * width];
    double* orow = &out[static_cast<size_t>(r) * width];
    double mx = xr[0];
    for (int j = 1; j < width; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < width; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < width; ++j) orow[j] /= sum;
  }
  return make(nx.shape, std::move(out), nx.requires_grad,
              [ix, rows, width](Tape& t, int self) {
                const Node& s = t.node(self);
                Node& px = t.node(ix);
                for (int64_t r = 0; r < rows; ++r) {
                  const double* y = &s.val[static_cast<size_t>(r) * width];
                  const double* g = &s.grad[static_cast<size_t>(r) * width];
                  double dot = 0.0;
                  for (int j = 0; j < width; ++j) dot += g[j] * y[j];
                  double* xg = &px.grad[static_cast<size_t>(r) * width];
                  for (int j = 0; j < width; ++j) xg[j] += y[j] * (g[j] - dot);
                }
              });
}

Tensor Tape::layer_norm_rows(Tensor x, Tensor gain, Tensor bias, double eps) {
  const int ix = id_of(x, "layer_norm_rows");
  const int ig = id_of(gain, "layer_norm_rows");
  const int ib = id_of(bias, "layer_norm_rows");
  const Node& nx = node(ix);
  if (nx.shape.empty()) shape_error("layer_norm_rows", nx.shape, {});
  const int width = nx.shape.back();
  if (width < 2) throw std::invalid_argument("layer_norm_rows: row width must be >= 2");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm_rows: eps must be positive");
  if (node(ig).shape != Shape{width}) shape_error("layer_norm gain", node(ig).shape, {width});
  if (node(ib).shape != Shape{width}) shape_error("layer_norm bias", node(ib).shape, {width});
  const int64_t rows = numel(nx.shape) / width;
  std::vector<double> out(nx.val.size());
  // cached per-row inverse stddev and normalized values for the backward pass
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  auto xhat = std::make_shared<std::vector<double>>(nx.val.size());
  const auto& gv = node(ig).val;
  const auto& bv = node(ib).val;
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = &nx.val[static_cast<size_t>(r) * width];
    double mean = 0.0;
    for (int j = 0; j < width; ++j) mean += xr[j];
    mean /= width;
    double var = 0.0;
    for (int j = 0; j < width; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= width;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    double* hr = &(*xhat)[static_cast<size_t>(r) * width];
    double* orow = &out[static_cast<size_t>(r) * width];
    for (int j = 0; j < width; ++j) {
      hr[j] = (xr[j] - mean) * is;
      orow[j] = gv[static_cast<size_t>(j)] * hr[j] + bv[static_cast<size_t>(j)];
    }
  }
  const bool rg = nx.requires_grad || node(ig).requires_grad || node(ib).requires_grad;
  return make(nx.shape, std::move(out), rg,
              [ix, ig, ib, rows, width, inv_std, xhat](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                Node& pg = t.node(ig);
                Node& pb = t.node(ib);
                for (int64_t r = 0; r < rows; ++r) {
                  const double* grow = &g[static_cast<size_t>(r) * width];
                  const double* hr = &(*xhat)[static_cast<size_t>(r) * width];
                  if (pg.requires_grad)
                    for (int j = 0; j < width; ++j)
                      pg.grad[static_cast<size_t>(j)] += grow[j] * hr[j];
                  if (pb.requires_grad)
                    for (int j = 0; j < width; ++j) pb.grad[static_cast<size_t>(j)] += grow[j];
                  if (px.requires_grad) {
                    const double is = (*inv_std)[static_cast<size_t>(r)];
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (int j = 0; j < width; ++j) {
                      const double dh = grow[j] * pg.val[static_cast<size_t>(j)];
                      mean_dh += dh;
                      mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= width;
                    mean_dh_h /= width;
                    double* xg = &px.grad[static_cast<size_t>(r) * width];
                    for (int j = 0; j < width; ++j) {
                      const double dh = grow[j] * pg.val[static_cast<size_t>(j)];
                      xg[j] += is * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                  }
                }
              });
}

Tensor Tape::scale_rows(Tensor x, std::vector<double> row_scale) {
  const int ix = id_of(x, "scale_rows");
  const Node& nx = node(ix);
  if (nx.shape.empty()) shape_error("scale_rows", nx.shape, {});
  const int width = nx.shape.back();
  const int64_t rows = numel(nx.shape) / width;
  if (static_cast<int64_t>(row_scale.size()) != rows) {
    throw std::invalid_argument("scale_rows: expected " + std::to_string(rows) +
                                " row scales, got " + std::to_string(row_scale.size()));
  }
  std::vector<double> out(nx.val.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double s = row_scale[static_cast<size_t>(r)];
    const double* xr = &nx.val[static_cast<size_t>(r) * width];
    double* orow = &out[static_cast<size_t>(r) * width];
    for (int j = 0; j < width; ++j) orow[j] = xr[j] * s;
  }
  auto scales = std::make_shared<std::vector<double>>(std::move(row_scale));
  return make(nx.shape, std::move(out), nx.requires_grad,
              [ix, rows, width, scales](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                for (int64_t r = 0; r < rows; ++r) {
                  const double s = (*scales)[static_cast<size_t>(r)];
                  const double* grow = &g[static_cast<size_t>(r) * width];
                  double* xg = &px.grad[static_cast<size_t>(r) * width];
                  for (int j = 0; j < width; ++j) xg[j] += grow[j] * s;
                }
              });
}

void scale_rows_to_norm(std::span<double> data, int width, double epsilon) {
  if (epsilon <= 0.0) throw std::invalid_argument("projection epsilon must be positive");
  const size_t rows = data.size() / static_cast<size_t>(width);
  for (size_t r = 0; r < rows; ++r) {
    double* row = data.data() + r * static_cast<size_t>(width);
    double ss = 0.0;
    for (int j = 0; j < width; ++j) ss += row[j] * row[j];
    const double n = std::sqrt(ss);
    if (n == 0.0) continue;                       // degenerate zero vector
    if (std::fabs(n - epsilon) <= 1e-12 * epsilon) continue;  // already on the sphere
    const double s = epsilon / n;
    for (int j = 0; j < width; ++j) row[j] *= s;
  }
}

Tensor Tape::project_rows(Tensor x, double epsilon) {
  const int ix = id_of(x, "project_rows");
  const Node& nx = node(ix);
  if (nx.shape.empty()) shape_error("project_rows", nx.shape, {});
  const int width = nx.shape.back();
  const int64_t rows = numel(nx.shape) / width;
  std::vector<double> out(nx.val.begin(), nx.val.end());
  scale_rows_to_norm(out, width, epsilon);
  return make(nx.shape, std::move(out), nx.requires_grad,
              [ix, rows, width, epsilon](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                for (int64_t r = 0; r < rows; ++r) {
                  const double* xr = &px.val[static_cast<size_t>(r) * width];
                  const double* grow = &g[static_cast<size_t>(r) * width];
                  double* xg = &px.grad[static_cast<size_t>(r) * width];
                  double ss = 0.0;
                  for (int j = 0; j < width; ++j) ss += xr[j] * xr[j];
                  const double n = std::sqrt(ss);
                  if (n == 0.0) {
                    // degenerate rule: output equals input, pass grad through
                    for (int j = 0; j < width; ++j) xg[j] += grow[j];
                    continue;
                  }
                  // d(eps * x / n) = (eps/n) (I - x x^T / n^2)
                  const double s = epsilon / n;
                  double dot = 0.0;
                  for (int j = 0; j < width; ++j) dot += grow[j] * xr[j];
                  const double coeff = s * dot / ss;
                  for (int j = 0; j < width; ++j) xg[j] += s * grow[j] - coeff * xr[j];
                }
              });
}

// ---------------------------------------------------------------------------
// Sequence ops

Tensor Tape::add_seq(Tensor x, Tensor table) {
  const int ix = id_of(x, "add_seq"), it = id_of(table, "add_seq");
  const Node &nx = node(ix), &nt = node(it);
  // the table may be longer than the sequence; its first seq rows are used
  if (nx.shape.size() != 3 || nt.shape.size() != 2 || nx.shape[1] > nt.shape[0] ||
      nx.shape[2] != nt.shape[1]) {
    shape_error("add_seq", nx.shape, nt.shape);
  }
  const int batch = nx.shape[0], seq = nx.shape[1], width = nx.shape[2];
  std::vector<double> out(nx.val.size());
  for (int b = 0; b < batch; ++b) {
    const size_t base = static_cast<size_t>(b) * seq * width;
    for (size_t i = 0; i < static_cast<size_t>(seq) * width; ++i) {
      out[base + i] = nx.val[base + i] + nt.val[i];
    }
  }
  return make(nx.shape, std::move(out), nx.requires_grad || nt.requires_grad,
              [ix, it, batch, seq, width](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                Node& pt = t.node(it);
                if (px.requires_grad)
                  for (size_t i = 0; i < g.size(); ++i) px.grad[i] += g[i];
                if (pt.requires_grad) {
                  for (int b = 0; b < batch; ++b) {
                    const size_t base = static_cast<size_t>(b) * seq * width;
                    for (size_t i = 0; i < static_cast<size_t>(seq) * width; ++i) {
                      pt.grad[i] += g[base + i];
                    }
                  }
                }
              });
}

Tensor Tape::concat_seq(Tensor a, Tensor b) {
  const int ia = id_of(a, "concat_seq"), ib = id_of(b, "concat_seq");
  const Node &na = node(ia), &nb = node(ib);
  if (na.shape.size() != 3 || nb.shape.size() != 3 || na.shape[0] != nb.shape[0] ||
      na.shape[2] != nb.shape[2]) {
    shape_error("concat_seq", na.shape, nb.shape);
  }
  const int batch = na.shape[0], s1 = na.shape[1], s2 = nb.shape[1], width = na.shape[2];
  std::vector<double> out(static_cast<size_t>(batch) * (s1 + s2) * width);
  for (int b = 0; b < batch; ++b) {
    double* orow = &out[static_cast<size_t>(b) * (s1 + s2) * width];
    const double* ar = &na.val[static_cast<size_t>(b) * s1 * width];
    const double* br = &nb.val[static_cast<size_t>(b) * s2 * width];
    std::copy(ar, ar + static_cast<size_t>(s1) * width, orow);
    std::copy(br, br + static_cast<size_t>(s2) * width, orow + static_cast<size_t>(s1) * width);
  }
  return make({batch, s1 + s2, width}, std::move(out),
              na.requires_grad || nb.requires_grad,
              [ia, ib, batch, s1, s2, width](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& pa = t.node(ia);
                Node& pb = t.node(ib);
                for (int b = 0; b < batch; ++b) {
                  const double* grow = &g[static_cast<size_t>(b) * (s1 + s2) * width];
                  if (pa.requires_grad) {
                    double* ag = &pa.grad[static_cast<size_t>(b) * s1 * width];
                    for (size_t i = 0; i < static_cast<size_t>(s1) * width; ++i) ag[i] += grow[i];
                  }
                  if (pb.requires_grad) {
                    double* bg = &pb.grad[static_cast<size_t>(b) * s2 * width];
                    const double* gb = grow + static_cast<size_t>(s1) * width;
                    for (size_t i = 0; i < static_cast<size_t>(s2) * width; ++i) bg[i] += gb[i];
                  }
                }
              });
}

Tensor Tape::slice_seq(Tensor x, int start, int len) {
  const int ix = id_of(x, "slice_seq");
  const Node& nx = node(ix);
  if (nx.shape.size() != 3 || start < 0 || len <= 0 || start + len > nx.shape[1]) {
    throw std::invalid_argument("slice_seq: invalid range [" + std::to_string(start) + ", " +
                                std::to_string(start + len) + ") for shape " +
                                shape_str(nx.shape));
  }
  const int batch = nx.shape[0], seq = nx.shape[1], width = nx.shape[2];
  std::vector<double> out(static_cast<size_t>(batch) * len * width);
  for (int b = 0; b < batch; ++b) {
    const double* xr = &nx.val[(static_cast<size_t>(b) * seq + start) * width];
    std::copy(xr, xr + static_cast<size_t>(len) * width,
              &out[static_cast<size_t>(b) * len * width]);
  }
  return make({batch, len, width}, std::move(out), nx.requires_grad,
              [ix, batch, seq, width, start, len](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                for (int b = 0; b < batch; ++b) {
                  double* xg = &px.grad[(static_cast<size_t>(b) * seq + start) * width];
                  const double* grow = &g[static_cast<size_t>(b) * len * width];
                  for (size_t i = 0; i < static_cast<size_t>(len) * width; ++i) xg[i] += grow[i];
                }
              });
}

Tensor Tape::select_seq(Tensor x, int pos) {
  const int ix = id_of(x, "select_seq");
  const Node& nx = node(ix);
  if (nx.shape.size() != 3 || pos < 0 || pos >= nx.shape[1]) {
    throw std::invalid_argument("select_seq: position " + std::to_string(pos) +
                                " out of range for shape " + shape_str(nx.shape));
  }
  const int batch = nx.shape[0], seq = nx.shape[1], width = nx.shape[2];
  std::vector<double> out(static_cast<size_t>(batch) * width);
  for (int b = 0; b < batch; ++b) {
    const double* xr = &nx.val[(static_cast<size_t>(b) * seq + pos) * width];
    std::copy(xr, xr + width, &out[static_cast<size_t>(b) * width]);
  }
  return make({batch, width}, std::move(out), nx.requires_grad,
              [ix, batch, seq, width, pos](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& px = t.node(ix);
                for (int b = 0; b < batch; ++b) {
                  double* xg = &px.grad[(static_cast<size_t>(b) * seq + pos) * width];
                  const double* grow = &g[static_cast<size_t>(b) * width];
                  for (int j = 0; j < width; ++j) xg[j] += grow[j];
                }
              });
}

Tensor Tape::embedding_lookup(Tensor table, const std::vector<int>& ids, int batch, int seq) {
  const int it = id_of(table, "embedding_lookup");
  const Node& nt = node(it);
  if (nt.shape.size() != 2) shape_error("embedding_lookup", nt.shape, {});
  const int vocab = nt.shape[0], width = nt.shape[1];
  if (static_cast<int64_t>(ids.size()) != static_cast<int64_t>(batch) * seq) {
    throw std::invalid_argument("embedding_lookup: id count mismatch");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::domain_error("embedding_lookup: token id " + std::to_string(id) +
                              " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  std::vector<double> out(ids.size() * static_cast<size_t>(width));
  for (size_t i = 0; i < ids.size(); ++i) {
    const double* row = &nt.val[static_cast<size_t>(ids[i]) * width];
    std::copy(row, row + width, &out[i * static_cast<size_t>(width)]);
  }
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return make({batch, seq, width}, std::move(out), nt.requires_grad,
              [it, ids_copy, width](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& pt = t.node(it);
                for (size_t i = 0; i < ids_copy->size(); ++i) {
                  double* trow = &pt.grad[static_cast<size_t>((*ids_copy)[i]) * width];
                  const double* grow = &g[i * static_cast<size_t>(width)];
                  for (int j = 0; j < width; ++j) trow[j] += grow[j];
                }
              });
}

// ---------------------------------------------------------------------------
// Attention

Tensor Tape::attention_scores(Tensor q, Tensor k, int heads) {
  const int iq = id_of(q, "attention_scores"), ik = id_of(k, "attention_scores");
  const Node &nq = node(iq), &nk = node(ik);
  if (nq.shape.size() != 3 || nq.shape != nk.shape) shape_error("attention_scores", nq.shape, nk.shape);
  const int batch = nq.shape[0], seq = nq.shape[1], width = nq.shape[2];
  if (heads <= 0 || width % heads != 0) {
    throw std::invalid_argument("attention_scores: width " + std::to_string(width) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const int hd = width / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> out(static_cast<size_t>(batch) * heads * seq * seq, 0.0);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < seq; ++i) {
        const double* qr = &nq.val[(static_cast<size_t>(b) * seq + i) * width + static_cast<size_t>(h) * hd];
        double* orow = &out[((static_cast<size_t>(b) * heads + h) * seq + i) * seq];
        for (int j = 0; j < seq; ++j) {
          const double* kr = &nk.val[(static_cast<size_t>(b) * seq + j) * width + static_cast<size_t>(h) * hd];
          double acc = 0.0;
          for (int c = 0; c < hd; ++c) acc += qr[c] * kr[c];
          orow[j] = acc * inv;
        }
      }
    }
  }
  return make({batch, heads, seq, seq}, std::move(out),
              nq.requires_grad || nk.requires_grad,
              [iq, ik, batch, heads, seq, width, hd, inv](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& pq = t.node(iq);
                Node& pk = t.node(ik);
                for (int b = 0; b < batch; ++b)
                  for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < seq; ++i) {
                      const double* grow = &g[((static_cast<size_t>(b) * heads + h) * seq + i) * seq];
                      const double* qr = &pq.val[(static_cast<size_t>(b) * seq + i) * width + static_cast<size_t>(h) * hd];
                      double* qg = &pq.grad[(static_cast<size_t>(b) * seq + i) * width + static_cast<size_t>(h) * hd];
                      for (int j = 0; j < seq; ++j) {
                        const double gv = grow[j] * inv;
                        const size_t koff = (static_cast<size_t>(b) * seq + j) * width + static_cast<size_t>(h) * hd;
                        if (pq.requires_grad) {
                          const double* kr = &pk.val[koff];
                          for (int c = 0; c < hd; ++c) qg[c] += gv * kr[c];
                        }
                        if (pk.requires_grad) {
                          double* kg = &pk.grad[koff];
                          for (int c = 0; c < hd; ++c) kg[c] += gv * qr[c];
                        }
                      }
                    }
              });
}

Tensor Tape::mask_attention_scores(Tensor scores, const std::vector<double>& key_valid) {
  const int is = id_of(scores, "mask_attention_scores");
  const Node& ns = node(is);
  if (ns.shape.size() != 4) shape_error("mask_attention_scores", ns.shape, {});
  const int batch = ns.shape[0], heads = ns.shape[1], seq = ns.shape[2];
  if (ns.shape[3] != seq || static_cast<int64_t>(key_valid.size()) != static_cast<int64_t>(batch) * seq) {
    throw std::invalid_argument("mask_attention_scores: mask size mismatch");
  }
  constexpr double kNegInf = -1e9;
  std::vector<double> out(ns.val.size());
  for (int b = 0; b < batch; ++b) {
    const double* valid = &key_valid[static_cast<size_t>(b) * seq];
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < seq; ++i) {
        const size_t base = ((static_cast<size_t>(b) * heads + h) * seq + i) * seq;
        for (int j = 0; j < seq; ++j) {
          out[base + j] = ns.val[base + j] + (valid[j] != 0.0 ? 0.0 : kNegInf);
        }
      }
  }
  return make(ns.shape, std::move(out), ns.requires_grad,
              [is](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& ps = t.node(is);
                for (size_t i = 0; i < g.size(); ++i) ps.grad[i] += g[i];
              });
}

Tensor Tape::attention_context(Tensor probs, Tensor v) {
  const int ip = id_of(probs, "attention_context"), iv = id_of(v, "attention_context");
  const Node &np = node(ip), &nv = node(iv);
  if (np.shape.size() != 4 || nv.shape.size() != 3) shape_error("attention_context", np.shape, nv.shape);
  const int batch = np.shape[0], heads = np.shape[1], seq = np.shape[2], width = nv.shape[2];
  if (np.shape[3] != seq || nv.shape[0] != batch || nv.shape[1] != seq || width % heads != 0) {
    shape_error("attention_context", np.shape, nv.shape);
  }
  const int hd = width / heads;
  std::vector<double> out(static_cast<size_t>(batch) * seq * width, 0.0);
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < seq; ++i) {
        const double* prow = &np.val[((static_cast<size_t>(b) * heads + h) * seq + i) * seq];
        double* orow = &out[(static_cast<size_t>(b) * seq + i) * width + static_cast<size_t>(h) * hd];
        for (int j = 0; j < seq; ++j) {
          const double p = prow[j];
          if (p == 0.0) continue;
          const double* vr = &nv.val[(static_cast<size_t>(b) * seq + j) * width + static_cast<size_t>(h) * hd];
          for (int c = 0; c < hd; ++c) orow[c] += p * vr[c];
        }
      }
  return make({batch, seq, width}, std::move(out), np.requires_grad || nv.requires_grad,
              [ip, iv, batch, heads, seq, width, hd](Tape& t, int self) {
                const auto& g = t.node(self).grad;
                Node& pp = t.node(ip);
                Node& pv = t.node(iv);
                for (int b = 0; b < batch; ++b)
                  for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < seq; ++i) {
                      const double* grow = &g[(static_cast<size_t>(b) * seq + i) * width + static_cast<size_t>(h) * hd];
                      const size_t prow_off = ((static_cast<size_t>(b) * heads + h) * seq + i) * seq;
                      for (int j = 0; j < seq; ++j) {
                        const size_t voff = (static_cast<size_t>(b) * seq + j) * width + static_cast<size_t>(h) * hd;
                        if (pp.requires_grad) {
                          const double* vr = &pv.val[voff];
                          double acc = 0.0;
                          for (int c = 0; c < hd; ++c) acc += grow[c] * vr[c];
                          pp.grad[prow_off + j] += acc;
                        }
                        if (pv.requires_grad) {
                          const double p = pp.val[prow_off + j];
                          if (p == 0.0) continue;
                          double* vg = &pv.grad[voff];
                          for (int c = 0; c < hd; ++c) vg[c] += p * grow[c];
                        }
                      }
                    }
              });
}

// ---------------------------------------------------------------------------
// Reductions and losses

Tensor Tape::sum_all(Tensor x) {
  const int ix = id_of(x, "sum_all");
  const Node& nx = node(ix);
  double acc = 0.0;
  for (double v : nx.val) acc += v;
  return make({1}, {acc}, nx.requires_grad,
              [ix](Tape& t, int self) {
                const double g = t.node(self).grad[0];
                Node& px = t.node(ix);
                for (double& gv : px.grad) gv += g;
              });
}

Tensor Tape::mean_all(Tensor x) {
  const int ix = id_of(x, "mean_all");
  const Node& nx = node(ix);
  const double inv = 1.0 / static_cast<double>(nx.val.size());
  double acc = 0.0;
  for (double v : nx.val) acc += v;
  return make({1}, {acc * inv}, nx.requires_grad,
              [ix, inv](Tape& t, int self) {
                const double g = t.node(self).grad[0] * inv;
                Node& px = t.node(ix);
                for (double& gv : px.grad) gv += g;
              });
}

Tensor Tape::bce_with_logits(Tensor logits, Tensor targets) {
  const int il = id_of(logits, "bce_with_logits"), it = id_of(targets, "bce_with_logits");
  const Node &nl = node(il), &nt = node(it);
  if (nl.shape != nt.shape) shape_error("bce_with_logits", nl.shape, nt.shape);
  for (double tv : nt.val) {
    if (!(tv >= 0.0 && tv <= 1.0)) {
      throw std::domain_error("bce_with_logits: target " + std::to_string(tv) +
                              " outside [0, 1]");
    }
  }
  const double inv = 1.0 / static_cast<double>(nl.val.size());
  double acc = 0.0;
  for (size_t i = 0; i < nl.val.size(); ++i) {
    const double x = nl.val[i], z = nt.val[i];
    acc += std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::fabs(x)));
  }
  return make({1}, {acc * inv}, nl.requires_grad || nt.requires_grad,
              [il, it, inv](Tape& t, int self) {
                const double g = t.node(self).grad[0] * inv;
                Node& pl = t.node(il);
                Node& pt = t.node(it);
                if (pl.requires_grad) {
                  for (size_t i = 0; i < pl.val.size(); ++i) {
                    const double x = pl.val[i];
                    const double sig = 1.0 / (1.0 + std::exp(-x));
                    pl.grad[i] += g * (sig - pt.val[i]);
                  }
                }
                if (pt.requires_grad) {
                  for (size_t i = 0; i < pt.val.size(); ++i) pt.grad[i] += g * (-pl.val[i]);
                }
              });
}

Tensor Tape::symmetric_kl(Tensor p, Tensor q) {
  const int ip = id_of(p, "symmetric_kl"), iq = id_of(q, "symmetric_kl");
  const Node &np = node(ip), &nq = node(iq);
  if (np.shape != nq.shape || np.shape.empty()) shape_error("symmetric_kl", np.shape, nq.shape);
  const int width = np.shape.back();
  const int64_t rows = numel(np.shape) / width;
  
  for (int64_t r = 0; r < rows; ++r) {
    double sp = 0.0, sq = 0.0;
    for (int j = 0; j < width; ++j) {
      sp += np.val[static_cast<size_t>(r) * width + j];
      sq += nq.val[static_cast<size_t>(r) * width + j];
    }
    if (std::fabs(sp - 1.0) > 1e-6 || std::fabs(sq - 1.0) > 1e-6) {
      throw std::invalid_argument("symmetric_kl: row " + std::to_string(r) +
                                  " is not a probability distribution");
    }
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  double acc = 0.0;
  for (size_t i = 0; i < np.val.size(); ++i) {
    const double pc = std::max(np.val[i], kKlClamp);
    const double qc = std::max(nq.val[i], kKlClamp);
    const double lr = std::log(pc / qc);
    acc += pc * lr - qc * lr;
  }
  return make({1}, {acc * inv_rows}, np.requires_grad || nq.requires_grad,
              [ip, iq, inv_rows](Tape& t, int self) {
                const double g = t.node(self).grad[0] * inv_rows;
                Node& pp = t.node(ip);
                Node& pq = t.node(iq);
                for (size_t i = 0; i < pp.val.size(); ++i) {
                  const double pc = std::max(pp.val[i], kKlClamp);
                  const double qc = std::max(pq.val[i], kKlClamp);
                  const double lr = std::log(pc / qc);
                  if (pp.requires_grad && pp.val[i] > kKlClamp) {
                    pp.grad[i] += g * (lr + 1.0 - qc / pc);
                  }
                  if (pq.requires_grad && pq.val[i] > kKlClamp) {
                    pq.grad[i] += g * (-lr + 1.0 - pc / qc);
                  }
                }
              });
}

std::vector<double> softmax_row(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

}  // namespace mango::ad
