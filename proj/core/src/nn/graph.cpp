#include "sst/nn/graph.hpp"

#include <algorithm>
#include <cmath>

namespace sst::nn {

Tensor& ParamStore::add(const std::string& name, Mat value, bool trainable) {
  if (by_name_.count(name)) fail(ErrorKind::config, "duplicate parameter " + name);
  auto t = std::make_unique<Tensor>();
  t->name = name;
  t->grad = Mat::Zero(value.rows(), value.cols());
  t->value = std::move(value);
  t->trainable = trainable;
  Tensor* raw = t.get();
  by_name_.emplace(name, std::move(t));
  order_.push_back(raw);
  return *raw;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) fail(ErrorKind::config, "unknown parameter " + name);
  return *it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) fail(ErrorKind::config, "unknown parameter " + name);
  return *it->second;
}

bool ParamStore::contains(const std::string& name) const { return by_name_.count(name) > 0; }

void ParamStore::zero_grad() {
  for (Tensor* t : order_) t->zero_grad();
}

size_t ParamStore::parameter_count() const {
  size_t n = 0;
  for (const Tensor* t : order_) n += static_cast<size_t>(t->value.size());
  return n;
}

Ragged Ragged::of_lengths(const std::vector<int>& lengths) {
  Ragged r;
  r.offsets.resize(lengths.size() + 1);
  r.offsets[0] = 0;
  for (size_t i = 0; i < lengths.size(); ++i) r.offsets[i + 1] = r.offsets[i] + lengths[i];
  return r;
}

namespace {

const Mat& val(const Node* n) { return node_value(n); }

void accum(Node* p, const Mat& delta) {
  if (!p->needs_grad) return;
  if (p->param) {
    p->param->grad += delta;
    return;
  }
  if (!p->grad_live) {
    p->grad = Mat::Zero(p->value.rows(), p->value.cols());
    p->grad_live = true;
  }
  p->grad += delta;
}

}  // namespace

Node* Graph::make(Mat value, bool needs_grad) {
  nodes_.emplace_back();
  Node* n = &nodes_.back();
  n->value = std::move(value);
  n->needs_grad = needs_grad && grads_enabled_;
  return n;
}

Node* Graph::param(Tensor& t) {
  nodes_.emplace_back();
  Node* n = &nodes_.back();
  n->param = &t;
  n->needs_grad = t.trainable && grads_enabled_;
  return n;
}

Node* Graph::frozen_param(Tensor& t) {
  nodes_.emplace_back();
  Node* n = &nodes_.back();
  n->param = &t;
  n->needs_grad = false;
  return n;
}

Node* Graph::input(Mat v) { return make(std::move(v), false); }

Node* Graph::matmul(Node* a, Node* b) {
  Node* out = make(val(a) * val(b), a->needs_grad || b->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, b](Node& o) {
      if (a->needs_grad) accum(a, o.grad * val(b).transpose());
      if (b->needs_grad) accum(b, val(a).transpose() * o.grad);
    };
  return out;
}

Node* Graph::add(Node* a, Node* b) {
  Node* out = make(val(a) + val(b), a->needs_grad || b->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, b](Node& o) {
      accum(a, o.grad);
      accum(b, o.grad);
    };
  return out;
}

Node* Graph::sub(Node* a, Node* b) {
  Node* out = make(val(a) - val(b), a->needs_grad || b->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, b](Node& o) {
      accum(a, o.grad);
      accum(b, -o.grad);
    };
  return out;
}

Node* Graph::add_rowvec(Node* a, Node* row) {
  Mat v = val(a);
  v.rowwise() += Eigen::RowVectorXd(val(row).row(0));
  Node* out = make(std::move(v), a->needs_grad || row->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, row](Node& o) {
      accum(a, o.grad);
      if (row->needs_grad) accum(row, o.grad.colwise().sum());
    };
  return out;
}

Node* Graph::hadamard(Node* a, Node* b) {
  Node* out = make(val(a).cwiseProduct(val(b)), a->needs_grad || b->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, b](Node& o) {
      if (a->needs_grad) accum(a, o.grad.cwiseProduct(val(b)));
      if (b->needs_grad) accum(b, o.grad.cwiseProduct(val(a)));
    };
  return out;
}

Node* Graph::scale(Node* a, double s) {
  Node* out = make(val(a) * s, a->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, s](Node& o) { accum(a, o.grad * s); };
  return out;
}

Node* Graph::relu(Node* a) {
  Node* out = make(val(a).cwiseMax(0.0), a->needs_grad);
  if (out->needs_grad)
    out->backprop = [a](Node& o) {
      accum(a, (val(a).array() > 0.0).cast<double>().matrix().cwiseProduct(o.grad));
    };
  return out;
}

Node* Graph::transpose(Node* a) {
  Node* out = make(val(a).transpose(), a->needs_grad);
  if (out->needs_grad)
    out->backprop = [a](Node& o) { accum(a, o.grad.transpose()); };
  return out;
}

Node* Graph::gather_rows(Node* table, std::vector<int> ids) {
  const Mat& tv = val(table);
  Mat v(static_cast<int>(ids.size()), tv.cols());
  for (size_t i = 0; i < ids.size(); ++i) v.row(static_cast<int>(i)) = tv.row(ids[i]);
  Node* out = make(std::move(v), table->needs_grad);
  if (out->needs_grad)
    out->backprop = [table, ids = std::move(ids)](Node& o) {
      Mat& g = table->param ? table->param->grad : table->grad;
      if (!table->param && !table->grad_live) {
        table->grad = Mat::Zero(table->value.rows(), table->value.cols());
        table->grad_live = true;
      }
      for (size_t i = 0; i < ids.size(); ++i)
        g.row(ids[i]) += o.grad.row(static_cast<int>(i));
    };
  return out;
}

Node* Graph::concat_rows(const std::vector<Node*>& parts) {
  int rows = 0;
  for (Node* p : parts) rows += static_cast<int>(val(p).rows());
  Mat v(rows, val(parts[0]).cols());
  bool ng = false;
  int at = 0;
  for (Node* p : parts) {
    v.middleRows(at, val(p).rows()) = val(p);
    at += static_cast<int>(val(p).rows());
    ng = ng || p->needs_grad;
  }
  Node* out = make(std::move(v), ng);
  if (out->needs_grad)
    out->backprop = [parts](Node& o) {
      int at = 0;
      for (Node* p : parts) {
        int r = static_cast<int>(val(p).rows());
        accum(p, o.grad.middleRows(at, r));
        at += r;
      }
    };
  return out;
}

Node* Graph::concat_cols(const std::vector<Node*>& parts) {
  int cols = 0;
  for (Node* p : parts) cols += static_cast<int>(val(p).cols());
  Mat v(val(parts[0]).rows(), cols);
  bool ng = false;
  int at = 0;
  for (Node* p : parts) {
    v.middleCols(at, val(p).cols()) = val(p);
    at += static_cast<int>(val(p).cols());
    ng = ng || p->needs_grad;
  }
  Node* out = make(std::move(v), ng);
  if (out->needs_grad)
    out->backprop = [parts](Node& o) {
      int at = 0;
      for (Node* p : parts) {
        int c = static_cast<int>(val(p).cols());
        accum(p, o.grad.middleCols(at, c));
        at += c;
      }
    };
  return out;
}

Node* Graph::slice_rows(Node* a, int start, int count) {
  Node* out = make(val(a).middleRows(start, count), a->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, start, count](Node& o) {
      Mat d = Mat::Zero(val(a).rows(), val(a).cols());
      d.middleRows(start, count) = o.grad;
      accum(a, d);
    };
  return out;
}

Node* Graph::layer_norm(Node* x, Node* gamma, Node* beta, double eps) {
  const Mat& xv = val(x);
  const int rows = static_cast<int>(xv.rows());
  const int cols = static_cast<int>(xv.cols());
  Mat xhat(rows, cols);
  Vec inv_std(rows);
  for (int r = 0; r < rows; ++r) {
    double mu = xv.row(r).mean();
    double var = (xv.row(r).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
  }
  Mat y = xhat;
  y.array().rowwise() *= val(gamma).row(0).array();
  y.rowwise() += Eigen::RowVectorXd(val(beta).row(0));
  bool ng = x->needs_grad || gamma->needs_grad || beta->needs_grad;
  Node* out = make(std::move(y), ng);
  if (out->needs_grad)
    out->backprop = [x, gamma, beta, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Node& o) {
      if (beta->needs_grad) accum(beta, o.grad.colwise().sum());
      if (gamma->needs_grad) accum(gamma, o.grad.cwiseProduct(xhat).colwise().sum());
      if (!x->needs_grad) return;
      const int rows = static_cast<int>(o.grad.rows());
      const int cols = static_cast<int>(o.grad.cols());
      Mat dx(rows, cols);
      Eigen::RowVectorXd g = val(gamma).row(0);
      for (int r = 0; r < rows; ++r) {
        Eigen::RowVectorXd dxh = o.grad.row(r).cwiseProduct(g);
        double m1 = dxh.mean();
        double m2 = dxh.cwiseProduct(xhat.row(r)).mean();
        dx.row(r) =
            (dxh.array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
      }
      accum(x, dx);
    };
  return out;
}

Node* Graph::softmax_rows(Node* x) {
  const Mat& xv = val(x);
  Mat y(xv.rows(), xv.cols());
  for (int r = 0; r < xv.rows(); ++r) {
    Eigen::RowVectorXd e = (xv.row(r).array() - xv.row(r).maxCoeff()).exp();
    y.row(r) = e / e.sum();
  }
  Node* out = make(std::move(y), x->needs_grad);
  if (out->needs_grad)
    out->backprop = [x](Node& o) {
      Mat dx(o.grad.rows(), o.grad.cols());
      for (int r = 0; r < o.grad.rows(); ++r) {
        double dot = o.grad.row(r).dot(o.value.row(r));
        dx.row(r) = o.value.row(r).cwiseProduct(o.grad.row(r).array().matrix() -
                                                Eigen::RowVectorXd::Constant(o.grad.cols(), dot));
      }
      accum(x, dx);
    };
  return out;
}

Node* Graph::log_softmax_rows(Node* x) {
  const Mat& xv = val(x);
  Mat y(xv.rows(), xv.cols());
  for (int r = 0; r < xv.rows(); ++r) {
    double mx = xv.row(r).maxCoeff();
    double lse = std::log((xv.row(r).array() - mx).exp().sum()) + mx;
    y.row(r) = xv.row(r).array() - lse;
  }
  Node* out = make(std::move(y), x->needs_grad);
  if (out->needs_grad)
    out->backprop = [x](Node& o) {
      Mat dx(o.grad.rows(), o.grad.cols());
      for (int r = 0; r < o.grad.rows(); ++r) {
        double s = o.grad.row(r).sum();
        dx.row(r) = o.grad.row(r) - s * o.value.row(r).array().exp().matrix();
      }
      accum(x, dx);
    };
  return out;
}

Node* Graph::nll_rows(Node* logp, std::vector<int> targets, std::vector<double> row_weights) {
  const Mat& lp = val(logp);
  if (static_cast<int>(targets.size()) != lp.rows())
    fail(ErrorKind::input, "nll_rows: target count does not match rows");
  double total = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    double w = row_weights.empty() ? 1.0 : row_weights[i];
    total -= w * lp(static_cast<int>(i), targets[i]);
  }
  Node* out = make(Mat::Constant(1, 1, total), logp->needs_grad);
  if (out->needs_grad)
    out->backprop = [logp, targets = std::move(targets),
                     row_weights = std::move(row_weights)](Node& o) {
      Mat d = Mat::Zero(val(logp).rows(), val(logp).cols());
      double g = o.grad(0, 0);
      for (size_t i = 0; i < targets.size(); ++i) {
        double w = row_weights.empty() ? 1.0 : row_weights[i];
        d(static_cast<int>(i), targets[i]) -= w * g;
      }
      accum(logp, d);
    };
  return out;
}

Node* Graph::sum_all(Node* a) {
  Node* out = make(Mat::Constant(1, 1, val(a).sum()), a->needs_grad);
  if (out->needs_grad)
    out->backprop = [a](Node& o) {
      accum(a, Mat::Constant(val(a).rows(), val(a).cols(), o.grad(0, 0)));
    };
  return out;
}

Node* Graph::add_scalars(Node* a, Node* b) { return add(a, b); }

Node* Graph::scale_add(Node* a, double sa, Node* b, double sb) {
  Node* out = make(sa * val(a) + sb * val(b), a->needs_grad || b->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, b, sa, sb](Node& o) {
      if (a->needs_grad) accum(a, sa * o.grad);
      if (b->needs_grad) accum(b, sb * o.grad);
    };
  return out;
}

Node* Graph::dropout(Node* a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  const Mat& av = val(a);
  Mat mask(av.rows(), av.cols());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 - p;
  for (int r = 0; r < av.rows(); ++r)  // fixed row-major draw order
    for (int c = 0; c < av.cols(); ++c) mask(r, c) = u(rng) < keep ? 1.0 / keep : 0.0;
  Node* out = make(av.cwiseProduct(mask), a->needs_grad);
  if (out->needs_grad)
    out->backprop = [a, mask = std::move(mask)](Node& o) {
      accum(a, o.grad.cwiseProduct(mask));
    };
  return out;
}

Node* Graph::im2col(Node* x, int width) {
  const Mat& xv = val(x);
  const int T = static_cast<int>(xv.rows());
  const int C = static_cast<int>(xv.cols());
  if (T < width) fail(ErrorKind::input, "im2col: sequence shorter than filter width");
  Mat v(T - width + 1, width * C);
  for (int r = 0; r + width <= T; ++r)
    for (int k = 0; k < width; ++k) v.block(r, k * C, 1, C) = xv.row(r + k);
  Node* out = make(std::move(v), x->needs_grad);
  if (out->needs_grad)
    out->backprop = [x, width, C](Node& o) {
      Mat d = Mat::Zero(val(x).rows(), val(x).cols());
      for (int r = 0; r < o.grad.rows(); ++r)
        for (int k = 0; k < width; ++k) d.row(r + k) += o.grad.block(r, k * C, 1, C);
      accum(x, d);
    };
  return out;
}

Node* Graph::max_over_rows(Node* x) {
  const Mat& xv = val(x);
  const int C = static_cast<int>(xv.cols());
  Mat v(1, C);
  std::vector<int> arg(C);
  for (int c = 0; c < C; ++c) {
    int best = 0;
    for (int r = 1; r < xv.rows(); ++r)
      if (xv(r, c) > xv(best, c)) best = r;
    arg[c] = best;
    v(0, c) = xv(best, c);
  }
  Node* out = make(std::move(v), x->needs_grad);
  if (out->needs_grad)
    out->backprop = [x, arg = std::move(arg)](Node& o) {
      Mat d = Mat::Zero(val(x).rows(), val(x).cols());
      for (int c = 0; c < o.grad.cols(); ++c) d(arg[c], c) += o.grad(0, c);
      accum(x, d);
    };
  return out;
}

Node* Graph::attention(Node* q, Node* k, Node* v, const Ragged& q_spans,
                       const Ragged& kv_spans, int heads, bool causal) {
  const Mat& qv = val(q);
  const Mat& kv = val(k);
  const Mat& vv = val(v);
  const int C = static_cast<int>(qv.cols());
  if (C % heads != 0) fail(ErrorKind::config, "attention: width not divisible by heads");
  if (q_spans.count() != kv_spans.count())
    fail(ErrorKind::input, "attention: span count mismatch");
  const int dh = C / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const int blocks = q_spans.count();

  Mat out_v(qv.rows(), C);
  // probs[block*heads + h] is the (qT x kT) attention matrix
  auto probs = std::make_shared<std::vector<Mat>>(static_cast<size_t>(blocks) * heads);

#pragma omp parallel for schedule(dynamic)
  for (int b = 0; b < blocks; ++b) {
    const int qb = q_spans.begin(b), qT = q_spans.length(b);
    const int kb = kv_spans.begin(b), kT = kv_spans.length(b);
    for (int h = 0; h < heads; ++h) {
      Mat scores = qv.block(qb, h * dh, qT, dh) * kv.block(kb, h * dh, kT, dh).transpose() * scl;
      if (causal)
        for (int r = 0; r < qT; ++r)
          for (int c = r + 1; c < kT; ++c) scores(r, c) = -1e30;
      for (int r = 0; r < qT; ++r) {
        Eigen::RowVectorXd e = (scores.row(r).array() - scores.row(r).maxCoeff()).exp();
        scores.row(r) = e / e.sum();
      }
      out_v.block(qb, h * dh, qT, dh) = scores * vv.block(kb, h * dh, kT, dh);
      (*probs)[static_cast<size_t>(b) * heads + h] = std::move(scores);
    }
  }

  bool ng = q->needs_grad || k->needs_grad || v->needs_grad;
  Node* out = make(std::move(out_v), ng);
  if (out->needs_grad)
    out->backprop = [q, k, v, q_spans, kv_spans, heads, dh, scl, probs](Node& o) {
      Mat dq = Mat::Zero(val(q).rows(), val(q).cols());
      Mat dk = Mat::Zero(val(k).rows(), val(k).cols());
      Mat dv = Mat::Zero(val(v).rows(), val(v).cols());
      const int blocks = q_spans.count();
#pragma omp parallel for schedule(dynamic)
      for (int b = 0; b < blocks; ++b) {
        const int qb = q_spans.begin(b), qT = q_spans.length(b);
        const int kb = kv_spans.begin(b), kT = kv_spans.length(b);
        for (int h = 0; h < heads; ++h) {
          const Mat& A = (*probs)[static_cast<size_t>(b) * heads + h];
          Mat dOh = o.grad.block(qb, h * dh, qT, dh);
          dv.block(kb, h * dh, kT, dh).noalias() += A.transpose() * dOh;
          Mat dA = dOh * val(v).block(kb, h * dh, kT, dh).transpose();
          Mat dS(qT, kT);
          for (int r = 0; r < qT; ++r) {
            double dot = dA.row(r).dot(A.row(r));
            dS.row(r) = A.row(r).cwiseProduct(
                dA.row(r) - Eigen::RowVectorXd::Constant(kT, dot));
          }
          dq.block(qb, h * dh, qT, dh).noalias() += dS * val(k).block(kb, h * dh, kT, dh) * scl;
          dk.block(kb, h * dh, kT, dh).noalias() += dS.transpose() * val(q).block(qb, h * dh, qT, dh) * scl;
        }
      }
      if (q->needs_grad) accum(q, dq);
      if (k->needs_grad) accum(k, dk);
      if (v->needs_grad) accum(v, dv);
    };
  return out;
}

Node* Graph::incremental_attention(Node* q, std::vector<Node*> key_steps,
                                   std::vector<Node*> value_steps, int heads,
                                   std::vector<int> lengths) {
  const Mat& qv = val(q);
  const int B = static_cast<int>(qv.rows());
  const int C = static_cast<int>(qv.cols());
  const int dh = C / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const int T = static_cast<int>(key_steps.size());

  // probs[h] is B x T; row b holds softmax weights over steps < lengths[b]
  auto probs = std::make_shared<std::vector<Mat>>(heads, Mat::Zero(B, T));
  Mat out_v = Mat::Zero(B, C);
  for (int b = 0; b < B; ++b) {
    const int L = lengths[b];
    for (int h = 0; h < heads; ++h) {
      Eigen::RowVectorXd scores(L);
      for (int t = 0; t < L; ++t)
        scores(t) = qv.block(b, h * dh, 1, dh).row(0).dot(
                        val(key_steps[t]).block(b, h * dh, 1, dh).row(0)) *
                    scl;
      Eigen::RowVectorXd e = (scores.array() - scores.maxCoeff()).exp();
      e /= e.sum();
      for (int t = 0; t < L; ++t) {
        (*probs)[h](b, t) = e(t);
        out_v.block(b, h * dh, 1, dh) += e(t) * val(value_steps[t]).block(b, h * dh, 1, dh);
      }
    }
  }

  bool ng = q->needs_grad;
  for (Node* n : key_steps) ng = ng || n->needs_grad;
  for (Node* n : value_steps) ng = ng || n->needs_grad;
  Node* out = make(std::move(out_v), ng);
  if (out->needs_grad)
    out->backprop = [q, key_steps = std::move(key_steps), value_steps = std::move(value_steps),
                     heads, dh, scl, lengths = std::move(lengths), probs](Node& o) {
      const int B = static_cast<int>(val(q).rows());
      Mat dq = Mat::Zero(val(q).rows(), val(q).cols());
      std::vector<Mat> dk(key_steps.size()), dvv(value_steps.size());
      for (size_t t = 0; t < key_steps.size(); ++t) {
        dk[t] = Mat::Zero(B, val(q).cols());
        dvv[t] = Mat::Zero(B, val(q).cols());
      }
      for (int b = 0; b < B; ++b) {
        const int L = lengths[b];
        for (int h = 0; h < heads; ++h) {
          Eigen::RowVectorXd dA(L);
          for (int t = 0; t < L; ++t) {
            dA(t) = o.grad.block(b, h * dh, 1, dh).row(0).dot(
                val(value_steps[t]).block(b, h * dh, 1, dh).row(0));
            dvv[t].block(b, h * dh, 1, dh) +=
                (*probs)[h](b, t) * o.grad.block(b, h * dh, 1, dh);
          }
          double dot = 0;
          for (int t = 0; t < L; ++t) dot += dA(t) * (*probs)[h](b, t);
          for (int t = 0; t < L; ++t) {
            double dS = (*probs)[h](b, t) * (dA(t) - dot);
            dq.block(b, h * dh, 1, dh) +=
                dS * scl * val(key_steps[t]).block(b, h * dh, 1, dh);
            dk[t].block(b, h * dh, 1, dh) +=
                dS * scl * val(q).block(b, h * dh, 1, dh);
          }
        }
      }
      if (q->needs_grad) accum(q, dq);
      for (size_t t = 0; t < key_steps.size(); ++t) {
        if (key_steps[t]->needs_grad) accum(key_steps[t], dk[t]);
        if (value_steps[t]->needs_grad) accum(value_steps[t], dvv[t]);
      }
    };
  return out;
}

Node* Graph::cross_attention_rows(Node* q, Node* k, Node* v, const Ragged& kv_spans,
                                  int heads) {
  const Mat& qv = val(q);
  const int B = static_cast<int>(qv.rows());
  const int C = static_cast<int>(qv.cols());
  const int dh = C / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  if (kv_spans.count() != B) fail(ErrorKind::input, "cross_attention_rows: B mismatch");

  auto probs = std::make_shared<std::vector<Eigen::RowVectorXd>>(
      static_cast<size_t>(B) * heads);
  Mat out_v(B, C);
  for (int b = 0; b < B; ++b) {
    const int kb = kv_spans.begin(b), kT = kv_spans.length(b);
    for (int h = 0; h < heads; ++h) {
      Eigen::RowVectorXd scores =
          qv.block(b, h * dh, 1, dh) * val(k).block(kb, h * dh, kT, dh).transpose() * scl;
      Eigen::RowVectorXd e = (scores.array() - scores.maxCoeff()).exp();
      e /= e.sum();
      out_v.block(b, h * dh, 1, dh) = e * val(v).block(kb, h * dh, kT, dh);
      (*probs)[static_cast<size_t>(b) * heads + h] = std::move(e);
    }
  }
  bool ng = q->needs_grad || k->needs_grad || v->needs_grad;
  Node* out = make(std::move(out_v), ng);
  if (out->needs_grad)
    out->backprop = [q, k, v, kv_spans, heads, dh, scl, probs](Node& o) {
      const int B = static_cast<int>(val(q).rows());
      Mat dq = Mat::Zero(val(q).rows(), val(q).cols());
      Mat dk = Mat::Zero(val(k).rows(), val(k).cols());
      Mat dv = Mat::Zero(val(v).rows(), val(v).cols());
      for (int b = 0; b < B; ++b) {
        const int kb = kv_spans.begin(b), kT = kv_spans.length(b);
        for (int h = 0; h < heads; ++h) {
          const Eigen::RowVectorXd& A = (*probs)[static_cast<size_t>(b) * heads + h];
          Eigen::RowVectorXd dOh = o.grad.block(b, h * dh, 1, dh);
          dv.block(kb, h * dh, kT, dh).noalias() += A.transpose() * dOh;
          Eigen::RowVectorXd dA = dOh * val(v).block(kb, h * dh, kT, dh).transpose();
          double dot = dA.dot(A);
          Eigen::RowVectorXd dS = A.cwiseProduct(dA - Eigen::RowVectorXd::Constant(kT, dot));
          dq.block(b, h * dh, 1, dh).noalias() += dS * val(k).block(kb, h * dh, kT, dh) * scl;
          dk.block(kb, h * dh, kT, dh).noalias() += dS.transpose() * val(q).block(b, h * dh, 1, dh) * scl;
        }
      }
      if (q->needs_grad) accum(q, dq);
      if (k->needs_grad) accum(k, dk);
      if (v->needs_grad) accum(v, dv);
    };
  return out;
}

void Graph::backward(Node* loss) {
  if (loss->value.rows() != 1 || loss->value.cols() != 1)
    fail(ErrorKind::input, "backward: loss must be a 1x1 node");
  loss->grad = Mat::Constant(1, 1, 1.0);
  loss->grad_live = true;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    if (!n.needs_grad || !n.grad_live || !n.backprop) continue;
    n.backprop(n);
  }
}

Mat finite_difference(Tensor& t, const std::function<double()>& eval, double h) {
  Mat g(t.value.rows(), t.value.cols());
  for (int r = 0; r < t.value.rows(); ++r) {
    for (int c = 0; c < t.value.cols(); ++c) {
      double keep = t.value(r, c);
      t.value(r, c) = keep + h;
      double up = eval();
      t.value(r, c) = keep - h;
      double dn = eval();
      t.value(r, c) = keep;
      g(r, c) = (up - dn) / (2 * h);
    }
  }
  return g;
}

double grad_check_max_rel_err(ParamStore& params, const std::function<double()>& loss_fn,
                              const std::function<void()>& backward_fn, double h) {
  params.zero_grad();
  backward_fn();
  double worst = 0;
  for (Tensor* t : params.all()) {
    if (!t->trainable) continue;
    Mat numeric = finite_difference(*t, loss_fn, h);
    for (int r = 0; r < numeric.rows(); ++r)
      for (int c = 0; c < numeric.cols(); ++c) {
        double a = t->grad(r, c), n = numeric(r, c);
        double denom = std::max({std::abs(a), std::abs(n), 1e-8});
        double rel = std::abs(a - n) / denom;
        if (std::abs(a - n) < 1e-9) rel = 0;  // both effectively zero
        worst = std::max(worst, rel);
      }
  }
  return worst;
}

}  // namespace sst::nn
