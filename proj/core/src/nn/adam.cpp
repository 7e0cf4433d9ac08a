#include "sst/nn/adam.hpp"

#include <cmath>

namespace sst::nn {

double Adam::step(ParamStore& params) {
  double sq = 0;
  for (Tensor* t : params.all())
    if (t->trainable) sq += t->grad.squaredNorm();
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) fail(ErrorKind::train, "gradient norm is not finite");

  double scale = 1.0;
  if (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Tensor* t : params.all()) {
    if (!t->trainable) continue;
    auto [it, fresh] = moments_.try_emplace(t, std::pair<Mat, Mat>{});
    if (fresh) {
      it->second.first = Mat::Zero(t->value.rows(), t->value.cols());
      it->second.second = Mat::Zero(t->value.rows(), t->value.cols());
    }
    Mat& m = it->second.first;
    Mat& v = it->second.second;
    Mat g = t->grad * scale;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Mat mhat = m / bc1;
    Mat vhat = v / bc2;
    t->value.array() -= cfg_.lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
    t->grad.setZero();
  }
  return norm;
}

}  // namespace sst::nn
