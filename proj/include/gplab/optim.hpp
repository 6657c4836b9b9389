#pragma once

#include <cmath>
#include <vector>

#include "gplab/common.hpp"

namespace gplab {

// Adam over a fixed list of parameter matrices. Slot order must stay stable
// across steps; moments are allocated lazily on the first step.
struct Adam {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int t = 0;
  std::vector<Mat> m, v;

  Adam() = default;
  explicit Adam(double lr_) : lr(lr_) {}

  void step(const std::vector<Mat*>& params, const std::vector<Mat>& grads) {
    if (params.size() != grads.size()) throw DimensionError("adam: param/grad count mismatch");
    if (m.empty()) {
      for (const Mat* p : params) {
        m.push_back(Mat::Zero(p->rows(), p->cols()));
        v.push_back(Mat::Zero(p->rows(), p->cols()));
      }
    }
    ++t;
    double c1 = 1.0 - std::pow(beta1, t);
    double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
      v[i] = (beta2 * v[i].array() + (1.0 - beta2) * grads[i].array().square()).matrix();
      Mat mhat = m[i] / c1;
      Mat vhat = v[i] / c2;
      params[i]->array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
    }
  }
};

}  // namespace gplab
