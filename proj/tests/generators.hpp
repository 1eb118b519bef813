// tests/generators.hpp

// Copyright 2026 The CML Annotation Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Data generators and numeric helpers shared by the unit suites and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "cml/annotation.hpp"
#include "cml/learner.hpp"
#include "test_support.hpp"

namespace cml::test {

// Gaussian blobs; class k is shifted by spread along every dimension j with j % classes == k.
inline LabeledFrameSet Blobs(std::mt19937_64& rng, const std::vector<int>& counts, int dim, double spread) {
  std::normal_distribution<double> g(0.0, 1.0);
  LabeledFrameSet d;
  int total = 0;
  for (int c : counts) total += c;
  d.rows.resize(total, dim);
  int r = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    d.class_ids.push_back(static_cast<int>(k) + 1);
    for (int i = 0; i < counts[k]; ++i, ++r) {
      for (int j = 0; j < dim; ++j) d.rows(r, j) = g(rng) + (j % counts.size() == k ? spread : 0.0);
      d.labels.push_back(static_cast<int>(k) + 1);
    }
  }
  return d;
}

// 200 points in 2-D, classes on either side of a random line through the centre with margin >= 1.
// An off-centre line needs a large bias weight, which the regularized 0.1 bias feature resists.
inline LabeledFrameSet SeparableSet(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-10, 10), angle(0, 2 * std::numbers::pi);
  const double a = angle(rng);
  const double nx = std::cos(a), ny = std::sin(a);
  LabeledFrameSet d;
  d.rows.resize(200, 2);
  d.class_ids = {1, 2};
  for (int i = 0; i < 200;) {
    const double px = u(rng), py = u(rng);
    const double dist = nx * px + ny * py;
    if (std::abs(dist) < 0.5) continue;
    const int label = (i % 2 == 0) ? 1 : 2;
    if ((dist > 0) != (label == 1)) continue;
    d.rows(i, 0) = px;
    d.rows(i, 1) = py;
    d.labels.push_back(label);
    ++i;
  }
  return d;
}

inline double RelativeError(const Eigen::VectorXd& got, const Eigen::VectorXd& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-8);
}

inline Eigen::VectorXd CentralDifference(const std::function<double(const Eigen::VectorXd&)>& f,
                                         const Eigen::VectorXd& w, double h) {
  Eigen::VectorXd g(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    Eigen::VectorXd a = w, b = w;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

// Random toy-scheme annotation whose boundaries lie on the grid, every segment
// at least one frame long and touching neighbours of different classes.
inline DiscreteAnnotation RandomGridAnnotation(std::mt19937_64& rng, double step) {
  std::uniform_int_distribution<int> len(1, 12), gap(0, 4), cls(1, 3), count(0, 25);
  DiscreteAnnotation a;
  a.scheme = ToyScheme();
  int k = gap(rng);
  int prev_class = -1, prev_end = -1;
  for (int i = count(rng); i > 0; --i) {
    int c = cls(rng);
    if (k == prev_end)
      while (c == prev_class) c = cls(rng);
    const int e = k + len(rng);
    a.segments.push_back({k * step, e * step, c, 1.0});
    prev_class = c;
    prev_end = e;
    k = e + gap(rng);
  }
  return a;
}

}  // namespace cml::test
