// SPDX-License-Identifier: Apache-2.0
//
// Scalar loop reference for label migration. Written against the formulas
// only; shares nothing with ear::migration beyond the Tensor container.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "ear/tensor.hpp"

namespace ear::testing {

struct MigrationOracleResult {
  std::vector<std::vector<double>> s, m, raw, dup, labels;
};

inline MigrationOracleResult migration_oracle(const Tensor& g, const Tensor& y, double mu) {
  const std::size_t n = g.rows(), d = g.cols(), c = y.cols();
  MigrationOracleResult r;
  r.s.assign(n, std::vector<double>(n));
  r.m.assign(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += g(i, k) * g(j, k);
        ni += g(i, k) * g(i, k);
        nj += g(j, k) * g(j, k);
      }
      r.s[i][j] = i == j ? 1.0 : dot / (std::sqrt(ni) * std::sqrt(nj));
      r.m[i][j] = r.s[i][j] >= mu ? 1.0 : 0.0;
    }
  }
  r.raw.assign(n, std::vector<double>(c));
  r.dup.assign(n, std::vector<double>(c));
  r.labels.assign(n, std::vector<double>(c));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t cat = 0; cat < c; ++cat) {
      double raw = 0, dup = 0;
      for (std::size_t t2 = 0; t2 < n; ++t2) {
        raw += r.m[t][t2] * r.s[t][t2] * y(t2, cat);
        dup += r.m[t][t2] * y(t2, cat);
      }
      r.raw[t][cat] = raw;
      r.dup[t][cat] = dup;
      const double avg = dup > 0 ? raw / dup : 0.0;
      r.labels[t][cat] = avg > y(t, cat) ? avg : y(t, cat);
    }
  }
  return r;
}

/// Random batch with clustered features so that thresholds in [0.9, 1) select
/// non-trivial donor sets.
struct RandomMigrationBatch {
  Tensor g, y;
  double mu;
};

inline RandomMigrationBatch random_migration_batch(std::mt19937_64& rng, std::size_t max_t = 16, std::size_t max_c = 6,
                                                   std::size_t max_d = 8) {
  std::uniform_int_distribution<std::size_t> tn(1, max_t), cn(1, max_c), dn(2, max_d);
  const std::size_t t = tn(rng), c = cn(rng), d = dn(rng);
  std::uniform_int_distribution<std::size_t> clusters(1, 4);
  const std::size_t k = clusters(rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> noise_scale(0.0, 0.3);
  std::vector<std::vector<double>> protos(k, std::vector<double>(d));
  for (auto& p : protos)
    for (auto& v : p) v = normal(rng);
  const double sigma = noise_scale(rng);
  Tensor g = Tensor::matrix(t, d);
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  for (std::size_t i = 0; i < t; ++i) {
    const auto& p = protos[pick(rng)];
    for (std::size_t j = 0; j < d; ++j) g(i, j) = p[j] + sigma * normal(rng);
  }
  Tensor y = Tensor::matrix(t, c);
  std::bernoulli_distribution on(0.3);
  for (auto& v : y.values()) v = on(rng) ? 1.0 : 0.0;
  std::uniform_real_distribution<double> mu(0.5, 0.995);
  return {std::move(g), std::move(y), mu(rng)};
}

}  // namespace ear::testing
