// SPDX-License-Identifier: Apache-2.0
//
// Similarity-based uni-modal label migration.
//
// Segments whose uni-modal features are highly similar tend to carry the same
// events. Within a batch, audio-visual labels are copied onto every segment
// whose cosine similarity to a labeled segment clears a threshold, weighted by
// that similarity; duplicates are averaged and original positives kept at 1.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ear/error.hpp"
#include "ear/tensor.hpp"

namespace ear::migration {

enum class Modality { Audio, Visual };

inline constexpr double kMinFeatureNorm = 1e-9;
inline constexpr double kDefaultMuAudio = 0.98;
inline constexpr double kDefaultMuVisual = 0.95;

struct SegmentBatch {
  Tensor features;                  // T'×D' uni-modal segment features
  Tensor y_av;                      // T'×C' binary audio-visual labels
  Modality modality = Modality::Audio;
  std::vector<std::size_t> video;   // per-segment video index; empty = one pool
};

struct MigrationResult {
  Tensor similarity;  // S, T'×T'
  Tensor mask;        // M, T'×T'
  Tensor masked;      // Ŝ = M ⊙ S
  Tensor raw;         // Y_ms = Ŝ·Y_AV
  Tensor duplicates;  // D_n = M·Y_AV
  Tensor labels;      // final soft labels in [0, 1]
  double threshold = 0.0;
};

/// Rejects zero feature rows; the error names the first offending segment.
inline void validate_features(const Tensor& g) {
  for (std::size_t i = 0; i < g.rows(); ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < g.cols(); ++j) n2 += g(i, j) * g(i, j);
    if (!(std::sqrt(n2) > kMinFeatureNorm)) {
      throw IngestionError("segment " + std::to_string(i) + " has a zero-norm feature row (norm " +
                           std::to_string(std::sqrt(n2)) + ")");
    }
  }
}

/// S[i,j] = <g_i, g_j> / (|g_i| |g_j|), clamped to [-1, 1] with an exact unit
/// diagonal.
inline Tensor cosine_similarity(const Tensor& g) {
  validate_features(g);
  const std::size_t n = g.rows(), d = g.cols();
  Tensor unit = g;
  for (std::size_t i = 0; i < n; ++i) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) n2 += g(i, j) * g(i, j);
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t j = 0; j < d; ++j) unit(i, j) *= inv;
  }
  Tensor s = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += unit(i, k) * unit(j, k);
      dot = std::clamp(dot, -1.0, 1.0);
      s(i, j) = dot;
      s(j, i) = dot;
    }
  }
  return s;
}

struct MaskedSimilarity {
  Tensor mask;
  Tensor masked;
};

/// M = [S >= mu]; Ŝ = M ⊙ S.
inline MaskedSimilarity threshold_mask(const Tensor& s, double mu) {
  MaskedSimilarity out{Tensor(s.dims()), Tensor(s.dims())};
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] >= mu) {
      out.mask[i] = 1.0;
      out.masked[i] = s[i];
    }
  }
  return out;
}

/// Y_ms = Ŝ·Y_AV.
inline Tensor migrate(const Tensor& masked, const Tensor& y_av) {
  if (masked.rows() != masked.cols() || masked.cols() != y_av.rows()) {
    throw ShapeError("migrate: similarity " + dims_to_string(masked.dims()) + " vs labels " +
                     dims_to_string(y_av.dims()));
  }
  const std::size_t n = y_av.rows(), c = y_av.cols();
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double w = masked(i, k);
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < c; ++j) out(i, j) += w * y_av(k, j);
    }
  return out;
}

/// D_n = M·Y_AV counts donors; Y' = Y_ms ⊘ D_n with 0/0 = 0; final labels are
/// max(Y', Y_AV).
inline Tensor postprocess(const Tensor& raw, const Tensor& mask, const Tensor& y_av, Tensor* duplicates = nullptr) {
  Tensor d = migrate(mask, y_av);
  if (raw.dims() != y_av.dims()) {
    throw ShapeError("postprocess: migrated " + dims_to_string(raw.dims()) + " vs labels " +
                     dims_to_string(y_av.dims()));
  }
  Tensor out(raw.dims());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double averaged = d[i] == 0.0 ? 0.0 : raw[i] / d[i];
    out[i] = std::max(averaged, y_av[i]);
  }
  if (duplicates) *duplicates = std::move(d);
  return out;
}

inline void validate_batch(const SegmentBatch& b) {
  if (b.features.rank() != 2 || b.y_av.rank() != 2 || b.features.rows() != b.y_av.rows()) {
    throw ShapeError("migration batch: features " + dims_to_string(b.features.dims()) + " vs labels " +
                     dims_to_string(b.y_av.dims()));
  }
  if (!b.video.empty() && b.video.size() != b.features.rows()) {
    throw ShapeError("migration batch: " + std::to_string(b.video.size()) + " video ids for " +
                     std::to_string(b.features.rows()) + " segments");
  }
  for (std::size_t i = 0; i < b.y_av.size(); ++i) {
    if (b.y_av[i] != 0.0 && b.y_av[i] != 1.0) {
      throw IngestionError("migration batch: audio-visual label entry " + std::to_string(i) + " is not binary");
    }
  }
}

/// Full migration over one batch. With per_video set, only segments of the
/// same video may donate labels to each other.
inline MigrationResult migrate_batch(const SegmentBatch& batch, double mu, bool per_video = false) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("migration threshold must lie in [0, 1], got " + std::to_string(mu));
  validate_batch(batch);
  MigrationResult r;
  r.threshold = mu;
  r.similarity = cosine_similarity(batch.features);
  auto [mask, masked] = threshold_mask(r.similarity, mu);
  if (per_video && !batch.video.empty()) {
    const std::size_t n = mask.rows();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (batch.video[i] != batch.video[j]) {
          mask(i, j) = 0.0;
          masked(i, j) = 0.0;
        }
  }
  r.mask = std::move(mask);
  r.masked = std::move(masked);
  r.raw = migrate(r.masked, batch.y_av);
  r.labels = postprocess(r.raw, r.mask, batch.y_av, &r.duplicates);
  return r;
}

}  // namespace ear::migration
