#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stp/ops.hpp"
#include "stp/rng.hpp"
#include "stp/tensor.hpp"

namespace stp {

// Round-half-up count of masked tokens at ratio rho.
inline int masked_count(int n_tokens, double rho) {
  return static_cast<int>(std::floor(rho * n_tokens + 0.5));
}

// Partition of {0..n_tokens-1} into masked/visible index sets, both sorted.
struct MaskingMap {
  int n_tokens = 0;
  double ratio = 0.0;
  std::vector<int> masked;
  std::vector<int> visible;

  static MaskingMap empty(int n_tokens) {
    MaskingMap m;
    m.n_tokens = n_tokens;
    m.ratio = 0.0;
    m.visible.resize(static_cast<size_t>(n_tokens));
    for (int i = 0; i < n_tokens; ++i) m.visible[static_cast<size_t>(i)] = i;
    return m;
  }
};

inline MaskingMap sample_masking_map(int n_tokens, double rho, Rng& rng) {
  if (rho < 0.0 || rho > 1.0) throw ValueError("sample_masking_map: rho must be in [0,1]");
  MaskingMap m;
  m.n_tokens = n_tokens;
  m.ratio = rho;
  m.masked = rng.sample_without_replacement(n_tokens, masked_count(n_tokens, rho));
  std::sort(m.masked.begin(), m.masked.end());
  std::vector<bool> is_masked(static_cast<size_t>(n_tokens), false);
  for (int i : m.masked) is_masked[static_cast<size_t>(i)] = true;
  m.visible.reserve(static_cast<size_t>(n_tokens) - m.masked.size());
  for (int i = 0; i < n_tokens; ++i)
    if (!is_masked[static_cast<size_t>(i)]) m.visible.push_back(i);
  return m;
}

// Per-frame token sequence: row i is the flattened p x p x C block of grid
// cell i (row-major grid order; within a patch, channel index runs fastest).
template <typename S>
struct PatchTokens {
  Tensor<S> tokens;  // N x (p*p*C)
  int grid_h = 0, grid_w = 0;
  int patch = 0, channels = 0;
  int n() const { return grid_h * grid_w; }
  int token_dim() const { return patch * patch * channels; }
};

template <typename S>
PatchTokens<S> patchify(const Tensor<S>& image, int patch) {
  if (image.rank() != 3) throw ShapeError("patchify: expected C x H x W, got " + shape_str(image.shape()));
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h % patch != 0 || w % patch != 0) {
    throw ShapeError("patchify: H=" + std::to_string(h) + ", W=" + std::to_string(w) +
                     " not divisible by patch size p=" + std::to_string(patch));
  }
  PatchTokens<S> out;
  out.grid_h = h / patch;
  out.grid_w = w / patch;
  out.patch = patch;
  out.channels = c;
  const int n = out.n(), dim = out.token_dim();
  std::vector<S> buf(static_cast<size_t>(n) * dim);
  const S* img = image.data();
  for (int gy = 0; gy < out.grid_h; ++gy)
    for (int gx = 0; gx < out.grid_w; ++gx) {
      S* row = buf.data() + static_cast<size_t>(gy * out.grid_w + gx) * dim;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px)
          for (int ch = 0; ch < c; ++ch)
            row[(py * patch + px) * c + ch] =
                img[(static_cast<size_t>(ch) * h + gy * patch + py) * w + gx * patch + px];
    }
  out.tokens = Tensor<S>::from_data({n, dim}, std::move(buf));
  return out;
}

template <typename S>
Tensor<S> unpatchify(const PatchTokens<S>& tokens) {
  const int c = tokens.channels, p = tokens.patch;
  const int h = tokens.grid_h * p, w = tokens.grid_w * p;
  if (tokens.tokens.rank() != 2 || tokens.tokens.dim(0) != tokens.n() ||
      tokens.tokens.dim(1) != tokens.token_dim()) {
    throw ShapeError("unpatchify: token matrix " + shape_str(tokens.tokens.shape()) +
                     " does not match grid metadata");
  }
  std::vector<S> img(static_cast<size_t>(c) * h * w);
  const S* buf = tokens.tokens.data();
  for (int gy = 0; gy < tokens.grid_h; ++gy)
    for (int gx = 0; gx < tokens.grid_w; ++gx) {
      const S* row = buf + static_cast<size_t>(gy * tokens.grid_w + gx) * tokens.token_dim();
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch)
            img[(static_cast<size_t>(ch) * h + gy * p + py) * w + gx * p + px] =
                row[(py * p + px) * c + ch];
    }
  return Tensor<S>::from_data({c, h, w}, std::move(img));
}

// Regression targets: each patch row standardized to zero mean / unit
// variance (biased variance, eps guard). Never fed back as model input.
template <typename S>
Tensor<S> normalize_targets(const PatchTokens<S>& tokens, S eps = S(1e-6)) {
  if (!(eps > S(0))) throw ValueError("normalize_targets: eps must be > 0");
  const int n = tokens.n(), d = tokens.token_dim();
  std::vector<S> out(static_cast<size_t>(n) * d);
  ConstMatMap<S> tm(tokens.tokens.data(), n, d);
  MatMap<S> om(out.data(), n, d);
  for (int i = 0; i < n; ++i) {
    const S* row = tokens.tokens.data() + static_cast<int64_t>(i) * d;
    S mu = S(0);
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<S>(d);
    om.row(i) = (tm.row(i).array() - mu) / std::sqrt(var + eps);
  }
  return Tensor<S>::from_data({n, d}, std::move(out));
}

// Fixed 2D sine-cosine position table over an (gh x gw) grid, row-major
// token order. First half of the channels encodes the row coordinate, the
// second half the column, each as [sin(w_i p)..., cos(w_i p)...] over the
// geometric frequency ladder w_i = 10000^(-i / (dim/4)).
template <typename S>
Tensor<S> sincos_posembed_2d(int grid_h, int grid_w, int dim) {
  if (dim % 4 != 0) {
    throw ShapeError("sincos_posembed_2d: dim=" + std::to_string(dim) + " not divisible by 4");
  }
  const int n = grid_h * grid_w;
  const int quarter = dim / 4;
  std::vector<double> freqs(static_cast<size_t>(quarter));
  for (int i = 0; i < quarter; ++i)
    freqs[static_cast<size_t>(i)] = std::pow(10000.0, -static_cast<double>(i) / quarter);
  std::vector<S> out(static_cast<size_t>(n) * dim);
  for (int r = 0; r < grid_h; ++r)
    for (int c = 0; c < grid_w; ++c) {
      S* row = out.data() + static_cast<size_t>(r * grid_w + c) * dim;
      const double coords[2] = {static_cast<double>(r), static_cast<double>(c)};
      for (int axis = 0; axis < 2; ++axis) {
        S* block = row + axis * (dim / 2);
        for (int i = 0; i < quarter; ++i) {
          const double arg = coords[axis] * freqs[static_cast<size_t>(i)];
          block[i] = static_cast<S>(std::sin(arg));
          block[quarter + i] = static_cast<S>(std::cos(arg));
        }
      }
    }
  return Tensor<S>::from_data({n, dim}, std::move(out));
}

}  // namespace stp
