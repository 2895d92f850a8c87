#pragma once

#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "hpnet/tensor.hpp"

namespace hpnet {

/// Row/column position inside an H×W grid.
struct GridPos {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
};

inline constexpr std::size_t kNoIndex = std::numeric_limits<std::size_t>::max();

// input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,H',W'].
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
              std::size_t padding = 0);

// x [N,C,...] + bias[C] broadcast over trailing axes.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Non-overlapping max pooling with a square window; trailing rows/cols that
// do not fill a window are dropped.
Tensor max_pool2d(const Tensor& x, std::size_t window);

struct SpatialMax {
  Tensor values;                 // [N,M]
  std::vector<GridPos> argmax;   // N*M entries, row-major over (n,m)
};

/// Max over the spatial axes of [N,M,H,W]. Ties resolve to the first
/// element in row-major scan order; the gradient routes only there.
SpatialMax spatial_max(const Tensor& maps);

/// ||z[n,:,h,w] - p[j,:]||^2 for z [N,D,H,W], prototypes [m,D] -> [N,m,H,W].
Tensor squared_distances(const Tensor& z, const Tensor& prototypes);

/// Elementwise log(1 + 1/(d + eps)).
Tensor log_similarity(const Tensor& squared_distance, double eps);

/// x [N,K] times weight[C,K] transposed -> [N,C].
Tensor linear(const Tensor& x, const Tensor& weight);

/// Row-wise log-softmax of [N,C].
Tensor log_softmax(const Tensor& x);

/// out[n] = x[n, index[n]]; kNoIndex yields 0 and no gradient.
Tensor pick(const Tensor& x, const std::vector<std::size_t>& index);

/// out[n] = min over j in allowed[n], (h,w) of d[n,j,h,w] for d [N,m,H,W].
/// Rows with an empty allowed list yield 0 and no gradient.
Tensor min_over_allowed(const Tensor& d, const std::vector<std::vector<std::size_t>>& allowed);

/// out[n,l] = sum over (part, column) in paths[l] of parts[part][n, column].
Tensor path_sum(const std::vector<Tensor>& parts,
                const std::vector<std::vector<std::pair<std::size_t, std::size_t>>>& paths);

/// Same values under a new shape with equal element count.
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add(const Tensor& a, const Tensor& b);

/// Sum of w^2 where own_mask is set plus |w| elsewhere. Subgradient of |w| at 0 is 0.
Tensor mixed_l2_l1(const Tensor& w, const std::vector<bool>& own_mask);

}  // namespace hpnet
