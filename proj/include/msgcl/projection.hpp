#pragma once

// 2-D PCA projection of the item embedding table, with training frequencies
// attached, for plotting the embedding geometry.

#include "msgcl/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace msgcl {

struct ProjectionRow {
  ItemIndex item{0};
  std::int64_t frequency{0};
  int bucket{0};  // floor(log2(frequency + 1))
  double x{0}, y{0};
};

struct Projection {
  std::vector<ProjectionRow> rows;
  Vector<double> explained_variance_ratio;  // all d components, descending
};

/// Rows 1..N of `item_embedding` are centered and projected on the top two
/// principal directions. Each direction is signed so its largest-magnitude
/// component is positive. Throws NumericError when the covariance has rank < 2.
Projection emit_embedding_projection(const Matrix<double>& item_embedding, const std::vector<std::int64_t>& frequencies);

/// Columns: item, frequency, bucket, x, y.
std::string projection_tsv(const Projection& p);

}  // namespace msgcl
