#include "msgcl/projection.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>

namespace msgcl {

Projection emit_embedding_projection(const Matrix<double>& item_embedding, const std::vector<std::int64_t>& frequencies) {
  const Eigen::Index n = item_embedding.rows() - 1;
  require(n >= 2, "projection: need at least two items");
  require(static_cast<Eigen::Index>(frequencies.size()) == n + 1, "projection: frequency table size mismatch");
  const Matrix<double> x = item_embedding.bottomRows(n);
  const Matrix<double> centered = x.rowwise() - x.colwise().mean();
  const Matrix<double> cov = centered.transpose() * centered / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Matrix<double>> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("projection: eigendecomposition failed");
  const Vector<double> values = solver.eigenvalues().reverse().cwiseMax(0.0);
  const double total = values.sum();
  if (values.size() < 2 || !(total > 0.0) || values(1) <= 1e-12 * values(0))
    throw NumericError("projection: embedding covariance has rank < 2");

  const Eigen::Index d = cov.rows();
  Matrix<double> dirs(d, 2);
  for (int k = 0; k < 2; ++k) {
    Vector<double> v = solver.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    dirs.col(k) = v;
  }
  const Matrix<double> xy = centered * dirs;

  Projection p;
  p.explained_variance_ratio = values / total;
  for (Eigen::Index i = 0; i < n; ++i) {
    ProjectionRow r;
    r.item = static_cast<ItemIndex>(i + 1);
    r.frequency = frequencies[static_cast<std::size_t>(i + 1)];
    r.bucket = static_cast<int>(std::floor(std::log2(static_cast<double>(r.frequency) + 1.0)));
    r.x = xy(i, 0);
    r.y = xy(i, 1);
    p.rows.push_back(r);
  }
  return p;
}

std::string projection_tsv(const Projection& p) {
  std::ostringstream out;
  out.precision(17);
  out << "item\tfrequency\tbucket\tx\ty\n";
  for (const auto& r : p.rows) out << r.item << '\t' << r.frequency << '\t' << r.bucket << '\t' << r.x << '\t' << r.y << '\n';
  return out.str();
}

}  // namespace msgcl
