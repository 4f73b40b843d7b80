#pragma once

#include <Eigen/Dense>

#include <map>
#include <string>

namespace osrm {

// Row-major so that data() matches the on-disk layout and the flat index
// used by the merge kernels.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// layer name -> matrix; std::map keeps iteration order deterministic.
using LayerMap = std::map<std::string, Matrix>;

}  // namespace osrm
