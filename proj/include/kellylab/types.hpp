#pragma once

#include <Eigen/Dense>

namespace kellylab {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

} // namespace kellylab
