#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace rainbow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using IntVector = Eigen::VectorXi;

enum class Split { Train, Test };

inline std::string split_name(Split s) { return s == Split::Train ? "train" : "test"; }

inline constexpr const char* kLibraryVersion = "0.1.0";

} // namespace rainbow
