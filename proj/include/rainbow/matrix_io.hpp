#pragma once

#include "rainbow/types.hpp"

#include <cstdint>
#include <string>

namespace rainbow {

// Flat binary matrix format: row-major 8-byte little-endian reals, no
// header. Dimensions travel in the accompanying structured-text manifest.

void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path, Eigen::Index rows, Eigen::Index cols);

void save_vector(const std::string& path, const Vector& v);
Vector load_vector(const std::string& path, Eigen::Index n);

/// FNV-1a over the raw bytes of a matrix, 16 hex digits. Used for
/// provenance records.
std::string matrix_hash(const Matrix& m);

} // namespace rainbow
