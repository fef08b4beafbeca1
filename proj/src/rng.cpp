#include "rainbow/rng.hpp"

#include <Eigen/QR>

namespace rainbow {

Matrix random_orthogonal(Eigen::Index n, Rng& rng) {
    return random_orthonormal_columns(n, n, rng);
}

Matrix random_orthonormal_columns(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Matrix g = rng.gaussian_matrix(rows, cols);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
    Matrix r = qr.matrixQR().topLeftCorner(cols, cols).triangularView<Eigen::Upper>();
    // Fix signs so the factorization is unique (R diagonal positive); this
    // makes Q Haar-distributed for the square case.
    for (Eigen::Index j = 0; j < cols; ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    return q;
}

} // namespace rainbow
