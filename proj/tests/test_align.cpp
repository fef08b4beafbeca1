#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rainbow/align.hpp"
#include "rainbow/errors.hpp"
#include "rainbow/rng.hpp"

#include <cmath>
#include <filesystem>

using namespace rainbow;

namespace {

ActivationSet make_acts(const Matrix& values) { return ActivationSet{values, 1, Split::Train, true}; }

// direct mean-square error of an explicit map, computed with scalar loops
double direct_error(const Matrix& rotation, const Matrix& ref, const Matrix& hat) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < ref.rows(); ++i) {
        for (Eigen::Index r = 0; r < rotation.rows(); ++r) {
            double aligned = 0.0;
            for (Eigen::Index c = 0; c < rotation.cols(); ++c) aligned += rotation(r, c) * hat(i, c);
            const double target = r < ref.cols() ? ref(i, r) : 0.0;
            acc += (aligned - target) * (aligned - target);
        }
    }
    return acc / static_cast<double>(ref.rows());
}

} // namespace

TEST_CASE("cross covariance: self, permutation, and brute force") {
    Rng rng(1, "test", "cross");
    Matrix phi = rng.gaussian_matrix(20, 4);
    ActivationSet ref = make_acts(phi);

    Matrix self = cross_covariance(ref, ref);
    CHECK((self - self.transpose()).cwiseAbs().maxCoeff() <= 1e-14);
    Eigen::SelfAdjointEigenSolver<Matrix> es(self);
    CHECK(es.eigenvalues().minCoeff() >= -1e-12);

    // column permutation: cross = selfcov * P^T
    Matrix p = Matrix::Zero(4, 4);
    p(0, 2) = p(1, 0) = p(2, 3) = p(3, 1) = 1.0;
    ActivationSet permuted = make_acts(phi * p.transpose());
    Matrix cross = cross_covariance(ref, permuted);
    CHECK((cross - self * p.transpose()).cwiseAbs().maxCoeff() <= 1e-12);

    // 3x2 brute-force double loop
    Matrix a = rng.gaussian_matrix(3, 2);
    Matrix b = rng.gaussian_matrix(3, 2);
    Matrix m = cross_covariance(make_acts(a), make_acts(b));
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            double acc = 0.0;
            for (int i = 0; i < 3; ++i) acc += a(i, r) * b(i, c);
            CHECK(m(r, c) == doctest::Approx(acc / 3.0).epsilon(1e-14));
        }

    CHECK_THROWS_AS(cross_covariance(ref, make_acts(rng.gaussian_matrix(21, 4))), ShapeError);
}

TEST_CASE("procrustes: identical sets align exactly") {
    Rng rng(2, "test", "self");
    Matrix phi = rng.gaussian_matrix(30, 5);
    AlignmentResult r = procrustes_align(make_acts(phi), make_acts(phi));
    CHECK(r.error <= 1e-10);
    CHECK(r.error_direct <= 1e-10);
    // the rotation acts as the identity on the span of the activations
    CHECK((phi * r.rotation.transpose() - phi).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("procrustes: recovers an explicit rotation") {
    Rng rng(3, "test", "rot");
    Matrix phi = rng.gaussian_matrix(50, 6);
    Matrix q = random_orthogonal(6, rng);
    AlignmentResult r = procrustes_align(make_acts(phi), make_acts(phi * q));
    CHECK(r.error <= 1e-10);
    // rows transform as hat_i = q^T ref_i, so the aligner undoing that is q
    CHECK((r.rotation - q).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((r.rotation.transpose() * r.rotation - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff() <=
          1e-8);
    // singular values non-increasing
    for (Eigen::Index i = 1; i < r.singular_values.size(); ++i)
        CHECK(r.singular_values(i) <= r.singular_values(i - 1) + 1e-15);
}

TEST_CASE("procrustes: 2-unit closed form matches an exhaustive O(2) grid search") {
    Rng rng(4, "test", "grid");
    Matrix ref = rng.gaussian_matrix(40, 2);
    Matrix hat = rng.gaussian_matrix(40, 2);
    AlignmentResult result = procrustes_align(make_acts(ref), make_acts(hat));

    double best = 1e300;
    const int grid = 100000;
    for (int k = 0; k < grid; ++k) {
        const double t = 2.0 * M_PI * k / grid;
        const double c = std::cos(t), s = std::sin(t);
        Matrix rot(2, 2), refl(2, 2);
        rot << c, -s, s, c;
        refl << c, s, s, -c;
        for (const Matrix& a : {rot, refl}) {
            const double err = (hat * a.transpose() - ref).squaredNorm() / 40.0;
            best = std::min(best, err);
        }
    }
    CHECK(std::abs(result.error - best) <= 1e-6 * std::max(1.0, best));
    CHECK(result.error <= best + 1e-12);  // closed form is optimal
}

TEST_CASE("procrustes: closed form equals direct evaluation (error terms identity)") {
    Rng rng(5, "test", "terms");
    for (int trial = 0; trial < 20; ++trial) {
        Matrix ref = rng.gaussian_matrix(25, 7);
        Matrix hat = rng.gaussian_matrix(25, 7);
        AlignmentResult r = procrustes_align(make_acts(ref), make_acts(hat));
        const double scale = r.trace_hat + r.trace_ref;
        CHECK(std::abs(r.error - (r.trace_hat + r.trace_ref - 2.0 * r.nuclear)) <= 1e-12 * scale);
        CHECK(std::abs(r.error_direct - r.error) <= 1e-8 * scale);
        CHECK(std::abs(direct_error(r.rotation, ref, hat) - r.error) <= 1e-8 * scale);
        CHECK(r.error >= 0.0);
        CHECK(r.nuclear >= 0.0);
    }
}

TEST_CASE("procrustes: rotation invariance of the error") {
    Rng rng(6, "test", "rotinv");
    Matrix ref = rng.gaussian_matrix(30, 5);
    Matrix hat = rng.gaussian_matrix(30, 5);
    const double base = procrustes_align(make_acts(ref), make_acts(hat)).error;
    for (int k = 0; k < 5; ++k) {
        Matrix q = random_orthogonal(5, rng);
        const double rotated = procrustes_align(make_acts(ref), make_acts(hat * q)).error;
        CHECK(std::abs(base - rotated) <= 1e-8 * std::max(1.0, base));
    }
}

TEST_CASE("procrustes: optimal among random orthonormal competitors") {
    Rng rng(7, "test", "opt");
    Matrix ref = rng.gaussian_matrix(64, 12);
    Matrix hat = rng.gaussian_matrix(64, 12);
    AlignmentResult r = procrustes_align(make_acts(ref), make_acts(hat));
    for (int k = 0; k < 200; ++k) {
        Matrix a = random_orthonormal_columns(12, 12, rng);
        CHECK(r.error <= (hat * a.transpose() - ref).squaredNorm() / 64.0 + 1e-12);
    }
}

TEST_CASE("procrustes: symmetric error for equal dims") {
    Rng rng(8, "test", "sym");
    Matrix a = rng.gaussian_matrix(40, 6);
    Matrix b = rng.gaussian_matrix(40, 6);
    const double ab = procrustes_align(make_acts(a), make_acts(b)).error;
    const double ba = procrustes_align(make_acts(b), make_acts(a)).error;
    CHECK(std::abs(ab - ba) <= 1e-8 * std::max(1.0, ab));
}

TEST_CASE("procrustes: wider hat pads the reference with zero columns") {
    Rng rng(9, "test", "pad");
    Matrix ref = rng.gaussian_matrix(30, 3);
    Matrix hat = rng.gaussian_matrix(30, 5);
    AlignmentResult r = procrustes_align(make_acts(ref), make_acts(hat));
    CHECK(r.rotation.rows() == 5);
    CHECK(r.rotation.cols() == 5);
    CHECK((r.rotation.transpose() * r.rotation - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() <=
          1e-8);

    // identical to manually padding the reference
    Matrix ref_padded = Matrix::Zero(30, 5);
    ref_padded.leftCols(3) = ref;
    AlignmentResult manual = procrustes_align(make_acts(ref_padded), make_acts(hat));
    CHECK(std::abs(r.error - manual.error) <= 1e-10);
}

TEST_CASE("alignment error on a held-out split") {
    Rng rng(10, "test", "split");
    Matrix ref_train = rng.gaussian_matrix(50, 4);
    Matrix ref_test = rng.gaussian_matrix(20, 4);

    // identity case
    AlignmentResult self = procrustes_align(make_acts(ref_train), make_acts(ref_train));
    CHECK(alignment_error_on_split(self, make_acts(ref_test), make_acts(ref_test)) <= 1e-10);

    // constructed rotation on both splits
    Matrix q = random_orthogonal(4, rng);
    AlignmentResult rot = procrustes_align(make_acts(ref_train), make_acts(ref_train * q));
    CHECK(alignment_error_on_split(rot, make_acts(ref_test), make_acts(ref_test * q)) <= 1e-10);

    // unrelated unit-variance activations: matches the direct formula
    Matrix hat_train = rng.gaussian_matrix(50, 4);
    Matrix hat_test = rng.gaussian_matrix(20, 4);
    AlignmentResult r = procrustes_align(make_acts(ref_train), make_acts(hat_train));
    const double rel = alignment_error_on_split(r, make_acts(ref_test), make_acts(hat_test));
    const double oracle =
        direct_error(r.rotation, ref_test, hat_test) * 20.0 / ref_test.squaredNorm();
    CHECK(rel == doctest::Approx(oracle).epsilon(1e-12));

    // on the train split the relative error reduces to 2(1 - nuclear/energy)
    const double train_rel =
        alignment_error_on_split(r, make_acts(ref_train), make_acts(hat_train));
    const double identity = (r.trace_hat + r.trace_ref - 2.0 * r.nuclear) / r.trace_ref;
    CHECK(train_rel == doctest::Approx(identity).epsilon(1e-8));
}

TEST_CASE("similarity score: saturation, rotation invariance, independence") {
    Rng rng(11, "test", "simm");
    Matrix phi = rng.gaussian_matrix(100, 6);
    CHECK(similarity_score(make_acts(phi), make_acts(phi)) == doctest::Approx(1.0).epsilon(1e-10));
    Matrix q = random_orthogonal(6, rng);
    CHECK(similarity_score(make_acts(phi), make_acts(phi * q)) ==
          doctest::Approx(1.0).epsilon(1e-10));

    Matrix big_a = rng.gaussian_matrix(10000, 6);
    Matrix big_b = rng.gaussian_matrix(10000, 6);
    CHECK(similarity_score(make_acts(big_a), make_acts(big_b)) <= 0.1);

    CHECK_THROWS_AS(similarity_score(make_acts(Matrix::Zero(10, 3)), make_acts(phi.topRows(10))),
                    NumericError);
}

TEST_CASE("alignment serialization round trip") {
    Rng rng(12, "test", "ser");
    Matrix ref = rng.gaussian_matrix(30, 4);
    Matrix hat = rng.gaussian_matrix(30, 4);
    AlignmentResult r = procrustes_align(make_acts(ref), make_acts(hat));
    const std::string dir = "test_align_roundtrip";
    save_alignment(dir, r, "netA", "netB", 2, Split::Train, 30);
    AlignmentResult loaded = load_alignment(dir);
    CHECK((loaded.rotation - r.rotation).cwiseAbs().maxCoeff() == 0.0);
    CHECK(loaded.error == r.error);
    CHECK(loaded.nuclear == r.nuclear);
    std::filesystem::remove_all(dir);
}
