#include "rainbow/align.hpp"

#include "rainbow/config.hpp"
#include "rainbow/errors.hpp"
#include "rainbow/matrix_io.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <filesystem>

namespace rainbow {

namespace {

void check_paired(const ActivationSet& ref, const ActivationSet& hat) {
    if (ref.values.rows() != hat.values.rows())
        throw ShapeError("align: sample counts differ (" + std::to_string(ref.values.rows()) +
                         " vs " + std::to_string(hat.values.rows()) + ")");
    if (ref.values.rows() < 1) throw ShapeError("align: empty activation sets");
}

} // namespace

Matrix cross_covariance(const ActivationSet& ref, const ActivationSet& hat) {
    check_paired(ref, hat);
    const double n = static_cast<double>(ref.values.rows());
    return ref.values.transpose() * hat.values / n;
}

AlignmentResult procrustes_align(const ActivationSet& ref, const ActivationSet& hat) {
    check_paired(ref, hat);
    if (!ref.values.allFinite() || !hat.values.allFinite())
        throw DataError("align: non-finite activations");

    const Eigen::Index d_ref = ref.values.cols();
    const Eigen::Index d_hat = hat.values.cols();
    const double n = static_cast<double>(ref.values.rows());

    // When d_hat > d_ref the reference is padded with zero columns so the
    // rotation still embeds the hat space isometrically.
    const Eigen::Index d_eff = std::max(d_ref, d_hat);
    Matrix cross = Matrix::Zero(d_eff, d_hat);
    cross.topRows(d_ref) = ref.values.transpose() * hat.values / n;

    Eigen::BDCSVD<Matrix> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
    if (svd.info() != Eigen::Success) throw NumericError("align: SVD failed to converge");
    Matrix u = svd.matrixU();
    Matrix v = svd.matrixV();

    // Deterministic sign convention: the largest-magnitude entry of each used
    // left singular vector is made positive (first index wins ties).
    for (Eigen::Index k = 0; k < d_hat; ++k) {
        Eigen::Index arg = 0;
        u.col(k).cwiseAbs().maxCoeff(&arg);
        if (u(arg, k) < 0) {
            u.col(k) = -u.col(k);
            v.col(k) = -v.col(k);
        }
    }

    AlignmentResult result;
    result.rotation = u.leftCols(d_hat) * v.transpose();
    result.singular_values = svd.singularValues();
    result.trace_ref = ref.values.squaredNorm() / n;
    result.trace_hat = hat.values.squaredNorm() / n;
    result.nuclear = result.singular_values.sum();
    result.error = std::max(0.0, result.trace_hat + result.trace_ref - 2.0 * result.nuclear);

    Matrix aligned = hat.values * result.rotation.transpose();
    aligned.leftCols(d_ref) -= ref.values;
    result.error_direct = aligned.squaredNorm() / n;

    // Closed form and direct evaluation must agree; a violation indicates a
    // numerical breakdown rather than a modeling issue.
    const double scale = result.trace_hat + result.trace_ref;
    if (std::abs(result.error_direct - result.error) > 1e-8 * std::max(scale, 1e-300))
        throw NumericError("align: closed-form error disagrees with direct evaluation");
    return result;
}

double alignment_error_on_split(const AlignmentResult& result, const ActivationSet& ref_test,
                                const ActivationSet& hat_test) {
    check_paired(ref_test, hat_test);
    if (hat_test.values.cols() != result.rotation.cols())
        throw ShapeError("align: hat dimension does not match rotation");
    if (ref_test.values.cols() > result.rotation.rows())
        throw ShapeError("align: reference dimension exceeds rotation");
    const double ref_energy = ref_test.values.squaredNorm();
    if (ref_energy <= 0.0) throw NumericError("align: zero reference energy on split");
    Matrix aligned = hat_test.values * result.rotation.transpose();
    aligned.leftCols(ref_test.values.cols()) -= ref_test.values;
    return aligned.squaredNorm() / ref_energy;
}

double similarity_score(const ActivationSet& ref, const ActivationSet& hat) {
    check_paired(ref, hat);
    const double n = static_cast<double>(ref.values.rows());
    const double energy_ref = ref.values.squaredNorm() / n;
    const double energy_hat = hat.values.squaredNorm() / n;
    if (energy_ref <= 0.0 || energy_hat <= 0.0)
        throw NumericError("align: similarity undefined for zero-variance activations");
    Matrix cross = ref.values.transpose() * hat.values / n;
    Eigen::BDCSVD<Matrix> svd(cross);
    return svd.singularValues().sum() / std::sqrt(energy_ref * energy_hat);
}

void save_alignment(const std::string& dir, const AlignmentResult& result,
                    const std::string& ref_source, const std::string& hat_source,
                    int layer_index, Split split, Eigen::Index n_samples) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_matrix(dir + "/rotation.bin", result.rotation);
    save_vector(dir + "/singular_values.bin", result.singular_values);
    KeyValueConfig m;
    m.set("format", "rainbow-alignment-v1");
    m.set("ref_source", ref_source);
    m.set("hat_source", hat_source);
    m.set_int("layer", layer_index);
    m.set("split", split_name(split));
    m.set_int("n_samples", n_samples);
    m.set_int("rows", result.rotation.rows());
    m.set_int("cols", result.rotation.cols());
    m.set_double("error", result.error);
    m.set_double("error_direct", result.error_direct);
    m.set_double("trace_hat", result.trace_hat);
    m.set_double("trace_ref", result.trace_ref);
    m.set_double("nuclear", result.nuclear);
    m.save(dir + "/manifest.txt");
}

AlignmentResult load_alignment(const std::string& dir) {
    KeyValueConfig m = KeyValueConfig::parse_file(dir + "/manifest.txt");
    if (m.get("format") != "rainbow-alignment-v1")
        throw FormatError("alignment: unknown format in " + dir);
    AlignmentResult r;
    const Eigen::Index rows = m.get_int("rows");
    const Eigen::Index cols = m.get_int("cols");
    r.rotation = load_matrix(dir + "/rotation.bin", rows, cols);
    r.singular_values = load_vector(dir + "/singular_values.bin", std::min(rows, cols));
    r.error = m.get_double("error");
    r.error_direct = m.get_double("error_direct");
    r.trace_hat = m.get_double("trace_hat");
    r.trace_ref = m.get_double("trace_ref");
    r.nuclear = m.get_double("nuclear");
    return r;
}

} // namespace rainbow
