#include "rainbow/equivariance.hpp"

#include "rainbow/errors.hpp"
#include "rainbow/kernel.hpp"
#include "rainbow/report.hpp"
#include "rainbow/rng.hpp"

#include <cmath>
#include <deque>

namespace rainbow {

void FiniteGroup::validate() const {
    if (elements.empty()) throw ParamError("group: no elements");
    const Matrix id = Matrix::Identity(dim, dim);
    bool has_identity = false;
    for (const Matrix& g : elements) {
        if (g.rows() != dim || g.cols() != dim) throw ShapeError("group: element dim mismatch");
        if ((g.transpose() * g - id).cwiseAbs().maxCoeff() > 1e-10)
            throw NumericError("group: element not orthogonal within 1e-10");
        if ((g - id).cwiseAbs().maxCoeff() <= 1e-8) has_identity = true;
    }
    if (!has_identity) throw NumericError("group: identity element missing");
}

namespace {

bool matrix_close(const Matrix& a, const Matrix& b, double tol) {
    return (a - b).cwiseAbs().maxCoeff() <= tol;
}

} // namespace

FiniteGroup close_group(const std::vector<Matrix>& generators, int max_order) {
    if (generators.empty()) throw ParamError("close_group: no generators");
    const Eigen::Index d = generators.front().rows();
    const Matrix id = Matrix::Identity(d, d);
    for (const Matrix& g : generators) {
        if (g.rows() != d || g.cols() != d) throw ShapeError("close_group: generator dim mismatch");
        if ((g.transpose() * g - id).cwiseAbs().maxCoeff() > 1e-8)
            throw ParamError("close_group: generator not orthogonal");
    }

    FiniteGroup group;
    group.dim = static_cast<int>(d);
    group.elements.push_back(id);
    std::deque<Matrix> frontier{id};
    while (!frontier.empty()) {
        Matrix current = std::move(frontier.front());
        frontier.pop_front();
        for (const Matrix& g : generators) {
            Matrix candidate = current * g;
            bool known = false;
            for (const Matrix& e : group.elements)
                if (matrix_close(candidate, e, 1e-8)) {
                    known = true;
                    break;
                }
            if (known) continue;
            if (static_cast<int>(group.elements.size()) >= max_order)
                throw ParamError("close_group: order exceeds cap " + std::to_string(max_order));
            group.elements.push_back(candidate);
            frontier.push_back(std::move(candidate));
        }
    }
    return group;
}

Matrix sign_flip_element(int dim) { return -Matrix::Identity(dim, dim); }

Matrix cyclic_shift_element(int dim) {
    Matrix g = Matrix::Zero(dim, dim);
    for (int i = 0; i < dim; ++i) g((i + 1) % dim, i) = 1.0;
    return g;
}

Matrix planar_rotation_element(int dim, int axis_a, int axis_b, double angle) {
    if (axis_a < 0 || axis_b < 0 || axis_a >= dim || axis_b >= dim || axis_a == axis_b)
        throw ParamError("planar_rotation: bad axes");
    Matrix g = Matrix::Identity(dim, dim);
    g(axis_a, axis_a) = std::cos(angle);
    g(axis_b, axis_b) = std::cos(angle);
    g(axis_a, axis_b) = -std::sin(angle);
    g(axis_b, axis_a) = std::sin(angle);
    return g;
}

Matrix reflection_2d(double line_angle) {
    Matrix g(2, 2);
    const double c = std::cos(2.0 * line_angle);
    const double s = std::sin(2.0 * line_angle);
    g << c, s, s, -c;
    return g;
}

Matrix symmetrize_covariance(const Matrix& covariance, const FiniteGroup& group) {
    if (covariance.rows() != group.dim || covariance.cols() != group.dim)
        throw ShapeError("symmetrize_covariance: dim mismatch");
    Matrix acc = Matrix::Zero(group.dim, group.dim);
    for (const Matrix& g : group.elements) acc += g.transpose() * covariance * g;
    acc /= static_cast<double>(group.order());
    return ((acc + acc.transpose()) / 2.0).eval();
}

double commutation_defect(const Matrix& covariance, const FiniteGroup& group) {
    const double scale = std::max(covariance.norm(), 1e-300);
    double worst = 0.0;
    for (const Matrix& g : group.elements)
        worst = std::max(worst, (g * covariance - covariance * g).norm() / scale);
    return worst;
}

namespace {

InvarianceReport invariance_from_kernels(
    const std::vector<Matrix>& base,          // per layer: n_pairs x 2 columns? see below
    const std::vector<std::vector<Matrix>>& transformed,
    const std::vector<double>& scales) {
    // base[l] and transformed[l][e] are n_pairs-vectors of kernel values
    // packed as one-column matrices.
    InvarianceReport report;
    for (std::size_t l = 0; l < base.size(); ++l) {
        for (std::size_t e = 0; e < transformed[l].size(); ++e) {
            const double dev =
                (transformed[l][e] - base[l]).cwiseAbs().maxCoeff() / scales[l];
            report.table.push_back({static_cast<int>(l + 1), static_cast<int>(e), dev});
            report.max_relative_deviation = std::max(report.max_relative_deviation, dev);
        }
    }
    return report;
}

} // namespace

InvarianceReport test_kernel_invariance(const Network& net, const FiniteGroup& group,
                                        int n_samples, std::uint64_t seed) {
    net.validate();
    const int d0 = net.specs.front().in_dim;
    if (group.dim != d0) throw ShapeError("kernel invariance: group dim does not match input");
    if (n_samples < 1) throw ParamError("kernel invariance: n_samples must be >= 1");

    Rng rng(seed, "equivariance", "pairs");
    Matrix x(n_samples, d0), y(n_samples, d0);
    for (int i = 0; i < n_samples; ++i) {
        x.row(i) = rng.gaussian_vector(d0).transpose();
        y.row(i) = rng.gaussian_vector(d0).transpose();
    }

    ForwardOptions opts;
    opts.normalized = true;
    auto kernel_pairs = [&](const Matrix& xs, const Matrix& ys) {
        auto ax = forward(net, xs, opts);
        auto ay = forward(net, ys, opts);
        std::vector<Matrix> out;
        for (int l = 0; l < net.depth(); ++l) {
            Matrix vals(n_samples, 1);
            for (int i = 0; i < n_samples; ++i)
                vals(i, 0) = ax[static_cast<std::size_t>(l)].values.row(i).dot(
                    ay[static_cast<std::size_t>(l)].values.row(i));
            out.push_back(std::move(vals));
        }
        return out;
    };
    auto diag_scale = [&](const Matrix& xs) {
        auto ax = forward(net, xs, opts);
        std::vector<double> scales;
        for (int l = 0; l < net.depth(); ++l)
            scales.push_back(std::max(
                ax[static_cast<std::size_t>(l)].values.array().square().rowwise().sum().mean(),
                1e-300));
        return scales;
    };

    std::vector<Matrix> base = kernel_pairs(x, y);
    std::vector<double> scales = diag_scale(x);
    std::vector<std::vector<Matrix>> transformed(static_cast<std::size_t>(net.depth()));
    for (const Matrix& g : group.elements) {
        auto vals = kernel_pairs(x * g.transpose(), y * g.transpose());
        for (int l = 0; l < net.depth(); ++l)
            transformed[static_cast<std::size_t>(l)].push_back(vals[static_cast<std::size_t>(l)]);
    }
    return invariance_from_kernels(base, transformed, scales);
}

InvarianceReport test_kernel_invariance_analytic(const Matrix& c1, int depth,
                                                 const FiniteGroup& group, int n_samples,
                                                 std::uint64_t seed) {
    if (group.dim != c1.rows()) throw ShapeError("kernel invariance: group dim mismatch");
    if (n_samples < 1) throw ParamError("kernel invariance: n_samples must be >= 1");
    const int d0 = static_cast<int>(c1.rows());

    Rng rng(seed, "equivariance", "pairs-analytic");
    Matrix x(n_samples, d0), y(n_samples, d0);
    for (int i = 0; i < n_samples; ++i) {
        x.row(i) = rng.gaussian_vector(d0).transpose();
        y.row(i) = rng.gaussian_vector(d0).transpose();
    }

    // Cascade the arc-cosine kernel per pair: layer 1 colored by c1, deeper
    // layers with identity covariance.
    auto kernels = [&](const Matrix& xs, const Matrix& ys) {
        std::vector<Matrix> per_layer(static_cast<std::size_t>(depth));
        for (auto& m : per_layer) m.resize(n_samples, 1);
        std::vector<Matrix> diag_x(static_cast<std::size_t>(depth));
        for (int i = 0; i < n_samples; ++i) {
            Vector xi = xs.row(i).transpose();
            Vector yi = ys.row(i).transpose();
            double q_xx = xi.dot(c1 * xi);
            double q_xy = xi.dot(c1 * yi);
            double q_yy = yi.dot(c1 * yi);
            for (int l = 0; l < depth; ++l) {
                const double k_xx = arccos_from_gram(q_xx, q_xx, q_xx);
                const double k_xy = arccos_from_gram(q_xx, q_xy, q_yy);
                const double k_yy = arccos_from_gram(q_yy, q_yy, q_yy);
                per_layer[static_cast<std::size_t>(l)](i, 0) = k_xy;
                q_xx = k_xx;
                q_xy = k_xy;
                q_yy = k_yy;
            }
        }
        return per_layer;
    };

    std::vector<Matrix> base = kernels(x, y);
    std::vector<double> scales;
    {
        auto self = kernels(x, x);
        for (int l = 0; l < depth; ++l)
            scales.push_back(std::max(self[static_cast<std::size_t>(l)].cwiseAbs().mean(), 1e-300));
    }
    std::vector<std::vector<Matrix>> transformed(static_cast<std::size_t>(depth));
    for (const Matrix& g : group.elements) {
        auto vals = kernels(x * g.transpose(), y * g.transpose());
        for (int l = 0; l < depth; ++l)
            transformed[static_cast<std::size_t>(l)].push_back(vals[static_cast<std::size_t>(l)]);
    }
    return invariance_from_kernels(base, transformed, scales);
}

void save_invariance_csv(const std::string& path, const InvarianceReport& report) {
    CsvTable table({"layer", "group_element_index", "deviation"});
    for (const auto& row : report.table)
        table.add_row({std::to_string(row.layer), std::to_string(row.element),
                       format_double(row.deviation)});
    table.save(path);
}

} // namespace rainbow
