#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "scorelab/density.hpp"

namespace scorelab::alignment {

/// Norm below which a direction is treated as undefined for cosine purposes.
inline constexpr double kDegenerateNorm = 1e-12;

/// Thrown when a cosine is requested between vectors without a usable
/// direction. Callers that can tolerate degeneracy use try_cosine instead.
class UndefinedAlignmentError : public std::domain_error {
public:
    UndefinedAlignmentError() : std::domain_error("cosine undefined: vector norm below 1e-12") {}
};

/// Conditioning term s_delta = s_cond - s_uncond.
inline Eigen::VectorXd guidance_vector(const Eigen::VectorXd& s_cond, const Eigen::VectorXd& s_uncond) {
    if (s_cond.size() != s_uncond.size())
        throw std::invalid_argument("guidance_vector: dimension mismatch");
    return s_cond - s_uncond;
}

/// Cosine similarity, or nullopt when either direction is degenerate.
inline std::optional<double> try_cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
    const double na = a.norm();
    const double nb = b.norm();
    if (na < kDegenerateNorm || nb < kDegenerateNorm) return std::nullopt;
    const double c = a.dot(b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const auto c = try_cosine(a, b);
    if (!c) throw UndefinedAlignmentError();
    return *c;
}

/// One locally-quadratic conditional/unconditional pair: precisions come from
/// sigma_u and sigma_c, v is the displacement from the unconditional mode and
/// delta the displacement between the two modes.
struct AlignmentCase {
    Eigen::MatrixXd sigma_u;
    Eigen::MatrixXd sigma_c;
    Eigen::VectorXd v;
    Eigen::VectorXd delta;

    void validate() const {
        const auto n = v.size();
        if (sigma_u.rows() != n || sigma_u.cols() != n || sigma_c.rows() != n || sigma_c.cols() != n ||
            delta.size() != n)
            throw std::invalid_argument("AlignmentCase: inconsistent dimensions");
        Eigen::LLT<Eigen::MatrixXd> lu(sigma_u), lc(sigma_c);
        if (lu.info() != Eigen::Success || lc.info() != Eigen::Success)
            throw std::invalid_argument("AlignmentCase: matrices must be symmetric positive definite");
    }

    Eigen::VectorXd uncond_score() const {
        return -Eigen::LLT<Eigen::MatrixXd>(sigma_u).solve(v);
    }

    /// Closed-form conditioning term (sigma_u^{-1} - sigma_c^{-1}) v + sigma_c^{-1} delta.
    Eigen::VectorXd guidance() const {
        Eigen::LLT<Eigen::MatrixXd> lu(sigma_u), lc(sigma_c);
        return lu.solve(v) - lc.solve(v) + lc.solve(delta);
    }
};

/// Executable certificate for the alignment lower bound. The comparison
/// splits the guidance into a component along the unconditional score
/// (coefficient alpha, chosen by least squares) plus residuals whose relative
/// sizes eps and tau give r = eps + tau; when r < 1 the observed cosine must
/// be at least (1 - r) / (1 + r).
struct BoundCertificate {
    double alpha = 0.0;
    double eps = 0.0;
    double tau = 0.0;
    double r = 0.0;
    double cosine = std::numeric_limits<double>::quiet_NaN();
    double bound = std::numeric_limits<double>::quiet_NaN();
    bool applicable = false;
};

inline BoundCertificate certify_bound(const AlignmentCase& cs) {
    cs.validate();
    BoundCertificate cert;
    const Eigen::VectorXd s_u = cs.uncond_score();
    const double nu = s_u.norm();
    if (nu < kDegenerateNorm) return cert;  // s_u vanishes: hypothesis cannot hold

    Eigen::LLT<Eigen::MatrixXd> lu(cs.sigma_u), lc(cs.sigma_c);
    const Eigen::VectorXd a_term = lu.solve(cs.v) - lc.solve(cs.v);  // (Su^-1 - Sc^-1) v
    const Eigen::VectorXd d2 = lc.solve(cs.delta);                   // Sc^-1 delta
    const Eigen::VectorXd s_delta = a_term + d2;

    cert.alpha = a_term.dot(s_u) / (nu * nu);
    if (!(cert.alpha > 0.0)) return cert;

    const Eigen::VectorXd delta1 = a_term - cert.alpha * s_u;
    cert.eps = delta1.norm() / (cert.alpha * nu);
    cert.tau = d2.norm() / (cert.alpha * nu);
    cert.r = cert.eps + cert.tau;
    cert.bound = (1.0 - cert.r) / (1.0 + cert.r);
    const auto c = try_cosine(s_u, s_delta);
    if (!c) return cert;
    cert.cosine = *c;
    cert.applicable = cert.r < 1.0;
    return cert;
}

/// One grid point of the alignment field: cosine between the guidance vector
/// and the unconditional score, or a sentinel when the guidance vanishes.
struct FieldSample {
    Eigen::VectorXd point;
    double cosine = std::numeric_limits<double>::quiet_NaN();
    bool defined = false;
};

/// Evaluates cos(guidance, uncond score) of two analytic densities over a
/// grid at step t. Both densities must share dimension and schedule.
inline std::vector<FieldSample> sample_alignment_field(const density::DiffusedDensity& d_uncond,
                                                       const density::DiffusedDensity& d_cond,
                                                       const std::vector<Eigen::VectorXd>& grid, int t) {
    if (grid.empty()) throw std::invalid_argument("sample_alignment_field: empty grid");
    if (d_uncond.dim() != d_cond.dim())
        throw std::invalid_argument("sample_alignment_field: densities differ in dimension");
    if (!(d_uncond.schedule == d_cond.schedule))
        throw std::invalid_argument("sample_alignment_field: densities differ in schedule");
    std::vector<FieldSample> out;
    out.reserve(grid.size());
    for (const auto& x : grid) {
        FieldSample fs;
        fs.point = x;
        const Eigen::VectorXd s_u = density::score(d_uncond, x, t);
        const Eigen::VectorXd s_c = density::score(d_cond, x, t);
        const auto c = try_cosine(guidance_vector(s_c, s_u), s_u);
        if (c) {
            fs.cosine = *c;
            fs.defined = true;
        }
        out.push_back(std::move(fs));
    }
    return out;
}

/// CSV export (x, y, cosine, defined) for external heatmap plotting.
/// Higher-dimensional points emit one column per coordinate.
inline std::string field_csv(const std::vector<FieldSample>& field) {
    const auto dim = field.empty() ? 0 : field.front().point.size();
    std::vector<std::string> header;
    if (dim == 2) {
        header = {"x", "y", "cosine", "defined"};
    } else {
        for (Eigen::Index i = 0; i < dim; ++i) header.push_back("x" + std::to_string(i));
        header.push_back("cosine");
        header.push_back("defined");
    }
    io::CsvWriter csv(header);
    for (const auto& fs : field) {
        std::vector<std::string> row;
        for (Eigen::Index i = 0; i < dim; ++i) row.push_back(io::format_double(fs.point[i]));
        row.push_back(fs.defined ? io::format_double(fs.cosine) : "nan");
        row.push_back(fs.defined ? "1" : "0");
        csv.append_row(row);
    }
    return csv.str();
}

}  // namespace scorelab::alignment
