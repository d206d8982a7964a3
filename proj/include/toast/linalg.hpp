#pragma once

// Dense numerical kernels shared by the engine, the pruner and the analyzer.
//
// Storage is row-major f32. Every reduction accumulates in double and walks
// its index range in natural order, so results are reproducible bit for bit
// across runs and thread counts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "toast/error.hpp"

namespace toast {

using Vector = std::vector<float>;

// Multiply-accumulate tally. `block_macs` covers the projections and
// attention products a block evaluates; `selection_macs` covers the extra
// work channel selection spends deciding what to keep.
struct OpCounter {
    std::uint64_t block_macs = 0;
    std::uint64_t selection_macs = 0;
};

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<float> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged row list");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Matrix(r, c, std::move(data));
    }

    static Matrix identity(std::size_t n, float diag = 1.0f) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = diag;
        return m;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    [[nodiscard]] std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    [[nodiscard]] std::span<const float> row(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }

    [[nodiscard]] std::span<float> values() noexcept { return data_; }
    [[nodiscard]] std::span<const float> values() const noexcept { return data_; }
    [[nodiscard]] const std::vector<float>& storage() const noexcept { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

inline std::string shape_string(std::size_t rows, std::size_t cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

inline std::string shape_string(const Matrix& m) { return shape_string(m.rows(), m.cols()); }

inline bool all_finite(std::span<const float> values) noexcept {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

inline void require_finite(std::span<const float> values, std::string_view what) {
    if (!all_finite(values)) throw InputError(std::string(what) + ": non-finite value");
}

inline void require_finite(const Matrix& m, std::string_view what) { require_finite(m.values(), what); }

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

// C = A * B. When `macs` is given it is incremented by the number of
// multiply-accumulates performed (rows(A) * cols(A) * cols(B)).
inline Matrix matmul(const Matrix& a, const Matrix& b, std::uint64_t* macs = nullptr) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ (" + shape_string(a) + " * " + shape_string(b) + ")");
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c(n, m);
    std::vector<double> acc(m);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            const float* brow = b.row(p).data();
            for (std::size_t j = 0; j < m; ++j) acc[j] += aip * static_cast<double>(brow[j]);
        }
        for (std::size_t j = 0; j < m; ++j) c(i, j) = static_cast<float>(acc[j]);
    }
    if (macs != nullptr) *macs += static_cast<std::uint64_t>(n) * k * m;
    return c;
}

// C = A * B^T.
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b, std::uint64_t* macs = nullptr) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_transposed: inner dimensions differ (" + shape_string(a) + " * " +
                         shape_string(b) + "^T)");
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    Matrix c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const float* arow = a.row(i).data();
        for (std::size_t j = 0; j < m; ++j) {
            const float* brow = b.row(j).data();
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * brow[p];
            c(i, j) = static_cast<float>(acc);
        }
    }
    if (macs != nullptr) *macs += static_cast<std::uint64_t>(n) * k * m;
    return c;
}

inline void add_row_bias(Matrix& m, std::span<const float> bias) {
    if (bias.empty()) return;
    if (bias.size() != m.cols()) throw ShapeError("bias length does not match matrix width");
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
    }
}

inline void add_inplace(Matrix& dst, const Matrix& src) {
    if (dst.rows() != src.rows() || dst.cols() != src.cols()) throw ShapeError("add: shape mismatch");
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= m.rows()) throw ShapeError("gather_rows: index out of range");
        std::copy_n(m.row(rows[i]).begin(), m.cols(), out.row(i).begin());
    }
    return out;
}

inline Matrix gather_columns(const Matrix& m, std::span<const std::size_t> cols) {
    for (auto c : cols)
        if (c >= m.cols()) throw ShapeError("gather_columns: index out of range");
    Matrix out(m.rows(), cols.size());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(i, cols[j]);
    return out;
}

inline Vector gather(std::span<const float> v, std::span<const std::size_t> idx) {
    Vector out;
    if (v.empty()) return out;
    out.reserve(idx.size());
    for (auto i : idx) {
        if (i >= v.size()) throw ShapeError("gather: index out of range");
        out.push_back(v[i]);
    }
    return out;
}

// Row-wise softmax with max subtraction.
inline Matrix stable_softmax_rows(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    std::vector<double> e(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = x.row(i);
        if (r.empty()) continue;
        const double mx = *std::max_element(r.begin(), r.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < r.size(); ++j) {
            e[j] = std::exp(static_cast<double>(r[j]) - mx);
            sum += e[j];
        }
        for (std::size_t j = 0; j < r.size(); ++j) out(i, j) = static_cast<float>(e[j] / sum);
    }
    return out;
}

// Exact erf form.
inline float gelu(float x) noexcept {
    const double v = x;
    return static_cast<float>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
}

inline void gelu_inplace(Matrix& m) noexcept {
    for (auto& v : m.values()) v = gelu(v);
}

inline Matrix layer_norm(const Matrix& x, std::span<const float> scale, std::span<const float> shift,
                         double eps = 1e-6) {
    if (scale.size() != x.cols() || shift.size() != x.cols()) throw ShapeError("layer_norm: parameter width mismatch");
    Matrix out(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = x.row(i);
        double mean = 0.0;
        for (float v : r) mean += v;
        mean /= n;
        double var = 0.0;
        for (float v : r) var += (v - mean) * (v - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < r.size(); ++j)
            out(i, j) = static_cast<float>((r[j] - mean) * inv * scale[j] + shift[j]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Geometric median
// ---------------------------------------------------------------------------

namespace detail {

inline double distance(std::span<const float> p, std::span<const double> y) noexcept {
    double s = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        const double d = p[j] - y[j];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double sum_of_distances(const Matrix& points, std::span<const double> y) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i) s += distance(points.row(i), y);
    return s;
}

// Weiszfeld iteration in double precision. Starts at the centroid; a point
// closer than 1e-12 to the iterate is left out of that step's weights. The
// best iterate seen (by objective) is returned.
inline std::vector<double> geometric_median_f64(const Matrix& points, double tol, std::size_t max_iter) {
    if (points.rows() == 0) throw InputError("no points");
    if (!(tol > 0.0)) throw InputError("geometric_median: tol must be positive");
    if (max_iter == 0) throw InputError("geometric_median: max_iter must be at least 1");

    const std::size_t m = points.rows(), k = points.cols();
    std::vector<double> y(k, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) y[j] += points(i, j);
    for (auto& v : y) v /= static_cast<double>(m);

    std::vector<double> best = y;
    double best_obj = sum_of_distances(points, y);
    std::vector<double> next(k);

    for (std::size_t it = 0; it < max_iter; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        double denom = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const auto p = points.row(i);
            const double d = distance(p, y);
            if (d < 1e-12) continue;
            const double w = 1.0 / d;
            for (std::size_t j = 0; j < k; ++j) next[j] += w * p[j];
            denom += w;
        }
        if (denom == 0.0) break;  // every point coincides with the iterate
        double step = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            next[j] /= denom;
            const double d = next[j] - y[j];
            step += d * d;
        }
        y.swap(next);
        const double obj = sum_of_distances(points, y);
        if (obj < best_obj) {
            best_obj = obj;
            best = y;
        }
        if (std::sqrt(step) < tol) break;
    }
    return best;
}

}  // namespace detail

// Point minimizing the sum of Euclidean distances to the rows of `points`.
inline Vector geometric_median(const Matrix& points, double tol = 1e-6, std::size_t max_iter = 200) {
    const auto y = detail::geometric_median_f64(points, tol, max_iter);
    return Vector(y.begin(), y.end());
}

// ---------------------------------------------------------------------------
// Singular value decomposition (one-sided Jacobi) and least squares
// ---------------------------------------------------------------------------

namespace detail {

struct JacobiSvd {
    std::vector<double> sigma;               // descending
    std::vector<std::vector<double>> u_sig;  // column j = sigma_j * u_j, length rows
    std::vector<std::vector<double>> v;      // column j = v_j, length cols (empty unless requested)
};

// Hestenes one-sided Jacobi on the columns of a (rows x cols) matrix given
// column by column. Intended for rows >= cols.
inline JacobiSvd one_sided_jacobi(std::vector<std::vector<double>> cols, bool want_v) {
    const std::size_t k = cols.size();
    const std::size_t n = k == 0 ? 0 : cols[0].size();
    std::vector<std::vector<double>> v;
    if (want_v) {
        v.assign(k, std::vector<double>(k, 0.0));
        for (std::size_t j = 0; j < k; ++j) v[j][j] = 1.0;
    }
    constexpr double kTol = 1e-15;
    constexpr int kMaxSweeps = 80;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < k; ++p) {
            for (std::size_t q = p + 1; q < k; ++q) {
                auto& cp = cols[p];
                auto& cq = cols[q];
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                if (std::abs(gamma) <= kTol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < n; ++i) {
                    const double a = cp[i], b = cq[i];
                    cp[i] = c * a - s * b;
                    cq[i] = s * a + c * b;
                }
                if (want_v) {
                    auto& vp = v[p];
                    auto& vq = v[q];
                    for (std::size_t i = 0; i < k; ++i) {
                        const double a = vp[i], b = vq[i];
                        vp[i] = c * a - s * b;
                        vq[i] = s * a + c * b;
                    }
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> norms(k);
    for (std::size_t j = 0; j < k; ++j) {
        double s = 0.0;
        for (double x : cols[j]) s += x * x;
        norms[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    JacobiSvd out;
    out.sigma.reserve(k);
    out.u_sig.reserve(k);
    for (auto j : order) {
        out.sigma.push_back(norms[j]);
        out.u_sig.push_back(std::move(cols[j]));
        if (want_v) out.v.push_back(std::move(v[j]));
    }
    return out;
}

inline std::vector<double> singular_values_f64(const Matrix& x) {
    const bool tall = x.rows() >= x.cols();
    const std::size_t k = tall ? x.cols() : x.rows();
    const std::size_t n = tall ? x.rows() : x.cols();
    std::vector<std::vector<double>> cols(k, std::vector<double>(n));
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) {
            if (tall)
                cols[j][i] = x(i, j);
            else
                cols[i][j] = x(i, j);
        }
    return one_sided_jacobi(std::move(cols), false).sigma;
}

// Minimum-norm least squares for a (n x k) design given column by column.
inline std::vector<double> least_squares_f64(std::vector<std::vector<double>> design, std::span<const double> y) {
    const std::size_t k = design.size();
    const std::size_t n = y.size();
    if (k == 0) throw InputError("least_squares: empty design");
    if (n < k) throw InputError("underdetermined");
    for (const auto& c : design)
        if (c.size() != n) throw ShapeError("least_squares: design/target length mismatch");

    const auto svd = one_sided_jacobi(std::move(design), true);
    const double cutoff = svd.sigma.empty()
                              ? 0.0
                              : svd.sigma.front() * static_cast<double>(std::max(n, k)) * 2.220446049250313e-16;
    std::vector<double> beta(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        const double s = svd.sigma[j];
        if (s <= cutoff || s == 0.0) continue;
        double proj = 0.0;
        for (std::size_t i = 0; i < n; ++i) proj += svd.u_sig[j][i] * y[i];
        const double coef = proj / (s * s);
        for (std::size_t i = 0; i < k; ++i) beta[i] += coef * svd.v[j][i];
    }
    return beta;
}

}  // namespace detail

// Singular values in non-increasing order, min(rows, cols) of them.
inline Vector singular_values(const Matrix& x) {
    if (x.rows() == 0 || x.cols() == 0) throw InputError("singular_values: empty matrix");
    require_finite(x, "singular_values");
    const auto s = detail::singular_values_f64(x);
    return Vector(s.begin(), s.end());
}

// beta minimizing ||A beta - y||; minimum-norm solution when A is rank deficient.
inline Vector least_squares(const Matrix& a, std::span<const float> y) {
    if (a.rows() != y.size()) throw ShapeError("least_squares: A has " + std::to_string(a.rows()) + " rows, y has " +
                                               std::to_string(y.size()));
    if (a.cols() == 0) throw InputError("least_squares: empty design");
    if (a.rows() < a.cols()) throw InputError("underdetermined");
    require_finite(a, "least_squares");
    require_finite(y, "least_squares");
    std::vector<std::vector<double>> cols(a.cols(), std::vector<double>(a.rows()));
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) cols[j][i] = a(i, j);
    const std::vector<double> yd(y.begin(), y.end());
    const auto beta = detail::least_squares_f64(std::move(cols), yd);
    return Vector(beta.begin(), beta.end());
}

}  // namespace toast
