// Dense small-matrix arithmetic used by the simulator, the reference
// filter, and the program interpreter. Sizes stay tiny (2x2, 2x1), so
// storage is inline up to 16 elements and falls back to the heap above.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace evofilter {

struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct singular_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct nonfinite_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct domain_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Row-major dense matrix of 64-bit reals.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {
        if (rows == 0 || cols == 0)
            throw domain_error("matrix dimensions must be positive");
        if (size() > kInline)
            heap_.assign(size(), 0.0);
        else
            inline_.fill(0.0);
    }

    Matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
        : Matrix(rows, cols) {
        if (values.size() != size())
            throw domain_error("initializer size does not match " + shape_str());
        std::size_t i = 0;
        for (double v : values)
            data()[i++] = v;
    }

    Matrix(std::initializer_list<std::initializer_list<double>> init)
        : Matrix(init.size(), init.size() ? init.begin()->size() : 0) {
        std::size_t r = 0;
        for (const auto& row : init) {
            if (row.size() != cols_)
                throw domain_error("ragged initializer list");
            std::size_t c = 0;
            for (double v : row)
                (*this)(r, c++) = v;
            ++r;
        }
    }

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            m(i, i) = 1.0;
        return m;
    }

    static Matrix column(std::initializer_list<double> values) {
        Matrix m(values.size(), 1);
        std::size_t i = 0;
        for (double v : values)
            m(i++, 0) = v;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return rows_ * cols_; }
    bool empty() const { return size() == 0; }

    double* data() { return size() > kInline ? heap_.data() : inline_.data(); }
    const double* data() const { return size() > kInline ? heap_.data() : inline_.data(); }

    double& operator()(std::size_t r, std::size_t c) { return data()[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data()[r * cols_ + c]; }

    double& at(std::size_t r, std::size_t c) {
        if (r >= rows_ || c >= cols_)
            throw domain_error("matrix index out of range");
        return (*this)(r, c);
    }

    bool operator==(const Matrix& other) const {
        if (rows_ != other.rows_ || cols_ != other.cols_)
            return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (data()[i] != other.data()[i])
                return false;
        return true;
    }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    bool all_finite() const {
        for (std::size_t i = 0; i < size(); ++i)
            if (!std::isfinite(data()[i]))
                return false;
        return true;
    }

private:
    static constexpr std::size_t kInline = 16;

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::array<double, kInline> inline_{};
    std::vector<double> heap_;
};

namespace detail {

inline void check_finite(const Matrix& m, const char* op) {
    if (!m.all_finite())
        throw nonfinite_error(std::string(op) + " produced a non-finite entry");
}

} // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw shape_error("matmul shape mismatch: " + a.shape_str() + " @ " + b.shape_str());
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j)
                out(i, j) += aik * b(k, j);
        }
    }
    detail::check_finite(out, "matmul");
    return out;
}

// Elementwise sum. The single supported broadcast is a column (n x 1)
// against an (n x m) matrix, repeated across columns.
inline Matrix add(const Matrix& a, const Matrix& b) {
    if (a.same_shape(b)) {
        Matrix out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] + b.data()[i];
        detail::check_finite(out, "add");
        return out;
    }
    const bool a_col = a.cols() == 1 && b.cols() > 1 && a.rows() == b.rows();
    const bool b_col = b.cols() == 1 && a.cols() > 1 && a.rows() == b.rows();
    if (a_col || b_col) {
        const Matrix& full = a_col ? b : a;
        const Matrix& col = a_col ? a : b;
        Matrix out(full.rows(), full.cols());
        for (std::size_t i = 0; i < full.rows(); ++i)
            for (std::size_t j = 0; j < full.cols(); ++j)
                out(i, j) = full(i, j) + col(i, 0);
        detail::check_finite(out, "add");
        return out;
    }
    throw shape_error("add shape mismatch: " + a.shape_str() + " + " + b.shape_str());
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw shape_error("sub shape mismatch: " + a.shape_str() + " - " + b.shape_str());
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = a.data()[i] - b.data()[i];
    detail::check_finite(out, "sub");
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            out(j, i) = a(i, j);
    return out;
}

/// Inverse by Gauss-Jordan elimination with scaled partial pivoting.
/// A pivot below 1e-12 relative to its row's largest entry is singular.
inline Matrix invert(const Matrix& a) {
    if (a.rows() != a.cols())
        throw shape_error("invert requires a square matrix, got " + a.shape_str());
    const std::size_t n = a.rows();
    Matrix work = a;
    Matrix inv = Matrix::identity(n);

    std::vector<double> scale(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c)
            s = std::max(s, std::abs(work(r, c)));
        if (s == 0.0)
            throw singular_error("singular matrix: zero row " + std::to_string(r));
        scale[r] = s;
    }

    std::vector<std::size_t> row_of(n);
    for (std::size_t i = 0; i < n; ++i)
        row_of[i] = i;

    for (std::size_t col = 0; col < n; ++col) {
        std::size_t best = col;
        double best_ratio = -1.0;
        for (std::size_t r = col; r < n; ++r) {
            const double ratio = std::abs(work(r, col)) / scale[row_of[r]];
            if (ratio > best_ratio) {
                best_ratio = ratio;
                best = r;
            }
        }
        if (best_ratio < 1e-12)
            throw singular_error("singular matrix: pivot below threshold in column " +
                                 std::to_string(col));
        if (best != col) {
            for (std::size_t c = 0; c < n; ++c) {
                std::swap(work(col, c), work(best, c));
                std::swap(inv(col, c), inv(best, c));
            }
            std::swap(row_of[col], row_of[best]);
        }
        const double pivot = work(col, col);
        for (std::size_t c = 0; c < n; ++c) {
            work(col, c) /= pivot;
            inv(col, c) /= pivot;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col)
                continue;
            const double factor = work(r, col);
            if (factor == 0.0)
                continue;
            for (std::size_t c = 0; c < n; ++c) {
                work(r, c) -= factor * work(col, c);
                inv(r, c) -= factor * inv(col, c);
            }
        }
    }
    detail::check_finite(inv, "invert");
    return inv;
}

enum class UnaryOp { Tanh, Sin, Cos, Log, Exp, Abs, Square };

inline const char* unary_op_name(UnaryOp op) {
    switch (op) {
    case UnaryOp::Tanh: return "tanh";
    case UnaryOp::Sin: return "sin";
    case UnaryOp::Cos: return "cos";
    case UnaryOp::Log: return "log";
    case UnaryOp::Exp: return "exp";
    case UnaryOp::Abs: return "abs";
    case UnaryOp::Square: return "square";
    }
    return "?";
}

/// Entrywise unary map. log is guarded as log(max(x, 1e-8)).
inline Matrix elementwise(UnaryOp op, const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i];
        double y = 0.0;
        switch (op) {
        case UnaryOp::Tanh: y = std::tanh(x); break;
        case UnaryOp::Sin: y = std::sin(x); break;
        case UnaryOp::Cos: y = std::cos(x); break;
        case UnaryOp::Log: y = std::log(std::max(x, 1e-8)); break;
        case UnaryOp::Exp: y = std::exp(x); break;
        case UnaryOp::Abs: y = std::abs(x); break;
        case UnaryOp::Square: y = x * x; break;
        }
        out.data()[i] = y;
    }
    detail::check_finite(out, unary_op_name(op));
    return out;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = a.data()[i] * s;
    detail::check_finite(out, "scale");
    return out;
}

inline Matrix add_scalar(const Matrix& a, double s) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = a.data()[i] + s;
    detail::check_finite(out, "add_scalar");
    return out;
}

inline Matrix max_with_scalar(const Matrix& a, double s) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i)
        out.data()[i] = std::max(a.data()[i], s);
    detail::check_finite(out, "max_with_scalar");
    return out;
}

/// Per-row minimum as an (rows x 1) column.
inline Matrix row_min(const Matrix& a) {
    Matrix out(a.rows(), 1);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double m = a(i, 0);
        for (std::size_t j = 1; j < a.cols(); ++j)
            m = std::min(m, a(i, j));
        out(i, 0) = m;
    }
    return out;
}

inline double mean_all(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a.data()[i];
    const double m = s / static_cast<double>(a.size());
    if (!std::isfinite(m))
        throw nonfinite_error("mean produced a non-finite value");
    return m;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a.data()[i] * a.data()[i];
    const double n = std::sqrt(s);
    if (!std::isfinite(n))
        throw nonfinite_error("norm produced a non-finite value");
    return n;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw shape_error("max_abs_diff shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
    return d;
}

inline std::string to_string(const Matrix& m) {
    std::string s = "[";
    for (std::size_t i = 0; i < m.rows(); ++i) {
        s += i ? ", [" : "[";
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j)
                s += ", ";
            s += std::to_string(m(i, j));
        }
        s += "]";
    }
    s += "]";
    return s;
}

} // namespace evofilter
