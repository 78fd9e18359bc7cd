#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace oclearn {

// Examples live in rows, features in columns.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Folds a list of integers into a single 64-bit seed (splitmix64 finalizer per step).
/// Every stochastic choice in the library derives its engine from one of these.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) noexcept
{
    std::uint64_t h = 0x9E3779B97F4A7C15ULL;
    for (std::uint64_t p : parts) {
        h ^= p + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
        h += 0x9E3779B97F4A7C15ULL;
        h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ULL;
        h = (h ^ (h >> 27)) * 0x94D049BB133111EBULL;
        h ^= h >> 31;
    }
    return h;
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Derived>
int argmax(const Eigen::DenseBase<Derived>& v)
{
    int best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
        if (v(i) > v(best)) best = static_cast<int>(i);
    }
    return best;
}

/// Numerically stable softmax of a single row of logits.
inline RowVector softmax_row(const Eigen::Ref<const RowVector>& logits, double temperature = 1.0)
{
    RowVector scaled = logits / temperature;
    scaled.array() -= scaled.maxCoeff();
    RowVector e = scaled.array().exp();
    return e / e.sum();
}

inline Matrix softmax_rows(const Matrix& logits, double temperature = 1.0)
{
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) out.row(i) = softmax_row(logits.row(i), temperature);
    return out;
}

} // namespace oclearn
