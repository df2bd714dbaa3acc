#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace jepat {

using Index = Eigen::Index;

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(const std::vector<Index>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

/// Dense n-dimensional array of scalars, stored row-major.
///
/// The last axis is the "column" axis; all leading axes are flattened into
/// rows, so every tensor is viewable as a rows()xcols() matrix. A scalar is
/// shape {1}.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
        check_shape();
        data_ = MatrixX<S>::Zero(rows_from_shape(), cols_from_shape());
    }

    Tensor(std::vector<Index> shape, MatrixX<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.rows() != rows_from_shape() || data_.cols() != cols_from_shape()) {
            throw std::invalid_argument("tensor: data " + std::to_string(data_.rows()) + "x" +
                                        std::to_string(data_.cols()) + " does not match shape " +
                                        shape_string(shape_));
        }
    }

    static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<Index> shape, S v) {
        Tensor t(std::move(shape));
        t.data_.setConstant(v);
        return t;
    }

    static Tensor ones(std::vector<Index> shape) { return full(std::move(shape), S(1)); }

    static Tensor scalar(S v) { return full({1}, v); }

    static Tensor from_matrix(MatrixX<S> m) {
        std::vector<Index> shape{m.rows(), m.cols()};
        return Tensor(std::move(shape), std::move(m));
    }

    /// 1-D tensor (shape {n}) from a list of values.
    static Tensor row(std::initializer_list<S> vs) {
        MatrixX<S> m(1, static_cast<Index>(vs.size()));
        Index j = 0;
        for (S v : vs) m(0, j++) = v;
        return Tensor({static_cast<Index>(vs.size())}, std::move(m));
    }

    const std::vector<Index>& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index size() const { return data_.size(); }
    Index rows() const { return data_.rows(); }
    Index cols() const { return data_.cols(); }

    MatrixX<S>& mat() { return data_; }
    const MatrixX<S>& mat() const { return data_; }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S value() const {
        if (size() != 1) throw std::logic_error("tensor: value() on non-scalar " + shape_string(shape_));
        return data_(0, 0);
    }

    S& operator()(Index r, Index c) { return data_(r, c); }
    S operator()(Index r, Index c) const { return data_(r, c); }

    /// Same data, new logical shape. Element count must match.
    Tensor reshaped(std::vector<Index> shape) const {
        Tensor out;
        out.shape_ = std::move(shape);
        out.check_shape();
        if (out.rows_from_shape() * out.cols_from_shape() != size()) {
            throw std::invalid_argument("tensor: cannot reshape " + shape_string(shape_) + " to " +
                                        shape_string(out.shape_));
        }
        out.data_.resize(out.rows_from_shape(), out.cols_from_shape());
        std::copy(data(), data() + size(), out.data());
        return out;
    }

    template <typename T>
    Tensor<T> cast() const {
        return Tensor<T>(shape_, data_.template cast<T>());
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        // allFinite() is vectorized but misses nothing we care about
        return data_.allFinite();
    }

    std::string shape_str() const { return shape_string(shape_); }

private:
    Index rows_from_shape() const {
        Index r = 1;
        for (size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
        return r;
    }
    Index cols_from_shape() const { return shape_.empty() ? 1 : shape_.back(); }

    void check_shape() const {
        if (shape_.empty()) throw std::invalid_argument("tensor: rank-0 shape not supported");
        for (Index e : shape_) {
            if (e <= 0) throw std::invalid_argument("tensor: non-positive extent in " + shape_string(shape_));
        }
    }

    std::vector<Index> shape_;
    MatrixX<S> data_;
};

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

}  // namespace jepat
