#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtu {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error(m) {}
};
struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

// Dense row-major tensor. Copies are shallow (shared buffer); treat tensors
// as immutable once they have been handed to an op. clone() gives a private
// buffer for in-place mutation (parameter init, optimizer updates).
template <typename T>
class Tensor {
  public:
    Tensor() : shape_{}, data_(std::make_shared<std::vector<T>>()) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(std::move(values))) {
        check_shape();
        if (static_cast<int64_t>(data_->size()) != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_->size()); }

    const T* data() const { return data_->data(); }
    T* data() { return data_->data(); }
    const std::vector<T>& vec() const { return *data_; }
    std::vector<T>& vec() { return *data_; }

    T operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }

    bool empty() const { return data_->empty(); }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    // New view onto the same buffer with a different shape.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " +
                             shape_str(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    bool shares_buffer(const Tensor& other) const { return data_ == other.data_; }

    bool all_finite() const {
        for (T v : *data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_->size());
        for (size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

  private:
    void check_shape() const {
        for (int64_t d : shape_) {
            if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape();
}

// Learnable value: tensor plus gradient buffer plus a hierarchical name.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), T(0)); }
};

// Non-learnable persistent state (batch-norm running statistics).
template <typename T>
struct Buffer {
    std::string name;
    Tensor<T> value;
};

}  // namespace dtu
