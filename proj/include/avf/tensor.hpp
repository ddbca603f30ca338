// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

namespace avf {

/// Dense row-major tensor of doubles with copy-on-write storage.
/// All library operations treat tensors as immutable values; mutation is
/// only available through mutable_data(), which detaches shared storage.
class Tensor {
public:
    using Shape = std::vector<std::size_t>;

    Tensor() : Tensor(Shape{}) {}
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return size_; }

    const double* data() const { return storage_->data(); }
    double* mutable_data();

    double at(std::size_t flat) const { return (*storage_)[flat]; }
    /// Scalar access; errors unless size() == 1.
    double item() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    std::vector<double> to_vector() const { return *storage_; }

private:
    Shape shape_;
    std::size_t size_ = 0;
    std::shared_ptr<std::vector<double>> storage_;
};

std::size_t shape_numel(const Tensor::Shape& shape);
std::string shape_to_string(const Tensor::Shape& shape);

/// Row-major strides; broadcast dims (extent 1 against a larger extent)
/// get stride 0 when padded against `out_shape`.
std::vector<std::size_t> broadcast_strides(const Tensor::Shape& in, const Tensor::Shape& out);

/// Common broadcast shape per trailing-dimension alignment, or an error
/// naming `op` and both shapes.
Tensor::Shape broadcast_shapes(const char* op, const Tensor::Shape& a, const Tensor::Shape& b);

/// Sum `t` down to `target` shape (inverse of broadcasting).
Tensor reduce_to_shape(const Tensor& t, const Tensor::Shape& target);

bool bitwise_equal(const Tensor& a, const Tensor& b);

} // namespace avf
