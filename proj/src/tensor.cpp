// SPDX-License-Identifier: Apache-2.0
#include "avf/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace avf {

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)),
      size_(shape_numel(shape_)),
      storage_(std::make_shared<std::vector<double>>(size_, fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), size_(shape_numel(shape_)) {
    if (values.size() != size_) {
        throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                    " values for shape " + shape_to_string(shape_));
    }
    storage_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

double* Tensor::mutable_data() {
    if (storage_.use_count() > 1) {
        storage_ = std::make_shared<std::vector<double>>(*storage_);
    }
    return storage_->data();
}

double Tensor::item() const {
    if (size_ != 1) {
        throw std::invalid_argument("item: tensor of shape " + shape_to_string(shape_) +
                                    " is not a scalar");
    }
    return (*storage_)[0];
}

bool Tensor::all_finite() const {
    for (double v : *storage_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::size_t shape_numel(const Tensor::Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Tensor::Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

std::vector<std::size_t> broadcast_strides(const Tensor::Shape& in, const Tensor::Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t stride = 1;
    const std::size_t offset = out.size() - in.size();
    for (std::size_t i = in.size(); i-- > 0;) {
        strides[offset + i] = (in[i] == 1 && out[offset + i] != 1) ? 0 : stride;
        stride *= in[i];
    }
    return strides;
}

Tensor::Shape broadcast_shapes(const char* op, const Tensor::Shape& a, const Tensor::Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Tensor::Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                        shape_to_string(a) + " and " + shape_to_string(b));
        }
        out[rank - 1 - i] = std::max(da, db);
    }
    return out;
}

Tensor reduce_to_shape(const Tensor& t, const Tensor::Shape& target) {
    if (t.shape() == target) return t;
    Tensor out(target);
    double* od = out.mutable_data();
    const double* td = t.data();
    const auto strides = broadcast_strides(target, t.shape());
    const auto& tshape = t.shape();
    std::vector<std::size_t> idx(tshape.size(), 0);
    for (std::size_t flat = 0; flat < t.size(); ++flat) {
        std::size_t oflat = 0;
        for (std::size_t d = 0; d < tshape.size(); ++d) oflat += idx[d] * strides[d];
        od[oflat] += td[flat];
        for (std::size_t d = tshape.size(); d-- > 0;) {
            if (++idx[d] < tshape[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        // bit comparison, not value comparison: distinguishes 0.0 / -0.0 and NaNs
        if (std::memcmp(&pa[i], &pb[i], sizeof(double)) != 0) return false;
    }
    return true;
}

} // namespace avf
