#include "hadnet/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace hadnet {

std::size_t shape_numel(const std::vector<std::size_t>& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const std::vector<std::size_t>& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape, Real fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
{
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data))
{
    if (data_.size() != shape_numel(shape_))
        throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape_));
}

Real& Tensor::at(std::size_t c, std::size_t z, std::size_t y, std::size_t x)
{
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
}

Real Tensor::at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const
{
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
}

std::size_t Tensor::spatial_size() const
{
    if (shape_.size() != 4) throw std::logic_error("spatial_size needs a [C,D,H,W] tensor");
    return shape_[1] * shape_[2] * shape_[3];
}

void Tensor::fill(Real v)
{
    std::fill(data_.begin(), data_.end(), v);
}

}  // namespace hadnet
