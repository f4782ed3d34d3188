#pragma once

// Named-tensor container in the safetensors layout: an 8-byte little-endian
// header length, a JSON manifest {name: {dtype, shape, data_offsets}} with a
// "__metadata__" string map, then the raw little-endian tensor bytes.

#include "dpclip/autograd.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dpclip {

enum class DType { F16, F32, F64 };

struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> data;

    std::int64_t numel() const;
    // Collapses leading dims: shape [a, b, c, ...] -> a x (b*c*...). 1-D -> 1 x n.
    Mat as_matrix() const;
    static Tensor from_matrix(const Mat& m, std::vector<std::int64_t> shape = {});
};

class TensorFile {
public:
    void put(const std::string& name, Tensor t, DType dtype = DType::F64);
    void put(const std::string& name, const Mat& m, std::vector<std::int64_t> shape = {}, DType dtype = DType::F64);
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const Tensor& get(const std::string& name) const;
    // Shape-checked fetch; the error names the tensor.
    const Tensor& expect(const std::string& name, const std::vector<std::int64_t>& shape) const;
    std::vector<std::string> names() const;

    std::map<std::string, std::string>& metadata() { return metadata_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    void save(const std::filesystem::path& path) const;
    static TensorFile load(const std::filesystem::path& path);

private:
    struct Stored {
        Tensor tensor;
        DType dtype;
    };
    std::map<std::string, Stored> tensors_;
    std::map<std::string, std::string> metadata_;
};

std::string shape_string(const std::vector<std::int64_t>& shape);

}  // namespace dpclip
