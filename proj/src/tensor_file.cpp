#include "dpclip/tensor_file.hpp"

#include "dpclip/errors.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace dpclip {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

const char* dtype_name(DType d) {
    switch (d) {
        case DType::F16: return "F16";
        case DType::F32: return "F32";
        case DType::F64: return "F64";
    }
    return "F64";
}

std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::F16: return 2;
        case DType::F32: return 4;
        case DType::F64: return 8;
    }
    return 8;
}

DType parse_dtype(const std::string& s, const std::string& tensor) {
    if (s == "F16") return DType::F16;
    if (s == "F32") return DType::F32;
    if (s == "F64") return DType::F64;
    throw LoadError("tensor '" + tensor + "': unsupported dtype " + s);
}

double half_to_double(std::uint16_t h) {
    const int sign = (h >> 15) & 1;
    const int exp = (h >> 10) & 0x1f;
    const int frac = h & 0x3ff;
    double v;
    if (exp == 0) {
        v = std::ldexp(static_cast<double>(frac), -24);
    } else if (exp == 31) {
        v = frac == 0 ? INFINITY : NAN;
    } else {
        v = std::ldexp(static_cast<double>(frac | 0x400), exp - 25);
    }
    return sign ? -v : v;
}

std::uint16_t double_to_half(double d) {
    const float f = static_cast<float>(d);
    std::uint32_t x;
    std::memcpy(&x, &f, 4);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000);
    const int exp = static_cast<int>((x >> 23) & 0xff) - 127 + 15;
    std::uint32_t mant = x & 0x7fffff;
    if (exp <= 0) return sign;
    if (exp >= 31) return static_cast<std::uint16_t>(sign | 0x7c00);
    return static_cast<std::uint16_t>(sign | (exp << 10) | (mant >> 13));
}

}  // namespace

std::string shape_string(const std::vector<std::int64_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::int64_t Tensor::numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Mat Tensor::as_matrix() const {
    if (shape.empty()) {
        Mat m(1, 1);
        m(0, 0) = data.at(0);
        return m;
    }
    const std::int64_t rows = shape.size() == 1 ? 1 : shape[0];
    const std::int64_t cols = rows == 0 ? 0 : numel() / rows;
    Mat m(rows, cols);
    std::copy(data.begin(), data.end(), m.data());
    return m;
}

Tensor Tensor::from_matrix(const Mat& m, std::vector<std::int64_t> shape) {
    Tensor t;
    t.shape = shape.empty() ? std::vector<std::int64_t>{m.rows(), m.cols()} : std::move(shape);
    if (t.numel() != m.size()) throw ShapeError("from_matrix: shape " + shape_string(t.shape) + " does not match matrix size");
    t.data.assign(m.data(), m.data() + m.size());
    return t;
}

void TensorFile::put(const std::string& name, Tensor t, DType dtype) {
    if (static_cast<std::int64_t>(t.data.size()) != t.numel()) {
        throw ShapeError("tensor '" + name + "': data size does not match shape " + shape_string(t.shape));
    }
    tensors_[name] = Stored{std::move(t), dtype};
}

void TensorFile::put(const std::string& name, const Mat& m, std::vector<std::int64_t> shape, DType dtype) {
    put(name, Tensor::from_matrix(m, std::move(shape)), dtype);
}

const Tensor& TensorFile::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw LoadError("missing tensor '" + name + "'");
    return it->second.tensor;
}

const Tensor& TensorFile::expect(const std::string& name, const std::vector<std::int64_t>& shape) const {
    const Tensor& t = get(name);
    if (t.shape != shape) {
        throw LoadError("tensor '" + name + "': expected shape " + shape_string(shape) + ", found " +
                        shape_string(t.shape));
    }
    return t;
}

std::vector<std::string> TensorFile::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : tensors_) out.push_back(k);
    return out;
}

void TensorFile::save(const std::filesystem::path& path) const {
    nlohmann::json header = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& [name, stored] : tensors_) {
        const std::size_t bytes = stored.tensor.data.size() * dtype_size(stored.dtype);
        header[name] = {{"dtype", dtype_name(stored.dtype)},
                        {"shape", stored.tensor.shape},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    if (!metadata_.empty()) header["__metadata__"] = metadata_;
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, stored] : tensors_) {
        const auto& d = stored.tensor.data;
        switch (stored.dtype) {
            case DType::F64:
                out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * 8));
                break;
            case DType::F32: {
                std::vector<float> f(d.begin(), d.end());
                out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
                break;
            }
            case DType::F16: {
                std::vector<std::uint16_t> h(d.size());
                for (std::size_t i = 0; i < d.size(); ++i) h[i] = double_to_half(d[i]);
                out.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size() * 2));
                break;
            }
        }
    }
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open tensor file '" + path.string() + "'");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    if (!in || len > (1ULL << 30)) throw LoadError("'" + path.string() + "': bad header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw LoadError("'" + path.string() + "': truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("'" + path.string() + "': malformed manifest: " + e.what());
    }
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    TensorFile file;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == "__metadata__") {
            for (auto m = it.value().begin(); m != it.value().end(); ++m) {
                file.metadata_[m.key()] = m.value().get<std::string>();
            }
            continue;
        }
        const std::string& name = it.key();
        try {
            const DType dt = parse_dtype(it.value().at("dtype").get<std::string>(), name);
            Tensor t;
            t.shape = it.value().at("shape").get<std::vector<std::int64_t>>();
            const auto offs = it.value().at("data_offsets").get<std::vector<std::uint64_t>>();
            const std::size_t n = static_cast<std::size_t>(t.numel());
            if (offs.size() != 2 || offs[1] > blob.size() || offs[1] - offs[0] != n * dtype_size(dt)) {
                throw LoadError("tensor '" + name + "': data offsets inconsistent with shape " + shape_string(t.shape));
            }
            const char* src = blob.data() + offs[0];
            t.data.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                switch (dt) {
                    case DType::F64: std::memcpy(&t.data[i], src + 8 * i, 8); break;
                    case DType::F32: {
                        float f;
                        std::memcpy(&f, src + 4 * i, 4);
                        t.data[i] = f;
                        break;
                    }
                    case DType::F16: {
                        std::uint16_t h;
                        std::memcpy(&h, src + 2 * i, 2);
                        t.data[i] = half_to_double(h);
                        break;
                    }
                }
            }
            file.tensors_[name] = Stored{std::move(t), dt};
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("tensor '" + name + "': malformed manifest entry: " + e.what());
        }
    }
    return file;
}

}  // namespace dpclip
