#include "geofuse/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "geofuse/rng.hpp"

namespace geofuse {

namespace {

size_t checked_size(const std::vector<int>& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
    size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
        n *= static_cast<size_t>(e);
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size()) {
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

void Tensor::fill(double value) {
    for (double& v : data_) v = value;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void throw_dim_error(const std::string& op, const std::vector<int>& a, const std::vector<int>& b) {
    throw std::invalid_argument(op + ": dimension mismatch between " + shape_str(a) + " and " + shape_str(b));
}

void throw_contract_error(const std::string& what) {
    throw std::invalid_argument(what);
}

namespace {

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("tensor snapshot: truncated header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw std::runtime_error("tensor snapshot: truncated payload");
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

void save_tensor(const Tensor& t, std::ostream& out) {
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<uint32_t>(t.extent(i)));
    for (double v : t.data()) put_f64(out, v);
}

Tensor load_tensor(std::istream& in) {
    uint32_t rank = get_u32(in);
    if (rank == 0 || rank > 8) throw std::runtime_error("tensor snapshot: bad rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int>(get_u32(in));
        n *= static_cast<size_t>(shape[i]);
    }
    std::vector<double> data(n);
    for (size_t i = 0; i < n; ++i) data[i] = get_f64(in);
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor_file(const Tensor& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    save_tensor(t, out);
}

Tensor load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return load_tensor(in);
}

Rng Rng::keyed(uint64_t root, std::initializer_list<uint64_t> parts) {
    uint64_t h = mix64(root ^ 0x9e3779b97f4a7c15ull);
    for (uint64_t p : parts) h = mix64(h ^ mix64(p + 0x9e3779b97f4a7c15ull));
    return Rng(h);
}

int Rng::below(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::below: n must be positive");
    const uint64_t bound = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<int>(x % bound);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] so the log is finite
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace geofuse
