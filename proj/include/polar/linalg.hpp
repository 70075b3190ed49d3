#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace polar {

// Dense row-major float32 matrix. Forward compute runs in f32 everywhere;
// gradients are accumulated in f64 (see tape.hpp).
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}
    Matrix(int r, int c, std::vector<float> d);

    static Matrix zeros(int r, int c) { return Matrix(r, c); }
    static Matrix identity(int n);
    static Matrix from_row(std::span<const float> v);

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    float* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const float* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    std::span<const float> row(int r) const { return {row_ptr(r), static_cast<size_t>(cols)}; }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
    bool operator==(const Matrix& o) const { return rows == o.rows && cols == o.cols && data == o.data; }
};

// c = op(a) * op(b) with optional transposes. Throws on dimension mismatch.
Matrix matmul(const Matrix& a, const Matrix& b, bool transpose_a = false, bool transpose_b = false);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, float s);
double frobenius_norm(const Matrix& a);
bool all_finite(const Matrix& a);

// Unit-normalizes v under the L2 norm. Throws on the zero vector.
std::vector<float> l2_normalize(std::span<const float> v);
double l2_norm(std::span<const float> v);
double dot(std::span<const float> a, std::span<const float> b);

// Cosine similarity. Throws on zero vectors or length mismatch.
float cosine_sim(std::span<const float> a, std::span<const float> b);

// Numerically stable softmax (max-subtracted). Total on finite input.
std::vector<float> softmax_row(std::span<const float> v);

// Deterministic 64-bit PRNG (splitmix64). The raw u64 stream is pure integer
// arithmetic, so the same seed reproduces the same stream on every platform.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed) : state(seed) {}

    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    float next_float() { return static_cast<float>(next_double()); }

    // Uniform in [0, n). Plain modulo; the bias is irrelevant at n << 2^64.
    uint32_t next_below(uint32_t n) { return static_cast<uint32_t>(next_u64() % n); }

    // Box-Muller from two uniform draws; consumes exactly two u64s per call.
    double next_gaussian();

    // Random unit vector of length n.
    std::vector<float> unit_vector(int n);
};

// FNV-1a 64-bit hash, used for weight fingerprints and artifact hashes.
uint64_t fnv1a64(const void* bytes, size_t len, uint64_t seed = 0xcbf29ce484222325ULL);
std::string hash_hex(uint64_t h);

}  // namespace polar
