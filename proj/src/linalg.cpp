#include "polar/linalg.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace polar {

Matrix::Matrix(int r, int c, std::vector<float> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(r) * c) {
        throw std::invalid_argument("matrix: data length does not match rows*cols");
    }
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
}

Matrix Matrix::from_row(std::span<const float> v) {
    Matrix m(1, static_cast<int>(v.size()));
    std::copy(v.begin(), v.end(), m.data.begin());
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b, bool transpose_a, bool transpose_b) {
    const int m = transpose_a ? a.cols : a.rows;
    const int k = transpose_a ? a.rows : a.cols;
    const int kb = transpose_b ? b.cols : b.rows;
    const int n = transpose_b ? b.rows : b.cols;
    if (k != kb) {
        throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(k) +
                                    " vs " + std::to_string(kb) + ")");
    }
    Matrix c(m, n);
    if (!transpose_a && !transpose_b) {
        // ikj order keeps both inner streams contiguous.
        for (int i = 0; i < m; ++i) {
            float* crow = c.row_ptr(i);
            const float* arow = a.row_ptr(i);
            for (int p = 0; p < k; ++p) {
                const float av = arow[p];
                const float* brow = b.row_ptr(p);
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!transpose_a && transpose_b) {
        // Dot products of contiguous rows.
        for (int i = 0; i < m; ++i) {
            const float* arow = a.row_ptr(i);
            float* crow = c.row_ptr(i);
            for (int j = 0; j < n; ++j) {
                const float* brow = b.row_ptr(j);
                float acc = 0.0f;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] = acc;
            }
        }
    } else if (transpose_a && !transpose_b) {
        for (int p = 0; p < k; ++p) {
            const float* arow = a.row_ptr(p);
            const float* brow = b.row_ptr(p);
            for (int i = 0; i < m; ++i) {
                const float av = arow[i];
                float* crow = c.row_ptr(i);
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i) {
            float* crow = c.row_ptr(i);
            for (int j = 0; j < n; ++j) {
                const float* brow = b.row_ptr(j);
                float acc = 0.0f;
                for (int p = 0; p < k; ++p) acc += a.at(p, i) * brow[p];
                crow[j] = acc;
            }
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add: shape mismatch");
    Matrix c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("sub: shape mismatch");
    Matrix c = a;
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("add_inplace: shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void scale_inplace(Matrix& a, float s) {
    for (float& v : a.data) v *= s;
}

double frobenius_norm(const Matrix& a) {
    double acc = 0.0;
    for (float v : a.data) acc += static_cast<double>(v) * v;
    return std::sqrt(acc);
}

bool all_finite(const Matrix& a) {
    for (float v : a.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double l2_norm(std::span<const float> v) {
    double acc = 0.0;
    for (float x : v) acc += static_cast<double>(x) * x;
    return std::sqrt(acc);
}

double dot(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

std::vector<float> l2_normalize(std::span<const float> v) {
    const double n = l2_norm(v);
    if (n <= 0.0) throw std::invalid_argument("l2_normalize: zero vector");
    std::vector<float> out(v.size());
    const float inv = static_cast<float>(1.0 / n);
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
    return out;
}

float cosine_sim(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: length mismatch");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na <= 0.0 || nb <= 0.0) throw std::invalid_argument("cosine_sim: zero vector");
    return static_cast<float>(dot(a, b) / (na * nb));
}

std::vector<float> softmax_row(std::span<const float> v) {
    if (v.empty()) throw std::invalid_argument("softmax_row: empty input");
    float mx = v[0];
    for (float x : v) mx = std::max(mx, x);
    std::vector<float> out(v.size());
    double sum = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        const float e = std::exp(v[i] - mx);
        out[i] = e;
        sum += e;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (float& x : out) x *= inv;
    return out;
}

double Rng::next_gaussian() {
    // u1 in (0,1] so the log is finite.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::vector<float> Rng::unit_vector(int n) {
    std::vector<float> v(n);
    for (int i = 0; i < n; ++i) v[i] = static_cast<float>(next_gaussian());
    return l2_normalize(v);
}

uint64_t fnv1a64(const void* bytes, size_t len, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace polar
