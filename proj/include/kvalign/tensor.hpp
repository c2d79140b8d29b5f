#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "kvalign/common.hpp"
#include "kvalign/rng.hpp"

namespace kvalign {

// Dense row-major float32 tensor with value semantics.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<size_t>(numel_of(shape)) != data.size())
            throw dim_error("tensor: data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw dim_error("tensor: nonpositive dimension in " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        int64_t n = numel_of(s);
        t.shape = std::move(s);
        t.data.assign(static_cast<size_t>(n), 0.0f);
        return t;
    }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t = zeros(std::move(s));
        for (float& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor uniform(std::vector<int> s, RngStream& rs, float lo, float hi) {
        Tensor t = zeros(std::move(s));
        for (float& x : t.data) x = rs.uniform(lo, hi);
        return t;
    }

    static Tensor normal(std::vector<int> s, RngStream& rs) {
        Tensor t = zeros(std::move(s));
        for (float& x : t.data) x = rs.normal();
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    float& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    float at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw dim_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                        shape_str(b.shape));
}

// ---------------------------------------------------------------------------
// GEMM kernels. Row-major; the j (or k) inner loops are written so the
// compiler vectorizes them. acc=true accumulates into c instead of storing.
// ---------------------------------------------------------------------------

// c[m×n] = a[m×k] · b[k×n]
inline void sgemm_nn(int m, int k, int n, const float* a, const float* b, float* c, bool acc) {
    if (!acc) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
    for (int i = 0; i < m; i++) {
        const float* ai = a + static_cast<size_t>(i) * k;
        float* ci = c + static_cast<size_t>(i) * n;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const float a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            const float* b0 = b + static_cast<size_t>(p) * n;
            const float* b1 = b0 + n;
            const float* b2 = b1 + n;
            const float* b3 = b2 + n;
            for (int j = 0; j < n; j++) ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; p < k; p++) {
            const float ap = ai[p];
            const float* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; j++) ci[j] += ap * bp[j];
        }
    }
}

// c[m×n] = a[m×k] · b[n×k]ᵀ
inline void sgemm_nt(int m, int k, int n, const float* a, const float* b, float* c, bool acc) {
    for (int i = 0; i < m; i++) {
        const float* ai = a + static_cast<size_t>(i) * k;
        float* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; j++) {
            const float* bj = b + static_cast<size_t>(j) * k;
            float s = 0.0f;
            for (int p = 0; p < k; p++) s += ai[p] * bj[p];
            if (acc)
                ci[j] += s;
            else
                ci[j] = s;
        }
    }
}

// c[m×n] = a[k×m]ᵀ · b[k×n]
inline void sgemm_tn(int m, int k, int n, const float* a, const float* b, float* c, bool acc) {
    if (!acc) std::memset(c, 0, sizeof(float) * static_cast<size_t>(m) * n);
    for (int p = 0; p < k; p++) {
        const float* ap = a + static_cast<size_t>(p) * m;
        const float* bp = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; i++) {
            const float api = ap[i];
            float* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; j++) ci[j] += api * bp[j];
        }
    }
}

}  // namespace kvalign
