#pragma once

// Small shared pieces: fixed-size vectors, quaternions, a deterministic RNG,
// and the error types thrown across the library. Everything numeric is f64.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace splatflow {

struct Error : std::runtime_error {
    explicit Error(const std::string &msg) : std::runtime_error(msg) {}
};

// A computation produced a non-finite value; `op` names the operation.
struct NumericError : Error {
    NumericError(const std::string &op, const std::string &detail)
        : Error("non-finite value in '" + op + "': " + detail), op_name(op) {}
    std::string op_name;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ArgumentError : Error {
    using Error::Error;
};

// Query lies outside the domain an operation is defined on (e.g. a point
// behind the camera, or inside an obstacle for an analytic field).
struct DomainError : Error {
    using Error::Error;
};

struct StructureError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    double &operator[](int i) { return (&x)[i]; }
    double operator[](int i) const { return (&x)[i]; }

    Vec3 operator+(const Vec3 &o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3 &o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3 &operator+=(const Vec3 &o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3 &operator-=(const Vec3 &o) { x -= o.x; y -= o.y; z -= o.z; return *this; }

    double dot(const Vec3 &o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    double norm2() const { return dot(*this); }
};

inline Vec3 operator*(double s, const Vec3 &v) { return v * s; }

struct Vec4 {
    double x = 0.0, y = 0.0, z = 0.0, w = 0.0;
    double &operator[](int i) { return (&x)[i]; }
    double operator[](int i) const { return (&x)[i]; }
};

// Row-major 3x3.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    double &operator()(int r, int c) { return m[r * 3 + c]; }
    double operator()(int r, int c) const { return m[r * 3 + c]; }

    Vec3 operator*(const Vec3 &v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 operator*(const Mat3 &o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }
};

// 3 rows x 4 cols, used for velocity Jacobians (columns: x, y, z, t).
struct Mat3x4 {
    std::array<double, 12> m{};
    double &operator()(int r, int c) { return m[r * 4 + c]; }
    double operator()(int r, int c) const { return m[r * 4 + c]; }

    Vec3 col(int c) const { return {m[c], m[4 + c], m[8 + c]}; }
    Mat3 spatial() const {
        Mat3 s;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) s(i, j) = (*this)(i, j);
        return s;
    }
};

// Unit quaternion (w, x, y, z).
struct Quat {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

    Mat3 to_matrix() const {
        Mat3 r;
        double xx = x * x, yy = y * y, zz = z * z;
        double xy = x * y, xz = x * z, yz = y * z;
        double wx = w * x, wy = w * y, wz = w * z;
        r(0, 0) = 1 - 2 * (yy + zz);
        r(0, 1) = 2 * (xy - wz);
        r(0, 2) = 2 * (xz + wy);
        r(1, 0) = 2 * (xy + wz);
        r(1, 1) = 1 - 2 * (xx + zz);
        r(1, 2) = 2 * (yz - wx);
        r(2, 0) = 2 * (xz - wy);
        r(2, 1) = 2 * (yz + wx);
        r(2, 2) = 1 - 2 * (xx + yy);
        return r;
    }

    Quat normalized() const {
        double n = std::sqrt(w * w + x * x + y * y + z * z);
        if (n == 0) throw ArgumentError("cannot normalize zero quaternion");
        return {w / n, x / n, y / n, z / n};
    }
};

// xoshiro256++ with splitmix64 seeding. Hand-rolled so that streams are
// bit-identical across platforms and standard-library versions.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t s = seed;
        for (auto &word : state_) {
            s += 0x9e3779b97f4a7c15ull;
            uint64_t z = s;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            word = z ^ (z >> 31);
        }
    }

    uint64_t next() {
        auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
        uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return next() % n; }

    // Standard normal via Box-Muller (no cached spare: keeps the stream's
    // consumption pattern obvious).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

  private:
    std::array<uint64_t, 4> state_{};
};

inline void check_finite(double v, const char *op, const char *detail = "") {
    if (!std::isfinite(v)) throw NumericError(op, detail);
}

// Thread count for the few parallel regions (rasterizer tiles). Controlled
// by SPLATFLOW_THREADS; unset or 0 means one thread.
int thread_count();

}  // namespace splatflow
