#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace unveil {

// Error taxonomy shared by all modules. Everything derives from Error so
// callers can catch the whole family at the CLI boundary.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error("validation: " + msg) {}
};

struct ParamError : Error {
    explicit ParamError(const std::string& msg) : Error("param: " + msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};

// All randomness in the library flows through explicitly seeded engines;
// there is no global RNG state.
using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed) { return Rng(seed); }

// Derives an independent stream from a base seed, so that sub-systems
// seeded from the same config do not consume each other's draws.
inline uint64_t split_seed(uint64_t seed, uint64_t stream) {
    uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

}  // namespace unveil
