#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lmt/common.hpp"

namespace lmt {

// Binary tensor container:
//   "LMTC" | version u32 | count u64 |
//   entries: name_len u32, name bytes, dtype u32 {0 f32, 1 f64, 2 i64},
//            rank u32, dims u64..., row-major little-endian payload |
//   crc32 u32 of all prior bytes
enum class Dtype : uint32_t { F32 = 0, F64 = 1, I64 = 2 };

struct TensorBlob {
    Dtype dtype = Dtype::F32;
    std::vector<int64_t> dims;
    std::vector<float> f32;
    std::vector<double> f64;
    std::vector<int64_t> i64;

    int64_t numel() const {
        int64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }

    static TensorBlob from_f32(std::vector<int64_t> dims, std::vector<float> v) {
        TensorBlob b;
        b.dtype = Dtype::F32;
        b.dims = std::move(dims);
        b.f32 = std::move(v);
        return b;
    }
    static TensorBlob from_f64(std::vector<int64_t> dims, std::vector<double> v) {
        TensorBlob b;
        b.dtype = Dtype::F64;
        b.dims = std::move(dims);
        b.f64 = std::move(v);
        return b;
    }
    static TensorBlob from_i64(std::vector<int64_t> dims, std::vector<int64_t> v) {
        TensorBlob b;
        b.dtype = Dtype::I64;
        b.dims = std::move(dims);
        b.i64 = std::move(v);
        return b;
    }
};

// std::map keeps serialization order deterministic
using NamedTensors = std::map<std::string, TensorBlob>;

inline constexpr uint32_t kCheckpointVersion = 1;

uint32_t crc32(const uint8_t *data, size_t len, uint32_t seed = 0);

std::vector<uint8_t> serialize_checkpoint(const NamedTensors &tensors);
NamedTensors deserialize_checkpoint(const std::vector<uint8_t> &bytes);

void save_checkpoint(const std::string &path, const NamedTensors &tensors);
// prefix "" loads everything; otherwise only entries whose name starts with prefix
NamedTensors load_checkpoint(const std::string &path, const std::string &prefix = "");

}  // namespace lmt
