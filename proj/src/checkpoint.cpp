#include "lmt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace lmt {

namespace {

// CRC-32 (IEEE 802.3, reflected, same polynomial as zlib)
const uint32_t *crc_table() {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    return table;
}

void put_u32(std::vector<uint8_t> &out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t> &out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

struct Reader {
    const std::vector<uint8_t> &buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("truncated checkpoint");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(buf[pos + size_t(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(buf[pos + size_t(i)]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char *>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

uint32_t crc32(const uint8_t *data, size_t len, uint32_t seed) {
    const uint32_t *t = crc_table();
    uint32_t c = seed ^ 0xffffffffu;
    for (size_t i = 0; i < len; ++i) c = t[(c ^ data[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

std::vector<uint8_t> serialize_checkpoint(const NamedTensors &tensors) {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'L', 'M', 'T', 'C'});
    put_u32(out, kCheckpointVersion);
    put_u64(out, uint64_t(tensors.size()));
    for (const auto &[name, blob] : tensors) {
        put_u32(out, uint32_t(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_u32(out, uint32_t(blob.dtype));
        put_u32(out, uint32_t(blob.dims.size()));
        for (int64_t d : blob.dims) put_u64(out, uint64_t(d));
        switch (blob.dtype) {
            case Dtype::F32:
                if (int64_t(blob.f32.size()) != blob.numel())
                    throw CheckpointError("payload size mismatch for " + name);
                for (float v : blob.f32) put_u32(out, std::bit_cast<uint32_t>(v));
                break;
            case Dtype::F64:
                if (int64_t(blob.f64.size()) != blob.numel())
                    throw CheckpointError("payload size mismatch for " + name);
                for (double v : blob.f64) put_u64(out, std::bit_cast<uint64_t>(v));
                break;
            case Dtype::I64:
                if (int64_t(blob.i64.size()) != blob.numel())
                    throw CheckpointError("payload size mismatch for " + name);
                for (int64_t v : blob.i64) put_u64(out, uint64_t(v));
                break;
        }
    }
    put_u32(out, crc32(out.data(), out.size()));
    return out;
}

NamedTensors deserialize_checkpoint(const std::vector<uint8_t> &bytes) {
    if (bytes.size() < 4 + 4 + 8 + 4) throw CheckpointError("truncated checkpoint");
    if (std::memcmp(bytes.data(), "LMTC", 4) != 0) throw CheckpointError("bad magic");
    {
        const size_t body = bytes.size() - 4;
        uint32_t stored = 0;
        for (int i = 0; i < 4; ++i) stored |= uint32_t(bytes[body + size_t(i)]) << (8 * i);
        if (crc32(bytes.data(), body) != stored) throw CheckpointError("crc mismatch");
    }
    Reader r{bytes, 4};
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported version " + std::to_string(version));
    const uint64_t count = r.u64();
    NamedTensors out;
    for (uint64_t e = 0; e < count; ++e) {
        const uint32_t name_len = r.u32();
        std::string name = r.str(name_len);
        const uint32_t dtype = r.u32();
        if (dtype > 2) throw CheckpointError("bad dtype code for " + name);
        const uint32_t rank = r.u32();
        TensorBlob blob;
        blob.dtype = Dtype(dtype);
        int64_t n = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            blob.dims.push_back(int64_t(r.u64()));
            n *= blob.dims.back();
        }
        switch (blob.dtype) {
            case Dtype::F32:
                blob.f32.reserve(size_t(n));
                for (int64_t i = 0; i < n; ++i) blob.f32.push_back(std::bit_cast<float>(r.u32()));
                break;
            case Dtype::F64:
                blob.f64.reserve(size_t(n));
                for (int64_t i = 0; i < n; ++i) blob.f64.push_back(std::bit_cast<double>(r.u64()));
                break;
            case Dtype::I64:
                blob.i64.reserve(size_t(n));
                for (int64_t i = 0; i < n; ++i) blob.i64.push_back(int64_t(r.u64()));
                break;
        }
        out.emplace(std::move(name), std::move(blob));
    }
    if (r.pos != bytes.size() - 4) throw CheckpointError("trailing bytes before crc");
    return out;
}

void save_checkpoint(const std::string &path, const NamedTensors &tensors) {
    const auto bytes = serialize_checkpoint(tensors);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char *>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw CheckpointError("short write to " + path);
}

NamedTensors load_checkpoint(const std::string &path, const std::string &prefix) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    NamedTensors all = deserialize_checkpoint(bytes);
    if (prefix.empty()) return all;
    NamedTensors filtered;
    for (auto &[name, blob] : all)
        if (name.rfind(prefix, 0) == 0) filtered.emplace(name, std::move(blob));
    return filtered;
}

}  // namespace lmt
