#include <fstream>
#include <sstream>

#include "fedos/bytes.hpp"
#include "fedos/weights.hpp"

namespace fedos {

std::string encode_fsw1(const std::vector<RawTensor>& tensors, const std::optional<std::string>& metadata) {
    ByteWriter w;
    w.raw("FSW1");
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.shape.size() > 255) {
            throw ShapeError(t.name, "rank exceeds 255");
        }
        if (static_cast<Index>(t.values.size()) != shape_size(t.shape)) {
            throw ShapeError(t.name, "payload size does not match shape");
        }
        w.str(t.name);
        w.u8(static_cast<std::uint8_t>(t.shape.size()));
        for (auto d : t.shape) {
            w.u32(static_cast<std::uint32_t>(d));
        }
        for (float v : t.values) {
            w.f32(v);
        }
    }
    if (metadata) {
        w.raw("META");
        w.str(*metadata);
    }
    return w.take();
}

Fsw1Contents decode_fsw1(const std::string& bytes) {
    ByteReader r(bytes, "FSW1");
    r.expect_magic("FSW1");
    Fsw1Contents out;
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        RawTensor t;
        t.name = r.str();
        const auto rank = r.u8();
        for (int d = 0; d < rank; ++d) {
            t.shape.push_back(static_cast<Index>(r.u32()));
        }
        t.values.resize(static_cast<std::size_t>(shape_size(t.shape)));
        for (auto& v : t.values) {
            v = r.f32();
        }
        out.tensors.push_back(std::move(t));
    }
    if (!r.done()) {
        r.expect_magic("META");
        out.metadata = r.str();
    }
    return out;
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw IoError("cannot open " + path + " for writing");
    }
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw IoError("write failed: " + path);
    }
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path);
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace fedos
