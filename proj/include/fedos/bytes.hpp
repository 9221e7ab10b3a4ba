#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "fedos/error.hpp"

namespace fedos {

/// Little-endian append-only encoder for the binary containers.
class ByteWriter {
public:
    void raw(std::string_view s) { out_.append(s); }

    template <class T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        char buf[sizeof(T)];
        std::memcpy(buf, &value, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
        }
        out_.append(buf, sizeof(T));
    }

    void u8(std::uint8_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f32(float v) { put(v); }
    void f64(double v) { put(v); }

    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s);
    }

    const std::string& bytes() const { return out_; }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class ByteReader {
public:
    ByteReader(std::string_view data, std::string context) : data_(data), context_(std::move(context)) {}

    std::string_view raw(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    template <class T>
    T get() {
        need(sizeof(T));
        char buf[sizeof(T)];
        std::memcpy(buf, data_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
        }
        pos_ += sizeof(T);
        T v;
        std::memcpy(&v, buf, sizeof(T));
        return v;
    }

    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    float f32() { return get<float>(); }
    double f64() { return get<double>(); }
    std::string str() { return std::string(raw(u32())); }

    void expect_magic(std::string_view magic) {
        if (raw(magic.size()) != magic) {
            throw IoError(context_ + ": bad magic, expected " + std::string(magic));
        }
    }

    bool done() const { return pos_ == data_.size(); }
    std::size_t remaining() const { return data_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw IoError(context_ + ": truncated at byte " + std::to_string(pos_) + ", needed " +
                          std::to_string(n) + " more");
        }
    }

    std::string_view data_;
    std::size_t pos_ = 0;
    std::string context_;
};

} // namespace fedos
