// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/checkpoint.hpp"

#include "cogs/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>

namespace cogs {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'C', 'O', 'G', 'S'};
constexpr std::size_t kPrefix = 16;

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T read_le(const std::uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

}  // namespace

std::size_t CheckpointArray::element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void Checkpoint::put(const std::string& name, std::span<const double> values, std::vector<std::size_t> shape) {
    if (has(name)) throw CheckpointError("duplicate checkpoint array '" + name + "'");
    if (shape.empty()) shape = {values.size()};
    CheckpointArray a{name, std::move(shape), {}};
    if (a.element_count() != values.size()) throw CheckpointError("shape of '" + name + "' does not match its data");
    a.data.reserve(values.size());
    for (double v : values) a.data.push_back(static_cast<float>(v));
    arrays.push_back(std::move(a));
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return true;
    }
    return false;
}

const CheckpointArray& Checkpoint::array(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return a;
    }
    throw CheckpointError("checkpoint has no array '" + name + "'");
}

std::vector<double> Checkpoint::get(const std::string& name, std::size_t expected) const {
    const CheckpointArray& a = array(name);
    if (expected != 0 && a.data.size() != expected) {
        throw CheckpointError("array '" + name + "' has " + std::to_string(a.data.size()) + " values, expected " +
                              std::to_string(expected));
    }
    return {a.data.begin(), a.data.end()};
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
    json header;
    header["meta"] = ck.meta;
    json list = json::array();
    std::size_t offset = 0;
    for (const auto& a : ck.arrays) {
        if (a.element_count() != a.data.size()) throw CheckpointError("shape of '" + a.name + "' does not match its data");
        list.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
        offset += a.data.size() * sizeof(float);
    }
    header["arrays"] = std::move(list);
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kPrefix + text.size() + offset);
    out.insert(out.end(), kMagic, kMagic + 4);
    append_le<std::uint32_t>(out, kCheckpointVersion);
    append_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& a : ck.arrays) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(a.data.data());
        out.insert(out.end(), p, p + a.data.size() * sizeof(float));
    }
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw CheckpointMagicError("not a cogs checkpoint (bad magic)");
    }
    if (bytes.size() < kPrefix) throw CheckpointTruncationError("checkpoint ends inside its prefix");
    const auto version = read_le<std::uint32_t>(bytes.data() + 4);
    if (version != kCheckpointVersion) {
        throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = read_le<std::uint64_t>(bytes.data() + 8);
    if (header_len > bytes.size() - kPrefix) throw CheckpointTruncationError("checkpoint ends inside its header");

    const auto* text = reinterpret_cast<const char*>(bytes.data() + kPrefix);
    json header;
    try {
        header = json::parse(text, text + header_len);
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }

    Checkpoint ck;
    const std::size_t base = kPrefix + header_len;
    const std::size_t payload = bytes.size() - base;
    std::size_t expected = 0;
    try {
        ck.meta = header.at("meta");
        for (const json& entry : header.at("arrays")) {
            CheckpointArray a;
            a.name = entry.at("name").get<std::string>();
            a.shape = entry.at("shape").get<std::vector<std::size_t>>();
            const auto offset = entry.at("offset").get<std::size_t>();
            const std::size_t n = a.element_count();
            if (offset != expected) throw CheckpointError("array '" + a.name + "' is not contiguous");
            if (n > (payload - std::min(offset, payload)) / sizeof(float)) {
                throw CheckpointTruncationError("payload too short for array '" + a.name + "'");
            }
            a.data.resize(n);
            std::memcpy(a.data.data(), bytes.data() + base + offset, n * sizeof(float));
            expected = offset + n * sizeof(float);
            ck.arrays.push_back(std::move(a));
        }
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (expected != payload) {
        throw CheckpointTruncationError("payload holds " + std::to_string(payload) + " bytes, header declares " +
                                        std::to_string(expected));
    }
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const std::vector<std::uint8_t> bytes = encode_checkpoint(checkpoint);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace cogs
