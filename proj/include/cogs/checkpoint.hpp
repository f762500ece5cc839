// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cogs {

// Container layout: "COGS", u32 LE version, u64 LE header length, UTF-8 JSON
// header, then the float32 LE arrays in header order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointArray {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t element_count() const;
};

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<CheckpointArray> arrays;

    /// Stores doubles as float32; values off the float32 grid are rounded.
    void put(const std::string& name, std::span<const double> values, std::vector<std::size_t> shape = {});
    bool has(const std::string& name) const;
    const CheckpointArray& array(const std::string& name) const;
    /// Array values widened to double. Throws CheckpointError when missing or
    /// when the element count differs from expected (unless expected is 0).
    std::vector<double> get(const std::string& name, std::size_t expected = 0) const;
};

/// Atomic: writes path + ".tmp" and renames it over path.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws CheckpointMagicError, CheckpointVersionError or CheckpointTruncationError
/// for the respective defects, CheckpointError for anything else.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace cogs
