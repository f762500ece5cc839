// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/gaussian.hpp"
#include "cogs/image.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cogs {

struct Frame {
    std::string id;  // file stem, used to match mask files
    std::filesystem::path path;
    Camera camera;
    double time = 0.0;      // normalized to [0, 1]
    double raw_time = 0.0;  // as stored in the source file
    Image image;            // rgb, composited over the dataset background
};

struct Dataset {
    std::string split;
    int width = 0;
    int height = 0;
    std::vector<Frame> frames;  // stable-sorted by time

    /// Distinct frame times, ascending.
    std::vector<double> times() const;
    /// Throws ConfigError when empty or when frame sizes disagree.
    void validate() const;
};

/// Reads <root>/transforms_<split>.json in the D-NeRF layout. Images with
/// alpha are composited over `background`. Times stored outside [0, 1] are
/// rescaled by the observed range; a missing time becomes index / (count - 1).
/// Throws IngestionError naming the offending frame.
Dataset load_dataset(const std::filesystem::path& root, const std::string& split,
                     const Vec3& background = Vec3::Ones());

/// Per-attribute 2D mask supervision: for every attribute, a list of
/// (frame index, single-channel mask) pairs.
struct MaskSupervision {
    std::vector<std::string> attribute_names;
    std::vector<std::vector<std::pair<std::size_t, Image>>> masks;  // parallel to attribute_names

    std::size_t attribute_count() const { return attribute_names.size(); }
    void validate(const Dataset& dataset) const;
};

/// Reads <root>/masks/<attribute>/<frame id>.png for every attribute
/// directory, attributes sorted by name. Throws IngestionError when a mask
/// names a frame that is not in the dataset or has the wrong size.
MaskSupervision load_masks(const std::filesystem::path& root, const Dataset& dataset);

/// Writes a dataset in the layout load_dataset reads (PNG images, camera
/// angle from fx). Used for generated scenes.
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);
void write_masks(const std::filesystem::path& root, const Dataset& dataset, const MaskSupervision& masks);

}  // namespace cogs
