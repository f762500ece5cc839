// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/dataset.hpp"

#include "cogs/errors.hpp"
#include "cogs/parallel.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace cogs {

using nlohmann::json;

std::vector<double> Dataset::times() const {
    std::vector<double> t;
    for (const Frame& f : frames) t.push_back(f.time);
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    return t;
}

void Dataset::validate() const {
    if (frames.empty()) throw ConfigError("dataset split '" + split + "' has no frames");
    for (const Frame& f : frames) {
        if (f.image.width != width || f.image.height != height || f.image.channels != 3) {
            throw ConfigError("frame " + f.id + " does not match the dataset resolution");
        }
        if (f.camera.width != width || f.camera.height != height) {
            throw ConfigError("frame " + f.id + " camera does not match the dataset resolution");
        }
    }
}

namespace {

Mat4 parse_pose(const json& m, const std::string& frame) {
    if (!m.is_array() || m.size() < 3) throw IngestionError(frame + ": transform_matrix must be a 4x4 array");
    Mat4 pose = Mat4::Identity();
    for (int r = 0; r < static_cast<int>(std::min<std::size_t>(m.size(), 4)); ++r) {
        const json& row = m[static_cast<std::size_t>(r)];
        if (!row.is_array() || row.size() != 4) throw IngestionError(frame + ": transform_matrix rows must have 4 entries");
        for (int c = 0; c < 4; ++c) {
            if (!row[static_cast<std::size_t>(c)].is_number()) throw IngestionError(frame + ": non-numeric pose entry");
            pose(r, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
    }
    if (!pose.allFinite()) throw IngestionError(frame + ": pose has non-finite entries");
    const Mat3 rot = pose.block<3, 3>(0, 0);
    const double det = rot.determinant();
    if (!(std::abs(det) > 1e-6)) throw IngestionError(frame + ": pose is not invertible");
    // Remove drift from text round-trips: nearest rotation by SVD.
    Eigen::JacobiSVD<Mat3> svd(rot, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 fixed = svd.matrixU() * svd.matrixV().transpose();
    if (fixed.determinant() < 0.0) throw IngestionError(frame + ": pose rotation is a reflection");
    pose.block<3, 3>(0, 0) = fixed;
    pose.row(3) << 0, 0, 0, 1;
    return pose;
}

std::filesystem::path resolve_image(const std::filesystem::path& root, const std::string& file_path) {
    std::filesystem::path p = root / file_path;
    if (!p.has_extension()) p += ".png";
    return p.lexically_normal();
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& root, const std::string& split, const Vec3& background) {
    const auto meta_path = root / ("transforms_" + split + ".json");
    std::ifstream in(meta_path);
    if (!in) throw IngestionError("missing " + meta_path.string());
    json meta;
    try {
        meta = json::parse(in);
    } catch (const json::exception& e) {
        throw IngestionError(meta_path.string() + ": malformed JSON: " + e.what());
    }
    if (!meta.contains("camera_angle_x") || !meta["camera_angle_x"].is_number()) {
        throw IngestionError(meta_path.string() + ": camera_angle_x missing");
    }
    const double angle_x = meta["camera_angle_x"].get<double>();
    if (!(angle_x > 0.0 && angle_x < std::numbers::pi)) throw IngestionError(meta_path.string() + ": camera_angle_x out of range");
    if (!meta.contains("frames") || !meta["frames"].is_array() || meta["frames"].empty()) {
        throw IngestionError(meta_path.string() + ": no frames");
    }
    const json& jframes = meta["frames"];
    const std::size_t n = jframes.size();

    Dataset ds;
    ds.split = split;
    ds.frames.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const json& jf = jframes[k];
        Frame& f = ds.frames[k];
        const std::string label = "frame " + std::to_string(k);
        if (!jf.contains("file_path") || !jf["file_path"].is_string()) throw IngestionError(label + ": file_path missing");
        f.path = resolve_image(root, jf["file_path"].get<std::string>());
        f.id = f.path.stem().string();
        if (!jf.contains("transform_matrix")) throw IngestionError(label + " (" + f.id + "): transform_matrix missing");
        f.camera.cam_to_world = parse_pose(jf["transform_matrix"], label + " (" + f.id + ")");
        if (jf.contains("time")) {
            if (!jf["time"].is_number()) throw IngestionError(label + " (" + f.id + "): time is not a number");
            f.raw_time = jf["time"].get<double>();
        } else {
            f.raw_time = n > 1 ? static_cast<double>(k) / static_cast<double>(n - 1) : 0.0;
        }
        f.time = f.raw_time;
    }

    std::vector<std::string> errors(n);
    parallel_for(n, [&](std::size_t k) {
        Frame& f = ds.frames[k];
        try {
            f.image = composite_over(decode_png(f.path), background[0], background[1], background[2]);
        } catch (const CodecError& e) {
            errors[k] = "frame " + f.id + ": " + e.what();
        }
    });
    for (const auto& e : errors) {
        if (!e.empty()) throw IngestionError(e);
    }

    ds.width = ds.frames.front().image.width;
    ds.height = ds.frames.front().image.height;
    const double focal = 0.5 * ds.width / std::tan(0.5 * angle_x);
    for (Frame& f : ds.frames) {
        if (f.image.width != ds.width || f.image.height != ds.height) {
            throw IngestionError("frame " + f.id + ": resolution differs from the first frame");
        }
        f.camera.width = ds.width;
        f.camera.height = ds.height;
        f.camera.fx = f.camera.fy = focal;
        f.camera.cx = 0.5 * ds.width;
        f.camera.cy = 0.5 * ds.height;
    }

    const auto [lo, hi] = std::minmax_element(ds.frames.begin(), ds.frames.end(),
                                              [](const Frame& a, const Frame& b) { return a.raw_time < b.raw_time; });
    const double t_min = lo->raw_time, t_max = hi->raw_time;
    if (t_min < 0.0 || t_max > 1.0) {
        const double span = t_max - t_min;
        for (Frame& f : ds.frames) f.time = span > 0.0 ? (f.raw_time - t_min) / span : 0.0;
    }
    std::stable_sort(ds.frames.begin(), ds.frames.end(), [](const Frame& a, const Frame& b) { return a.time < b.time; });
    return ds;
}

// ---------------------------------------------------------------------------

void MaskSupervision::validate(const Dataset& dataset) const {
    if (masks.size() != attribute_names.size()) throw ConfigError("mask supervision lists disagree in length");
    for (std::size_t a = 0; a < masks.size(); ++a) {
        if (masks[a].empty()) throw ConfigError("attribute '" + attribute_names[a] + "' has no supervision masks");
        for (const auto& [frame, img] : masks[a]) {
            if (frame >= dataset.frames.size()) throw ConfigError("mask references a missing frame");
            if (img.width != dataset.width || img.height != dataset.height || img.channels != 1) {
                throw ConfigError("mask for attribute '" + attribute_names[a] + "' has the wrong shape");
            }
        }
    }
}

MaskSupervision load_masks(const std::filesystem::path& root, const Dataset& dataset) {
    const auto dir = root / "masks";
    if (!std::filesystem::is_directory(dir)) throw IngestionError("missing mask directory " + dir.string());
    std::vector<std::filesystem::path> attr_dirs;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_directory()) attr_dirs.push_back(entry.path());
    }
    std::sort(attr_dirs.begin(), attr_dirs.end());
    if (attr_dirs.empty()) throw IngestionError(dir.string() + " has no attribute directories");

    std::map<std::string, std::size_t> frame_by_id;
    for (std::size_t k = 0; k < dataset.frames.size(); ++k) frame_by_id.emplace(dataset.frames[k].id, k);

    MaskSupervision sup;
    for (const auto& adir : attr_dirs) {
        sup.attribute_names.push_back(adir.filename().string());
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(adir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        auto& list = sup.masks.emplace_back();
        for (const auto& file : files) {
            const auto it = frame_by_id.find(file.stem().string());
            if (it == frame_by_id.end()) {
                throw IngestionError(file.string() + ": no frame '" + file.stem().string() + "' in split " + dataset.split);
            }
            Image img;
            try {
                img = decode_png(file);
            } catch (const CodecError& e) {
                throw IngestionError(e.what());
            }
            if (img.channels != 1) img = extract_channel(img, 0);
            if (img.width != dataset.width || img.height != dataset.height) {
                throw IngestionError(file.string() + ": mask size differs from the frames");
            }
            list.emplace_back(it->second, std::move(img));
        }
        if (list.empty()) throw IngestionError(adir.string() + " contains no masks");
    }
    return sup;
}

// ---------------------------------------------------------------------------

void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
    ds.validate();
    std::filesystem::create_directories(root / ds.split);
    const Camera& cam0 = ds.frames.front().camera;
    json meta;
    meta["camera_angle_x"] = 2.0 * std::atan(0.5 * cam0.width / cam0.fx);
    meta["frames"] = json::array();
    for (const Frame& f : ds.frames) {
        const auto rel = std::filesystem::path(ds.split) / f.id;
        encode_png(f.image, root / (rel.string() + ".png"));
        json jf;
        jf["file_path"] = "./" + rel.string();
        jf["time"] = f.time;
        json m = json::array();
        for (int r = 0; r < 4; ++r) {
            json row = json::array();
            for (int c = 0; c < 4; ++c) row.push_back(f.camera.cam_to_world(r, c));
            m.push_back(row);
        }
        jf["transform_matrix"] = m;
        meta["frames"].push_back(jf);
    }
    std::ofstream out(root / ("transforms_" + ds.split + ".json"));
    if (!out) throw IngestionError("cannot write " + (root / ("transforms_" + ds.split + ".json")).string());
    out << meta.dump(2) << '\n';
}

void write_masks(const std::filesystem::path& root, const Dataset& ds, const MaskSupervision& sup) {
    sup.validate(ds);
    for (std::size_t a = 0; a < sup.attribute_count(); ++a) {
        const auto dir = root / "masks" / sup.attribute_names[a];
        std::filesystem::create_directories(dir);
        for (const auto& [frame, img] : sup.masks[a]) encode_png(img, dir / (ds.frames[frame].id + ".png"));
    }
}

}  // namespace cogs
