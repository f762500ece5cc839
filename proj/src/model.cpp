// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/model.hpp"

#include "cogs/errors.hpp"

#include <type_traits>

namespace cogs {

using nlohmann::json;

namespace {

template <int D>
std::span<const double> flat(const std::vector<Eigen::Matrix<double, D, 1>>& v) {
    return {v.empty() ? nullptr : v.data()->data(), v.size() * D};
}

template <int D>
std::vector<Eigen::Matrix<double, D, 1>> unflat(const std::vector<double>& x) {
    if (x.size() % D != 0) throw CheckpointError("vector array length is not a multiple of its width");
    std::vector<Eigen::Matrix<double, D, 1>> v(x.size() / D);
    for (std::size_t i = 0; i < v.size(); ++i) {
        for (int d = 0; d < D; ++d) v[i][d] = x[i * D + static_cast<std::size_t>(d)];
    }
    return v;
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
Vec3 vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

json box_json(const SceneBox& b) { return {{"min", vec_json(b.min_corner)}, {"max", vec_json(b.max_corner)}}; }
SceneBox box_from(const json& j) { return {vec_from(j.at("min")), vec_from(j.at("max"))}; }

void put_adam(Checkpoint& ck, json& meta, const std::string& name, const AdamState& s) {
    ck.put(name + ".m", s.m);
    ck.put(name + ".v", s.v);
    meta[name] = {{"step", s.step}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps}, {"round_f32", s.round_f32}};
}

AdamState get_adam(const Checkpoint& ck, const json& meta, const std::string& name) {
    const json& j = meta.at(name);
    AdamState s;
    s.m = ck.get(name + ".m");
    s.v = ck.get(name + ".v", s.m.size());
    if (s.v.size() != s.m.size()) throw CheckpointError("optimizer moments of '" + name + "' differ in length");
    s.step = j.at("step").get<long>();
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.eps = j.at("eps").get<double>();
    s.round_f32 = j.at("round_f32").get<bool>();
    return s;
}

void put_mlp(Checkpoint& ck, json& meta, const std::string& name, const Mlp& net) {
    ck.put(name, net.params);
    meta[name] = net.layer_widths;
}

Mlp get_mlp(const Checkpoint& ck, const json& meta, const std::string& name) {
    Mlp net;
    net.layer_widths = meta.at(name).get<std::vector<int>>();
    net.params = ck.get(name);
    try {
        net.validate();
    } catch (const ConfigError& e) {
        throw CheckpointError("network '" + name + "': " + e.what());
    }
    return net;
}

json signal_json(const ControlSignal& s) {
    return {{"center", vec_json(s.center)},       {"direction", vec_json(s.direction)},
            {"start_proj", s.start_proj},         {"end_proj", s.end_proj},
            {"start_index", s.start_index},       {"end_index", s.end_index},
            {"sigma", s.sigma}};
}

ControlSignal signal_from(const json& j) {
    ControlSignal s;
    s.center = vec_from(j.at("center"));
    s.direction = vec_from(j.at("direction"));
    s.start_proj = j.at("start_proj").get<double>();
    s.end_proj = j.at("end_proj").get<double>();
    s.start_index = j.at("start_index").get<std::size_t>();
    s.end_index = j.at("end_index").get<std::size_t>();
    s.sigma = j.at("sigma").get<std::vector<double>>();
    return s;
}

}  // namespace

std::string to_string(Stage stage) {
    switch (stage) {
        case Stage::dynamic: return "dynamic";
        case Stage::masked: return "masked";
        case Stage::controlled: return "controlled";
        case Stage::finetuned: return "finetuned";
    }
    return "dynamic";
}

Stage stage_from_string(const std::string& name) {
    for (Stage s : {Stage::dynamic, Stage::masked, Stage::controlled, Stage::finetuned}) {
        if (to_string(s) == name) return s;
    }
    throw CheckpointError("unknown model stage '" + name + "'");
}

json config_to_json(const TrainConfig& config) {
    json j = json::object();
    config.visit([&](const char* name, const auto& v) { j[name] = v; });
    return j;
}

TrainConfig config_from_json(const json& j) {
    TrainConfig c;
    std::size_t seen = 0;
    c.visit([&](const char* name, auto& v) {
        if (!j.contains(name)) return;
        v = j.at(name).get<std::decay_t<decltype(v)>>();
        ++seen;
    });
    if (seen != j.size()) throw ConfigError("configuration has unknown keys");
    return c;
}

void Model::validate() const {
    const bool masks = state.cloud.has_masks();
    const bool named = !attribute_names.empty();
    if (stage == Stage::dynamic) {
        if (masks || named || rig) throw StateError("a dynamic model carries no mask or control sections");
        return;
    }
    if (!masks || !named) throw StateError("stage '" + to_string(stage) + "' needs learned masks");
    if (static_cast<int>(attribute_names.size()) + 1 != state.cloud.mask_count) {
        throw StateError("attribute names do not match the mask slots");
    }
    if (stage == Stage::masked) {
        if (rig) throw StateError("a masked model carries no control rig");
        return;
    }
    if (!rig) throw StateError("stage '" + to_string(stage) + "' needs a control rig");
    if (rig->attribute_count() != attribute_names.size()) throw StateError("control rig does not match the attributes");
    rig->validate(state.cloud);
}

Checkpoint to_checkpoint(const Model& model) {
    model.validate();
    Checkpoint ck;
    json& meta = ck.meta;
    const TrainerState& s = model.state;
    const GaussianCloud& c = s.cloud;
    const std::size_t n = c.count();

    meta["stage"] = to_string(model.stage);
    meta["config"] = config_to_json(model.config);
    meta["seed"] = model.seed;
    meta["times"] = model.times;
    meta["attribute_names"] = model.attribute_names;

    meta["cloud"] = {{"count", n}, {"sh_degree", c.sh_degree}, {"mask_count", c.mask_count}};
    ck.put("cloud.positions", flat(c.positions), {n, 3});
    ck.put("cloud.rotations", flat(c.rotations), {n, 4});
    ck.put("cloud.log_scales", flat(c.log_scales), {n, 3});
    ck.put("cloud.opacity_logits", c.opacity_logits, {n});
    ck.put("cloud.sh_coeffs", c.sh_coeffs, {n, static_cast<std::size_t>(c.sh_stride())});
    ck.put("cloud.mask_logits", c.mask_logits, {n, static_cast<std::size_t>(c.mask_count)});

    const DeformationModel& d = s.model;
    meta["deformation"] = {{"position_freqs", d.position_freqs}, {"time_freqs", d.time_freqs}, {"box", box_json(d.box)}};
    for (int k = 0; k < 4; ++k) put_mlp(ck, meta, "deform.net" + std::to_string(k), d.nets[static_cast<std::size_t>(k)]);

    meta["trainer"] = {{"iteration", s.iteration},
                       {"epoch_order", s.epoch_order},
                       {"epoch_pos", s.epoch_pos},
                       {"rng", rng_to_string(s.rng)},
                       {"densify_count", s.densify.count}};
    put_adam(ck, meta, "opt.positions", s.cloud_opt.positions);
    put_adam(ck, meta, "opt.rotations", s.cloud_opt.rotations);
    put_adam(ck, meta, "opt.log_scales", s.cloud_opt.log_scales);
    put_adam(ck, meta, "opt.opacity_logits", s.cloud_opt.opacity_logits);
    put_adam(ck, meta, "opt.sh_coeffs", s.cloud_opt.sh_coeffs);
    for (int k = 0; k < 4; ++k) put_adam(ck, meta, "opt.net" + std::to_string(k), s.net_opt[static_cast<std::size_t>(k)]);
    ck.put("densify.grad_sum", s.densify.grad_sum);
    ck.put("neighbor_positions", flat(s.neighbor_positions), {s.neighbor_positions.size(), 3});

    if (model.rig) {
        const ControlRig& rig = *model.rig;
        json attrs = json::array();
        for (std::size_t a = 0; a < rig.attribute_count(); ++a) {
            const ControlAttribute& attr = rig.attributes[a];
            json traj = json::array();
            for (const Vec3& p : attr.trajectory) traj.push_back(vec_json(p));
            attrs.push_back({{"name", attr.name},
                             {"slot", attr.slot},
                             {"control_set", attr.control_set},
                             {"times", attr.times},
                             {"trajectory", std::move(traj)},
                             {"signal", signal_json(attr.signal)}});
            put_mlp(ck, meta, "rig.net" + std::to_string(a), attr.net);
        }
        meta["rig"] = {{"sigma_freqs", rig.sigma_freqs},
                       {"position_freqs", rig.position_freqs},
                       {"gate", rig.gate},
                       {"box", box_json(rig.box)},
                       {"attributes", std::move(attrs)}};
    }
    return ck;
}

Model from_checkpoint(const Checkpoint& ck) {
    Model model;
    try {
        const json& meta = ck.meta;
        model.stage = stage_from_string(meta.at("stage").get<std::string>());
        model.config = config_from_json(meta.at("config"));
        model.seed = meta.at("seed").get<std::uint64_t>();
        model.times = meta.at("times").get<std::vector<double>>();
        model.attribute_names = meta.at("attribute_names").get<std::vector<std::string>>();

        TrainerState& s = model.state;
        GaussianCloud& c = s.cloud;
        const json& cm = meta.at("cloud");
        const auto n = cm.at("count").get<std::size_t>();
        c.sh_degree = cm.at("sh_degree").get<int>();
        c.mask_count = cm.at("mask_count").get<int>();
        c.positions = unflat<3>(ck.get("cloud.positions", n * 3));
        c.rotations = unflat<4>(ck.get("cloud.rotations", n * 4));
        c.log_scales = unflat<3>(ck.get("cloud.log_scales", n * 3));
        c.opacity_logits = ck.get("cloud.opacity_logits", n);
        c.sh_coeffs = ck.get("cloud.sh_coeffs");
        c.mask_logits = ck.get("cloud.mask_logits");

        const json& dm = meta.at("deformation");
        s.model.position_freqs = dm.at("position_freqs").get<int>();
        s.model.time_freqs = dm.at("time_freqs").get<int>();
        s.model.box = box_from(dm.at("box"));
        for (int k = 0; k < 4; ++k) {
            s.model.nets[static_cast<std::size_t>(k)] = get_mlp(ck, meta, "deform.net" + std::to_string(k));
        }

        const json& tm = meta.at("trainer");
        s.iteration = tm.at("iteration").get<long>();
        s.epoch_order = tm.at("epoch_order").get<std::vector<std::size_t>>();
        s.epoch_pos = tm.at("epoch_pos").get<std::size_t>();
        s.rng = rng_from_string(tm.at("rng").get<std::string>());
        s.densify.count = tm.at("densify_count").get<std::vector<int>>();
        s.cloud_opt.positions = get_adam(ck, meta, "opt.positions");
        s.cloud_opt.rotations = get_adam(ck, meta, "opt.rotations");
        s.cloud_opt.log_scales = get_adam(ck, meta, "opt.log_scales");
        s.cloud_opt.opacity_logits = get_adam(ck, meta, "opt.opacity_logits");
        s.cloud_opt.sh_coeffs = get_adam(ck, meta, "opt.sh_coeffs");
        for (int k = 0; k < 4; ++k) {
            s.net_opt[static_cast<std::size_t>(k)] = get_adam(ck, meta, "opt.net" + std::to_string(k));
        }
        s.densify.grad_sum = ck.get("densify.grad_sum");
        s.neighbor_positions = unflat<3>(ck.get("neighbor_positions"));

        if (meta.contains("rig")) {
            const json& rm = meta.at("rig");
            ControlRig rig;
            rig.sigma_freqs = rm.at("sigma_freqs").get<int>();
            rig.position_freqs = rm.at("position_freqs").get<int>();
            rig.gate = rm.at("gate").get<double>();
            rig.box = box_from(rm.at("box"));
            std::size_t a = 0;
            for (const json& j : rm.at("attributes")) {
                ControlAttribute attr;
                attr.name = j.at("name").get<std::string>();
                attr.slot = j.at("slot").get<int>();
                attr.control_set = j.at("control_set").get<std::vector<std::size_t>>();
                attr.times = j.at("times").get<std::vector<double>>();
                for (const json& p : j.at("trajectory")) attr.trajectory.push_back(vec_from(p));
                attr.signal = signal_from(j.at("signal"));
                attr.net = get_mlp(ck, meta, "rig.net" + std::to_string(a++));
                rig.attributes.push_back(std::move(attr));
            }
            model.rig = std::move(rig);
        }
        c.validate();
        s.model.validate();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata is malformed: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint content is inconsistent: ") + e.what());
    }
    try {
        model.validate();
    } catch (const std::runtime_error& e) {
        throw CheckpointError(std::string("checkpoint sections are inconsistent: ") + e.what());
    }
    return model;
}

void save_model(const std::filesystem::path& path, const Model& model) { save_checkpoint(path, to_checkpoint(model)); }

Model load_model(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

}  // namespace cogs
