#include "dpclip/params.hpp"

#include "dpclip/errors.hpp"
#include "dpclip/rng.hpp"

#include <cstring>

namespace dpclip {

Var ParameterStore::create(const std::string& name, Mat init, std::vector<std::int64_t> shape) {
    if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    if (shape.empty()) shape = {init.rows(), init.cols()};
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    if (n != init.size()) throw ShapeError("parameter '" + name + "': shape " + shape_string(shape) + " vs matrix size");
    Var v = Var::leaf(std::move(init), true);
    index_[name] = params_.size();
    params_.push_back(Parameter{name, std::move(shape), v});
    return v;
}

const Parameter& ParameterStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second];
}

Parameter& ParameterStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second];
}

std::int64_t ParameterStore::count_scalars(const std::string& prefix) const {
    std::int64_t n = 0;
    for (const auto& p : params_) {
        if (p.name.rfind(prefix, 0) == 0) n += p.var.value().size();
    }
    return n;
}

void ParameterStore::load_from(const TensorFile& file, const std::string& prefix) {
    for (auto& p : params_) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        const Tensor& t = file.expect(p.name, p.shape);
        Mat& dst = p.var.mutable_value();
        std::copy(t.data.begin(), t.data.end(), dst.data());
    }
}

void ParameterStore::save_to(TensorFile& file, const std::vector<std::string>& names) const {
    for (const auto& n : names) {
        const auto& p = at(n);
        file.put(n, p.var.value(), p.shape, DType::F64);
    }
}

const char* tier_name(Tier t) {
    switch (t) {
        case Tier::norm: return "norm_tier";
        case Tier::module: return "module_tier";
        case Tier::frozen: return "frozen";
    }
    return "frozen";
}

std::vector<std::string> ParameterPolicy::names_in(Tier t) const {
    std::vector<std::string> out;
    for (const auto& [name, tier] : tiers) {
        if (tier == t) out.push_back(name);
    }
    return out;
}

Tier ParameterPolicy::tier_of(const std::string& name) const {
    auto it = tiers.find(name);
    if (it == tiers.end()) throw ConfigError("parameter '" + name + "' is in no group");
    return it->second;
}

bool is_backbone_name(const std::string& name) {
    return name.rfind("visual.", 0) == 0 || name.rfind("text.", 0) == 0;
}

bool is_visual_norm_name(const std::string& name) {
    if (name.rfind("visual.", 0) != 0) return false;
    return name.find(".ln_") != std::string::npos;
}

ParameterPolicy classify_parameters(const ParameterStore& store) {
    ParameterPolicy policy;
    for (const auto& p : store.all()) {
        Tier t = Tier::module;
        if (is_backbone_name(p.name)) t = is_visual_norm_name(p.name) ? Tier::norm : Tier::frozen;
        policy.tiers[p.name] = t;
    }
    return policy;
}

void apply_policy(ParameterStore& store, const ParameterPolicy& policy) {
    for (auto& p : store.all()) p.var.set_requires_grad(policy.tier_of(p.name) != Tier::frozen);
}

std::uint64_t hash_parameters(const ParameterStore& store, const std::vector<std::string>& names) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& n : names) {
        const Mat& m = store.at(n).var.value();
        std::string bytes(n);
        bytes.resize(n.size() + static_cast<std::size_t>(m.size()) * sizeof(double));
        std::memcpy(bytes.data() + n.size(), m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
        h = fnv1a64(bytes, h);
    }
    return h;
}

}  // namespace dpclip
