#pragma once

#include "dpclip/autograd.hpp"
#include "dpclip/tensor_file.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dpclip {

struct Parameter {
    std::string name;
    std::vector<std::int64_t> shape;  // canonical (checkpoint) shape
    Var var;
};

// Owns the registry of named parameters. Modules hold Var handles that share
// storage with the entries here, so assigning through the store is visible
// to every module.
class ParameterStore {
public:
    Var create(const std::string& name, Mat init, std::vector<std::int64_t> shape = {});
    // Shared weights are registered once, under their owner's name.
    const Parameter& at(const std::string& name) const;
    Parameter& at(const std::string& name);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<Parameter>& all() const { return params_; }
    std::vector<Parameter>& all() { return params_; }

    std::int64_t count_scalars(const std::string& prefix = "") const;

    // Copies values from a tensor file, validating each expected name and shape.
    void load_from(const TensorFile& file, const std::string& prefix);
    void save_to(TensorFile& file, const std::vector<std::string>& names) const;

private:
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

enum class Tier { norm, module, frozen };

const char* tier_name(Tier t);

struct ParameterPolicy {
    std::map<std::string, Tier> tiers;

    std::vector<std::string> names_in(Tier t) const;
    Tier tier_of(const std::string& name) const;
};

// Backbone ("visual." / "text.") tensors are frozen except the visual tower's
// LayerNorm affine parameters; the text tower is frozen entirely. Everything
// else belongs to an added module.
ParameterPolicy classify_parameters(const ParameterStore& store);

bool is_backbone_name(const std::string& name);
bool is_visual_norm_name(const std::string& name);

// Sets requires_grad on every parameter according to its tier.
void apply_policy(ParameterStore& store, const ParameterPolicy& policy);

// Order-sensitive hash over the bytes of the named parameters.
std::uint64_t hash_parameters(const ParameterStore& store, const std::vector<std::string>& names);

}  // namespace dpclip
