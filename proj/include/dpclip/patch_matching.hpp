#pragma once

// Four corner-anchored 5x5 windows over the 7x7 penultimate token grid, each
// prefixed with a copy of the CLS token and run through its own copy of the
// final backbone layer (frozen weights, own LayerNorms) and a linear head.

#include "dpclip/backbone.hpp"

#include <array>
#include <string>
#include <vector>

namespace dpclip {

enum class Corner { top_left = 0, top_right = 1, bottom_left = 2, bottom_right = 3 };

inline constexpr int kGridSide = 7;
inline constexpr int kWindowSide = 5;
inline constexpr int kNumCorners = 4;

const char* corner_name(Corner c);

struct PatchPartition {
    std::array<std::vector<int>, kNumCorners> indices;  // row-major cells, 25 each

    static PatchPartition corners();
    const std::vector<int>& of(Corner c) const { return indices[static_cast<std::size_t>(c)]; }
};

// [cls copy, 25 window tokens] per corner, in TL, TR, BL, BR order.
std::array<Var, kNumCorners> partition_grid(const Var& grid, const Var& cls);

struct LocalBranch {
    TransformerLayer layer;  // shares frozen weights with the final backbone layer
    Var proj_weight;         // [L_V, L_V], identity at init
    Var proj_bias;           // [L_V]

    Var forward(const Var& sequence) const;  // 1 x L_V
};

class PatchMatching {
public:
    PatchMatching() = default;
    PatchMatching(const BackboneConfig& config, const TransformerLayer& final_layer, ParameterStore& store);

    std::array<Var, kNumCorners> local_features(const std::array<Var, kNumCorners>& sequences) const;
    std::array<Var, kNumCorners> forward(const Var& penultimate_grid, const Var& penultimate_cls) const;

    const std::array<LocalBranch, kNumCorners>& branches() const { return branches_; }

private:
    std::array<LocalBranch, kNumCorners> branches_;
};

}  // namespace dpclip
