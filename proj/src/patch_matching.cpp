#include "dpclip/patch_matching.hpp"

#include "dpclip/errors.hpp"

namespace dpclip {

const char* corner_name(Corner c) {
    switch (c) {
        case Corner::top_left: return "TL";
        case Corner::top_right: return "TR";
        case Corner::bottom_left: return "BL";
        case Corner::bottom_right: return "BR";
    }
    return "?";
}

PatchPartition PatchPartition::corners() {
    constexpr int offset = kGridSide - kWindowSide;
    PatchPartition p;
    for (int k = 0; k < kNumCorners; ++k) {
        const int row0 = (k / 2) * offset;
        const int col0 = (k % 2) * offset;
        for (int r = row0; r < row0 + kWindowSide; ++r)
            for (int c = col0; c < col0 + kWindowSide; ++c) p.indices[static_cast<std::size_t>(k)].push_back(r * kGridSide + c);
    }
    return p;
}

std::array<Var, kNumCorners> partition_grid(const Var& grid, const Var& cls) {
    if (grid.rows() != kGridSide * kGridSide) {
        throw ShapeError("patch partition expects " + std::to_string(kGridSide * kGridSide) + " grid tokens, got " +
                         std::to_string(grid.rows()));
    }
    if (cls.rows() != 1 || cls.cols() != grid.cols()) throw ShapeError("patch partition: CLS token shape");
    static const PatchPartition partition = PatchPartition::corners();
    std::array<Var, kNumCorners> out;
    for (int k = 0; k < kNumCorners; ++k) {
        std::vector<Var> parts{cls, ops::gather_rows(grid, partition.indices[static_cast<std::size_t>(k)])};
        out[static_cast<std::size_t>(k)] = ops::concat_rows(parts);
    }
    return out;
}

Var LocalBranch::forward(const Var& sequence) const {
    Var out = layer.forward(sequence);
    return ops::linear(ops::slice_rows(out, 0, 1), proj_weight, &proj_bias);
}

PatchMatching::PatchMatching(const BackboneConfig& config, const TransformerLayer& final_layer, ParameterStore& store) {
    if (config.grid_side() != kGridSide) {
        throw ConfigError("patch matching requires a 7x7 token grid, got " + std::to_string(config.grid_side()) + "x" +
                          std::to_string(config.grid_side()));
    }
    const int C = config.embed_dim;
    for (int k = 0; k < kNumCorners; ++k) {
        const std::string prefix = std::string("local.") + corner_name(static_cast<Corner>(k));
        LocalBranch b;
        b.layer = final_layer.clone_with_own_norms(store, prefix);
        b.proj_weight = store.create(prefix + ".proj.weight", Mat::Identity(C, C));
        b.proj_bias = store.create(prefix + ".proj.bias", Mat::Zero(1, C), {C});
        branches_[static_cast<std::size_t>(k)] = std::move(b);
    }
}

std::array<Var, kNumCorners> PatchMatching::local_features(const std::array<Var, kNumCorners>& sequences) const {
    std::array<Var, kNumCorners> out;
    for (std::size_t k = 0; k < kNumCorners; ++k) out[k] = branches_[k].forward(sequences[k]);
    return out;
}

std::array<Var, kNumCorners> PatchMatching::forward(const Var& penultimate_grid, const Var& penultimate_cls) const {
    return local_features(partition_grid(penultimate_grid, penultimate_cls));
}

}  // namespace dpclip
