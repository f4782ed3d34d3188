#pragma once

// Cosine similarity between the visual prompt tokens and the image tokens at
// one vision layer, as a grid_side x grid_side map per prompt and averaged.

#include "dpclip/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dpclip {

struct SimilarityOptions {
    int layer = -1;           // -1: last layer
    bool use_inputs = false;  // layer inputs instead of layer outputs
};

struct SimilarityMap {
    int layer = 0;
    std::vector<Mat> per_prompt;  // grid x grid each
    Mat mean;
};

SimilarityMap prompt_similarity(const DpClipModel& model, const Image& prepared, const CategoryContext& ctx,
                                const SimilarityOptions& options);

void write_csv(const Mat& m, const std::filesystem::path& path);
Mat read_csv(const std::filesystem::path& path);

// JET colouring of `map` (values in [-1, 1]) upsampled to the image and
// blended 50/50 with it.
Image similarity_overlay(const Image& raw, const Mat& map);

}  // namespace dpclip
