#pragma once

// CLIP-style vision and text transformers with interception points for
// per-layer prompt insertion, channel modulation of the attention projection
// and MLP branches, and export of the penultimate-layer token grid.
//
// Tensor names follow the OpenAI CLIP state-dict layout prefixed by the
// tower ("visual.transformer.resblocks.0.attn.in_proj_weight", ...). See
// docs/weights.md for the full table.

#include "dpclip/autograd.hpp"
#include "dpclip/image.hpp"
#include "dpclip/params.hpp"
#include "dpclip/rng.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dpclip {

enum class WeightSource { pretrained_clip_vitb32, toy_random };

struct BackboneConfig {
    int image_size = 224;
    int patch_size = 32;
    int num_layers = 12;
    int embed_dim = 768;  // L_V
    int num_heads = 12;
    double mlp_ratio = 4.0;
    int text_dim = 512;  // L_T

    int text_width = 512;
    int text_layers = 12;
    int text_heads = 8;
    int context_length = 77;
    int vocab_size = 49408;

    WeightSource weight_source = WeightSource::pretrained_clip_vitb32;
    std::uint64_t seed = 0;
    std::string checkpoint_path;
    std::string bpe_vocab_path;
    // [CLS, prompts, patches] when true, [prompts, CLS, patches] otherwise.
    bool prompts_after_cls = true;

    int grid_side() const { return image_size / patch_size; }
    int num_patches() const { return grid_side() * grid_side(); }
    int head_dim() const { return embed_dim / num_heads; }
    int mlp_dim() const { return static_cast<int>(embed_dim * mlp_ratio); }

    // Throws ConfigError on inconsistent dimensions. When patch matching is
    // enabled the token grid must be 7x7.
    void validate(bool patch_matching_enabled) const;

    static BackboneConfig full_scale();
    static BackboneConfig toy(std::uint64_t seed = 0);
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

enum class Site { proj, mlp };

// Rewrites a branch output given the branch input; implemented by the
// textual scaling module. Sites are the attention output projection and the
// MLP block of every layer.
class LayerModulation {
public:
    virtual ~LayerModulation() = default;
    virtual Var modify(int layer, Site site, const Var& branch_input, const Var& branch_output) const = 0;
};

struct TransformerLayer {
    int width = 0;
    int heads = 0;
    Var ln_1_weight, ln_1_bias;
    Var in_proj_weight, in_proj_bias;
    Var out_proj_weight, out_proj_bias;
    Var ln_2_weight, ln_2_bias;
    Var fc_weight, fc_bias;
    Var proj_weight, proj_bias;

    // Registers a layer under `prefix` (e.g. "visual.transformer.resblocks.0").
    // With init != nullptr, weights follow the CLIP initialisation scheme.
    static TransformerLayer create(ParameterStore& store, const std::string& prefix, int width, int heads,
                                   double mlp_ratio, int depth_for_init, Rng* init);

    // Same frozen weights, fresh (copied) LayerNorm parameters under `prefix`.
    TransformerLayer clone_with_own_norms(ParameterStore& store, const std::string& prefix) const;

    Var forward(const Var& x, const Mat* attn_mask = nullptr, int layer_index = -1,
                const LayerModulation* modulation = nullptr) const;
};

struct VisualForwardOptions {
    // Layer whose full output (prompt positions included) is captured, or -1.
    int tap_layer = -1;
    bool tap_inputs = false;
};

struct VisualForwardResult {
    Var final_cls;            // 1 x L_V, after ln_post, before L2 normalisation
    Var penultimate_grid;     // grid_side^2 x L_V: input to the final layer, spatial tokens only
    Var penultimate_cls;      // 1 x L_V
    Var tapped;               // full sequence at tap_layer (input or output)
    std::vector<int> sequence_lengths;  // token count entering each layer
};

class VisionTower {
public:
    VisionTower() = default;
    VisionTower(const BackboneConfig& config, ParameterStore& store, Rng* init);

    // Pixels (already resized/normalised) -> grid_side^2 x (3*p*p) patch rows.
    Mat patchify(const Image& image) const;
    Var embed(const Image& image) const;  // [CLS, patches] + positions, after ln_pre

    VisualForwardResult forward(const Image& image, std::span<const Var> prompts,
                                const LayerModulation* modulation,
                                const VisualForwardOptions& options = {}) const;

    const std::vector<TransformerLayer>& layers() const { return layers_; }
    const Var& ln_post_weight() const { return ln_post_weight_; }
    const Var& ln_post_bias() const { return ln_post_bias_; }

private:
    BackboneConfig config_;
    Var conv1_weight_;  // [C, 3*p*p] view of [C, 3, p, p]
    Var class_embedding_;
    Var positional_embedding_;
    Var ln_pre_weight_, ln_pre_bias_;
    std::vector<TransformerLayer> layers_;
    Var ln_post_weight_, ln_post_bias_;
    Var proj_;
};

class TextTower {
public:
    TextTower() = default;
    TextTower(const BackboneConfig& config, ParameterStore& store, Rng* init);

    Var embed_tokens(std::span<const int> tokens) const;
    // Runs the causal transformer over already-embedded tokens and returns
    // the projected feature at `eot_index` (1 x L_T).
    Var encode_embeddings(const Var& token_embeddings, int eot_index) const;
    Var encode(std::span<const int> tokens) const;

    int context_length() const { return config_.context_length; }
    int width() const { return config_.text_width; }

private:
    BackboneConfig config_;
    Var token_embedding_;
    Var positional_embedding_;
    std::vector<TransformerLayer> layers_;
    Var ln_final_weight_, ln_final_bias_;
    Var text_projection_;
};

struct Backbone {
    BackboneConfig config;
    VisionTower visual;
    TextTower text;
};

// Registers every backbone tensor in `store`, then fills it either from the
// seeded toy initialiser or from `config.checkpoint_path`.
Backbone build_backbone(const BackboneConfig& config, ParameterStore& store);

// Pixel preprocessing matching the weight source: bilinear resize to
// image_size, then CLIP mean/std normalisation for pretrained weights.
Image preprocess_image(const BackboneConfig& config, const Image& raw);

}  // namespace dpclip
