#pragma once

// Composition of the backbone with the visual prompting, textual scaling and
// patch matching modules, and the frozen-parameter policy over all of them.

#include "dpclip/backbone.hpp"
#include "dpclip/patch_matching.hpp"
#include "dpclip/textual_prompting.hpp"
#include "dpclip/tokenizer.hpp"
#include "dpclip/visual_prompting.hpp"

#include <json.hpp>

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dpclip {

struct ModelConfig {
    BackboneConfig backbone;
    bool visual_prompts = true;
    PromptMode prompt_mode = PromptMode::category_specific;
    int prompt_tokens = VisualPrompting::kDefaultTokensPerLayer;
    ScalingMode scaling = ScalingMode::sideway;
    int side_dim = TextualPrompting::kDefaultSideDim;
    TextSource text_source = TextSource::category_label;
    int text_prompt_len = 4;
    bool patch_matching = true;
    std::uint64_t module_seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Prompts and scaling vectors shared by every image of one category.
struct CategoryContext {
    std::string category;
    PromptBundle prompts;  // empty for instance-specific prompts or when prompts are off
    ScalingPlan plan;

    CategoryContext detached() const;
};

struct Embedding {
    Var global;               // 1 x L_V
    std::vector<Var> locals;  // 4 x (1 x L_V), TL TR BL BR; empty if patch matching is off
};

class DpClipModel {
public:
    explicit DpClipModel(const ModelConfig& config);
    DpClipModel(const DpClipModel&) = delete;
    DpClipModel& operator=(const DpClipModel&) = delete;

    const ModelConfig& config() const { return config_; }
    ParameterStore& params() { return store_; }
    const ParameterStore& params() const { return store_; }
    const ParameterPolicy& policy() const { return policy_; }

    const Backbone& backbone() const { return backbone_; }
    const VisualPrompting* visual_prompting() const { return prompting_ ? &*prompting_ : nullptr; }
    const TextualPrompting& textual_prompting() const { return textual_; }
    const PatchMatching* patch_matching() const { return patch_ ? &*patch_ : nullptr; }
    const Tokenizer& tokenizer() const { return *tokenizer_; }

    Image prepare(const Image& raw) const { return preprocess_image(config_.backbone, raw); }

    // Frozen text-tower feature of "This is a/an <label> in the image.".
    Var category_text(const std::string& label) const;

    // `support` holds prepared (sketch, photo, photo) images; only needed for
    // category-specific prompts.
    CategoryContext context(const std::string& category, std::span<const Image> support) const;

    Embedding embed(const Image& prepared, const CategoryContext& ctx) const;
    VisualForwardResult forward_visual(const Image& prepared, const CategoryContext& ctx,
                                       const VisualForwardOptions& options) const;

    // Bumped after each optimizer step; keys the prompt cache.
    std::uint64_t version() const { return version_; }
    void bump_version() { ++version_; }
    PromptCache& prompt_cache() const { return prompt_cache_; }

private:
    ModelConfig config_;
    ParameterStore store_;
    Backbone backbone_;
    std::optional<VisualPrompting> prompting_;
    TextualPrompting textual_;
    std::optional<PatchMatching> patch_;
    ParameterPolicy policy_;
    std::unique_ptr<Tokenizer> tokenizer_;
    mutable TextEmbeddingCache text_cache_;
    mutable PromptCache prompt_cache_;
    std::uint64_t version_ = 0;
};

}  // namespace dpclip
