#include "dpclip/model.hpp"

#include "dpclip/errors.hpp"

namespace dpclip {

void ModelConfig::validate() const {
    backbone.validate(patch_matching);
    if (prompt_tokens <= 0) throw ConfigError("prompt_tokens must be positive");
    if ((scaling == ScalingMode::sideway || scaling == ScalingMode::sideway_noscale) && side_dim <= 0) {
        throw ConfigError("side_dim must be positive for side-way scaling");
    }
    if (text_source == TextSource::learnable_prompt && text_prompt_len <= 0) {
        throw ConfigError("learnable text prompt needs text_prompt_len > 0");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"backbone", c.backbone},
                       {"visual_prompts", c.visual_prompts},
                       {"prompt_mode", prompt_mode_name(c.prompt_mode)},
                       {"prompt_tokens", c.prompt_tokens},
                       {"scaling", scaling_mode_name(c.scaling)},
                       {"side_dim", c.side_dim},
                       {"text_source", c.text_source == TextSource::category_label ? "category" : "learnable"},
                       {"text_prompt_len", c.text_prompt_len},
                       {"patch_matching", c.patch_matching},
                       {"module_seed", c.module_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("backbone").get_to(c.backbone);
    j.at("visual_prompts").get_to(c.visual_prompts);
    c.prompt_mode = parse_prompt_mode(j.at("prompt_mode").get<std::string>());
    j.at("prompt_tokens").get_to(c.prompt_tokens);
    c.scaling = parse_scaling_mode(j.at("scaling").get<std::string>());
    j.at("side_dim").get_to(c.side_dim);
    c.text_source = j.at("text_source").get<std::string>() == "learnable" ? TextSource::learnable_prompt
                                                                          : TextSource::category_label;
    j.at("text_prompt_len").get_to(c.text_prompt_len);
    j.at("patch_matching").get_to(c.patch_matching);
    j.at("module_seed").get_to(c.module_seed);
}

CategoryContext CategoryContext::detached() const {
    return CategoryContext{category, prompts.detached(), plan.detached()};
}

DpClipModel::DpClipModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    backbone_ = build_backbone(config_.backbone, store_);
    Rng init(config_.module_seed ^ 0x6d6f64756c6573ULL);
    if (config_.visual_prompts) prompting_.emplace(config_.backbone, config_.prompt_tokens, store_, init);
    textual_ = TextualPrompting(config_.backbone, config_.scaling, config_.side_dim,
                                config_.text_source == TextSource::learnable_prompt ? config_.text_prompt_len : 0,
                                store_, init);
    if (config_.patch_matching) patch_.emplace(config_.backbone, backbone_.visual.layers().back(), store_);
    policy_ = classify_parameters(store_);
    apply_policy(store_, policy_);
    tokenizer_ = make_tokenizer(config_.backbone.weight_source == WeightSource::pretrained_clip_vitb32,
                                config_.backbone.bpe_vocab_path);
}

Var DpClipModel::category_text(const std::string& label) const {
    if (auto hit = text_cache_.find(label)) return *hit;
    NoGradGuard no_grad;
    Var t = constant(textual_.embed_category(label, *tokenizer_, backbone_.text).vector.value());
    text_cache_.store(label, t);
    return t;
}

CategoryContext DpClipModel::context(const std::string& category, std::span<const Image> support) const {
    CategoryContext ctx;
    ctx.category = category;
    if (prompting_) {
        switch (config_.prompt_mode) {
            case PromptMode::category_specific:
                if (support.empty()) throw UsageError("category-specific prompts need a support set for '" + category + "'");
                ctx.prompts = prompting_->prompts_for_mode(PromptMode::category_specific, nullptr, support);
                break;
            case PromptMode::common:
                ctx.prompts = prompting_->prompts_for_mode(PromptMode::common, nullptr, {});
                break;
            case PromptMode::instance_specific:
                break;
        }
    }
    if (config_.scaling == ScalingMode::direct || config_.scaling == ScalingMode::sideway) {
        TextEmbedding text = config_.text_source == TextSource::category_label
                                 ? TextEmbedding{category_text(category), TextSource::category_label}
                                 : textual_.embed_learnable(*tokenizer_, backbone_.text);
        ctx.plan = textual_.make_plan(text);
    } else {
        ctx.plan.mode = config_.scaling;
    }
    return ctx;
}

VisualForwardResult DpClipModel::forward_visual(const Image& prepared, const CategoryContext& ctx,
                                                const VisualForwardOptions& options) const {
    PromptBundle instance_prompts;
    const PromptBundle* prompts = &ctx.prompts;
    if (prompting_ && config_.prompt_mode == PromptMode::instance_specific) {
        instance_prompts = prompting_->prompts_for_mode(PromptMode::instance_specific, &prepared, {});
        prompts = &instance_prompts;
    }
    if (ctx.plan.mode == ScalingMode::none) {
        return backbone_.visual.forward(prepared, prompts->prompts, nullptr, options);
    }
    ScalingModulation modulation(ctx.plan, &textual_.adapter());
    return backbone_.visual.forward(prepared, prompts->prompts, &modulation, options);
}

Embedding DpClipModel::embed(const Image& prepared, const CategoryContext& ctx) const {
    VisualForwardResult r = forward_visual(prepared, ctx, {});
    Embedding e;
    e.global = r.final_cls;
    if (patch_) {
        auto locals = patch_->forward(r.penultimate_grid, r.penultimate_cls);
        e.locals.assign(locals.begin(), locals.end());
    }
    return e;
}

}  // namespace dpclip
