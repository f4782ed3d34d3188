#pragma once

// Text-guided channel scaling. The category label (or a learnable text
// prompt) is embedded by the frozen text tower; a small shared MLP maps the
// embedding to a channel scale applied at the attention output projection
// and MLP block of every vision layer, either directly on the branch output
// (V' = s*V + V) or inside a low-rank side branch
// (V' = FC2(s * FC1(V_in)) + Base(V_in)).

#include "dpclip/backbone.hpp"
#include "dpclip/tokenizer.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace dpclip {

enum class ScalingMode { none, direct, sideway, sideway_noscale };

const char* scaling_mode_name(ScalingMode m);
ScalingMode parse_scaling_mode(const std::string& s);

enum class TextSource { category_label, learnable_prompt };

struct TextEmbedding {
    Var vector;  // 1 x L_T
    TextSource source = TextSource::category_label;
};

// "This is a/an [C] in the image." with the article chosen by the label's
// leading letter.
std::string category_sentence(const std::string& label);
inline constexpr const char* kLearnablePromptPrefix = "Focus on the discriminative";

struct TextMlp {
    static constexpr int kHidden = 16;
    Var fc1_weight, fc1_bias;  // [16, L_T], [16]
    Var fc2_weight, fc2_bias;  // [out, 16], [out]

    Var forward(const Var& text) const;  // 1 x out, no output squashing
    int out_dim() const { return static_cast<int>(fc2_weight.rows()); }
};

struct SideWaySite {
    Var fc1;  // [L_S, L_V], bias-free
    Var fc2;  // [L_V, L_S], bias-free
};

struct SideWayAdapter {
    int side_dim = 0;
    std::vector<SideWaySite> sites;  // index = 2 * layer + site

    const SideWaySite& at(int layer, Site site) const { return sites[static_cast<std::size_t>(2 * layer + (site == Site::mlp))]; }
    std::int64_t parameter_count() const;
};

struct ScalingPlan {
    ScalingMode mode = ScalingMode::none;
    std::vector<Var> vectors;  // index = 2 * layer + site; empty for sideway_noscale

    const Var& at(int layer, Site site) const { return vectors[static_cast<std::size_t>(2 * layer + (site == Site::mlp))]; }
    ScalingPlan detached() const;
};

// V' = s (.) V + V, s broadcast over token rows.
Var apply_direct(const Var& v, const Var& s);
// FC2(s (.) FC1(V_in)) + base_out; s may be null (no textual scaling).
Var apply_sideway(const Var& v_in, const Var* s, const SideWaySite& adapter, const Var& base_out);

class ScalingModulation final : public LayerModulation {
public:
    ScalingModulation(const ScalingPlan& plan, const SideWayAdapter* adapter) : plan_(plan), adapter_(adapter) {}
    Var modify(int layer, Site site, const Var& branch_input, const Var& branch_output) const override;

private:
    const ScalingPlan& plan_;
    const SideWayAdapter* adapter_;
};

class TextualPrompting {
public:
    static constexpr int kDefaultSideDim = 16;

    TextualPrompting() = default;
    // text_prompt_len > 0 also registers the learnable prompt tokens.
    TextualPrompting(const BackboneConfig& config, ScalingMode mode, int side_dim, int text_prompt_len,
                     ParameterStore& store, Rng& init);

    TextEmbedding embed_category(const std::string& label, const Tokenizer& tokenizer, const TextTower& text) const;
    TextEmbedding embed_learnable(const Tokenizer& tokenizer, const TextTower& text) const;

    ScalingPlan make_plan(const TextEmbedding& text) const;

    ScalingMode mode() const { return mode_; }
    const TextMlp& mlp() const { return mlp_; }
    const SideWayAdapter& adapter() const { return adapter_; }
    bool has_learnable_prompt() const { return learnable_.defined(); }
    const Var& learnable_prompt() const { return learnable_; }

private:
    BackboneConfig config_;
    ScalingMode mode_ = ScalingMode::none;
    TextMlp mlp_;
    SideWayAdapter adapter_;
    Var learnable_;  // [text_prompt_len, text_width]
};

// Per-category text embeddings from the frozen tower; concurrent reads.
class TextEmbeddingCache {
public:
    std::optional<Var> find(const std::string& label) const;
    void store(const std::string& label, Var v);

private:
    mutable std::shared_mutex mutex_;
    std::map<std::string, Var> entries_;
};

// Closed-form count of parameters the side-way adapters add for a backbone.
std::int64_t sideway_parameter_count(int num_layers, int embed_dim, int side_dim);
std::int64_t text_mlp_parameter_count(int text_dim, int out_dim);

}  // namespace dpclip
