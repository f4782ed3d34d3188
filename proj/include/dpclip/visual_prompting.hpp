#pragma once

// Category-conditioned visual prompts. A support set (one sketch, two photos)
// is embedded by a patch convolution; a single shared transformer layer then
// runs once per backbone layer over [support tokens, that layer's learnable
// token bank], and the outputs at the bank positions become the layer's
// prompts. Support-token outputs are dropped.

#include "dpclip/backbone.hpp"

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace dpclip {

struct SupportSet {
    std::string category;
    std::string sketch;
    std::string photo_1;
    std::string photo_2;
    std::uint64_t seed = 0;
};

struct TokenBank {
    std::vector<Var> banks;  // num_layers x [N, L_V]

    int num_layers() const { return static_cast<int>(banks.size()); }
    std::int64_t parameter_count() const;
};

struct PromptBundle {
    std::vector<Var> prompts;  // num_layers x [N, L_V]

    bool empty() const { return prompts.empty(); }
    int num_layers() const { return static_cast<int>(prompts.size()); }
    // Copies with the graph detached.
    PromptBundle detached() const;
    bool all_finite() const;
};

enum class PromptMode { category_specific, instance_specific, common };

const char* prompt_mode_name(PromptMode m);
PromptMode parse_prompt_mode(const std::string& s);

class VisualPrompting {
public:
    static constexpr int kDefaultTokensPerLayer = 3;

    VisualPrompting() = default;
    VisualPrompting(const BackboneConfig& config, int tokens_per_layer, ParameterStore& store, Rng& init);

    // Concatenated per-image patch features (k * grid_side^2 x L_V), images in
    // the given order (sketch, photo_1, photo_2 for a support set).
    Var encode_support(std::span<const Image> images) const;

    PromptBundle generate(const Var& support_features) const;

    // common: returns the raw banks; instance_specific: conditions on the input
    // image alone; category_specific: conditions on the three support images.
    PromptBundle prompts_for_mode(PromptMode mode, const Image* input_image,
                                  std::span<const Image> support_images) const;

    const TokenBank& bank() const { return bank_; }
    const TransformerLayer& generator() const { return generator_; }
    int tokens_per_layer() const { return tokens_per_layer_; }

private:
    BackboneConfig config_;
    int tokens_per_layer_ = kDefaultTokensPerLayer;
    Var conv_weight_;  // [L_V, 3*p*p]
    Var conv_bias_;
    TokenBank bank_;
    TransformerLayer generator_;
};

// category -> prompts, keyed also by support seed and a parameter version so
// bundles are refreshed after each optimizer step. Concurrent readers, one
// writer.
class PromptCache {
public:
    std::optional<PromptBundle> find(const std::string& category, std::uint64_t seed, std::uint64_t version) const;
    void store(const std::string& category, std::uint64_t seed, std::uint64_t version, PromptBundle bundle);
    void clear();
    std::size_t size() const;

private:
    using Key = std::tuple<std::string, std::uint64_t, std::uint64_t>;
    mutable std::shared_mutex mutex_;
    std::map<Key, PromptBundle> entries_;
};

}  // namespace dpclip
