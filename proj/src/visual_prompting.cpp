#include "dpclip/visual_prompting.hpp"

#include "dpclip/errors.hpp"

#include <cmath>

namespace dpclip {

namespace {
constexpr double kGeneratorResidualGain = 1e-3;
}  // namespace

std::int64_t TokenBank::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& b : banks) n += b.value().size();
    return n;
}

PromptBundle PromptBundle::detached() const {
    PromptBundle out;
    for (const auto& p : prompts) out.prompts.push_back(constant(p.value()));
    return out;
}

bool PromptBundle::all_finite() const {
    for (const auto& p : prompts) {
        if (!p.value().allFinite()) return false;
    }
    return true;
}

const char* prompt_mode_name(PromptMode m) {
    switch (m) {
        case PromptMode::category_specific: return "category_specific";
        case PromptMode::instance_specific: return "instance_specific";
        case PromptMode::common: return "common";
    }
    return "category_specific";
}

PromptMode parse_prompt_mode(const std::string& s) {
    if (s == "category_specific") return PromptMode::category_specific;
    if (s == "instance_specific") return PromptMode::instance_specific;
    if (s == "common") return PromptMode::common;
    throw ConfigError("unknown prompt mode '" + s + "'");
}

VisualPrompting::VisualPrompting(const BackboneConfig& config, int tokens_per_layer, ParameterStore& store,
                                 Rng& init)
    : config_(config), tokens_per_layer_(tokens_per_layer) {
    if (tokens_per_layer <= 0) throw ConfigError("prompt tokens per layer must be positive");
    const int C = config.embed_dim;
    const int p = config.patch_size;
    const int fan_in = 3 * p * p;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));

    Mat w(C, fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = init.uniform(-bound, bound);
    Mat b(1, C);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = init.uniform(-bound, bound);
    conv_weight_ = store.create("prompt.support_conv.weight", w, {C, 3, p, p});
    conv_bias_ = store.create("prompt.support_conv.bias", b, {C});

    for (int i = 0; i < config.num_layers; ++i) {
        Mat bank(tokens_per_layer, C);
        for (Eigen::Index k = 0; k < bank.size(); ++k) bank.data()[k] = init.normal(0.0, 0.02);
        bank_.banks.push_back(store.create("prompt.bank." + std::to_string(i), bank));
    }
    generator_ = TransformerLayer::create(store, "prompt.generator", C, config.num_heads, config.mlp_ratio, 1, &init);
    // Residual outputs start near zero: generated prompts stay close to the
    // bank (support tokens are orders of magnitude larger) while still
    // depending on the support set.
    generator_.out_proj_weight.mutable_value() *= kGeneratorResidualGain;
    generator_.proj_weight.mutable_value() *= kGeneratorResidualGain;
}

Var VisualPrompting::encode_support(std::span<const Image> images) const {
    if (images.empty()) throw UsageError("support encoding needs at least one image");
    const int p = config_.patch_size;
    const int g = config_.grid_side();
    const int n = g * g;
    Mat patches(static_cast<Eigen::Index>(images.size()) * n, 3 * p * p);
    for (std::size_t k = 0; k < images.size(); ++k) {
        const Image& img = images[k];
        if (img.height != config_.image_size || img.width != config_.image_size) {
            throw ShapeError("support image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                             ", expected " + std::to_string(config_.image_size));
        }
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                const Eigen::Index row = static_cast<Eigen::Index>(k) * n + gy * g + gx;
                int col = 0;
                for (int c = 0; c < 3; ++c)
                    for (int ky = 0; ky < p; ++ky)
                        for (int kx = 0; kx < p; ++kx) patches(row, col++) = img.at(c, gy * p + ky, gx * p + kx);
            }
        }
    }
    return ops::linear(constant(std::move(patches)), conv_weight_, &conv_bias_);
}

PromptBundle VisualPrompting::generate(const Var& support_features) const {
    if (support_features.cols() != config_.embed_dim) {
        throw ShapeError("support features have " + std::to_string(support_features.cols()) + " channels, expected " +
                         std::to_string(config_.embed_dim));
    }
    if (bank_.num_layers() != config_.num_layers) {
        throw ShapeError("token bank has " + std::to_string(bank_.num_layers()) + " groups for " +
                         std::to_string(config_.num_layers) + " layers");
    }
    const Eigen::Index n_support = support_features.rows();
    PromptBundle bundle;
    for (const auto& bank : bank_.banks) {
        std::vector<Var> parts{support_features, bank};
        Var out = generator_.forward(ops::concat_rows(parts));
        bundle.prompts.push_back(ops::slice_rows(out, n_support, bank.rows()));
    }
    return bundle;
}

PromptBundle VisualPrompting::prompts_for_mode(PromptMode mode, const Image* input_image,
                                               std::span<const Image> support_images) const {
    switch (mode) {
        case PromptMode::common: {
            PromptBundle b;
            b.prompts = bank_.banks;
            return b;
        }
        case PromptMode::instance_specific: {
            if (input_image == nullptr) throw UsageError("instance-specific prompts need the input image");
            return generate(encode_support(std::span<const Image>(input_image, 1)));
        }
        case PromptMode::category_specific: {
            if (support_images.size() != 3) {
                throw UsageError("category-specific prompts need a support set of 1 sketch + 2 photos");
            }
            return generate(encode_support(support_images));
        }
    }
    throw UsageError("unknown prompt mode");
}

std::optional<PromptBundle> PromptCache::find(const std::string& category, std::uint64_t seed,
                                              std::uint64_t version) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(Key{category, seed, version});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void PromptCache::store(const std::string& category, std::uint64_t seed, std::uint64_t version, PromptBundle bundle) {
    std::unique_lock lock(mutex_);
    // Older versions are stale once a newer one is written.
    for (auto it = entries_.begin(); it != entries_.end();) {
        if (std::get<0>(it->first) == category && std::get<2>(it->first) != version) {
            it = entries_.erase(it);
        } else {
            ++it;
        }
    }
    entries_[Key{category, seed, version}] = std::move(bundle);
}

void PromptCache::clear() {
    std::unique_lock lock(mutex_);
    entries_.clear();
}

std::size_t PromptCache::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

}  // namespace dpclip
