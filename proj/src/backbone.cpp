#include "dpclip/backbone.hpp"

#include "dpclip/errors.hpp"

#include <cmath>
#include <limits>

namespace dpclip {

namespace {

Mat gaussian(Rng* rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    Mat m(rows, cols);
    if (rng == nullptr) {
        m.setZero();
        return m;
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->normal(0.0, stddev);
    return m;
}

Mat uniform(Rng* rng, Eigen::Index rows, Eigen::Index cols, double bound) {
    Mat m(rows, cols);
    if (rng == nullptr) {
        m.setZero();
        return m;
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform(-bound, bound);
    return m;
}

Mat ones_row(int n) { return Mat::Ones(1, n); }
Mat zeros_row(int n) { return Mat::Zero(1, n); }

Mat causal_mask(Eigen::Index n) {
    Mat m = Mat::Zero(n, n);
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = r + 1; c < n; ++c) m(r, c) = -std::numeric_limits<double>::infinity();
    return m;
}

std::int64_t i64(int v) { return static_cast<std::int64_t>(v); }

}  // namespace

void BackboneConfig::validate(bool patch_matching_enabled) const {
    auto fail = [](const std::string& msg) { throw ConfigError("backbone config: " + msg); };
    if (patch_size <= 0 || image_size <= 0) fail("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (num_layers <= 0) fail("num_layers must be positive");
    if (num_heads <= 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (text_heads <= 0 || text_width % text_heads != 0) fail("text_width must be divisible by text_heads");
    if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
    if (patch_matching_enabled && grid_side() != 7) {
        fail("patch matching requires a 7x7 token grid, got " + std::to_string(grid_side()) + "x" +
             std::to_string(grid_side()));
    }
}

BackboneConfig BackboneConfig::full_scale() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::toy(std::uint64_t seed) {
    BackboneConfig c;
    c.image_size = 56;
    c.patch_size = 8;
    c.num_layers = 2;
    c.embed_dim = 64;
    c.num_heads = 4;
    c.mlp_ratio = 4.0;
    c.text_dim = 32;
    c.text_width = 32;
    c.text_layers = 2;
    c.text_heads = 4;
    c.context_length = 48;
    c.vocab_size = 258;
    c.weight_source = WeightSource::toy_random;
    c.seed = seed;
    return c;
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size},
                       {"patch_size", c.patch_size},
                       {"num_layers", c.num_layers},
                       {"embed_dim", c.embed_dim},
                       {"num_heads", c.num_heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"text_dim", c.text_dim},
                       {"text_width", c.text_width},
                       {"text_layers", c.text_layers},
                       {"text_heads", c.text_heads},
                       {"context_length", c.context_length},
                       {"vocab_size", c.vocab_size},
                       {"weight_source", c.weight_source == WeightSource::toy_random ? "toy_random" : "pretrained_clip_vitb32"},
                       {"seed", c.seed},
                       {"prompts_after_cls", c.prompts_after_cls}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    j.at("image_size").get_to(c.image_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("num_layers").get_to(c.num_layers);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("num_heads").get_to(c.num_heads);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("text_dim").get_to(c.text_dim);
    j.at("text_width").get_to(c.text_width);
    j.at("text_layers").get_to(c.text_layers);
    j.at("text_heads").get_to(c.text_heads);
    j.at("context_length").get_to(c.context_length);
    j.at("vocab_size").get_to(c.vocab_size);
    c.weight_source = j.at("weight_source").get<std::string>() == "toy_random" ? WeightSource::toy_random
                                                                               : WeightSource::pretrained_clip_vitb32;
    j.at("seed").get_to(c.seed);
    if (j.contains("prompts_after_cls")) j.at("prompts_after_cls").get_to(c.prompts_after_cls);
}

// ---------------------------------------------------------------------------

TransformerLayer TransformerLayer::create(ParameterStore& store, const std::string& prefix, int width, int heads,
                                          double mlp_ratio, int depth_for_init, Rng* init) {
    const int hidden = static_cast<int>(width * mlp_ratio);
    const double attn_std = std::pow(width, -0.5);
    const double proj_std = attn_std * std::pow(2.0 * depth_for_init, -0.5);
    const double fc_std = std::pow(2.0 * width, -0.5);

    TransformerLayer l;
    l.width = width;
    l.heads = heads;
    l.ln_1_weight = store.create(prefix + ".ln_1.weight", ones_row(width), {i64(width)});
    l.ln_1_bias = store.create(prefix + ".ln_1.bias", zeros_row(width), {i64(width)});
    l.in_proj_weight = store.create(prefix + ".attn.in_proj_weight", gaussian(init, 3 * width, width, attn_std));
    l.in_proj_bias = store.create(prefix + ".attn.in_proj_bias", zeros_row(3 * width), {i64(3 * width)});
    l.out_proj_weight = store.create(prefix + ".attn.out_proj.weight", gaussian(init, width, width, proj_std));
    l.out_proj_bias = store.create(prefix + ".attn.out_proj.bias", zeros_row(width), {i64(width)});
    l.ln_2_weight = store.create(prefix + ".ln_2.weight", ones_row(width), {i64(width)});
    l.ln_2_bias = store.create(prefix + ".ln_2.bias", zeros_row(width), {i64(width)});
    l.fc_weight = store.create(prefix + ".mlp.c_fc.weight", gaussian(init, hidden, width, fc_std));
    l.fc_bias = store.create(prefix + ".mlp.c_fc.bias", zeros_row(hidden), {i64(hidden)});
    l.proj_weight = store.create(prefix + ".mlp.c_proj.weight", gaussian(init, width, hidden, proj_std));
    l.proj_bias = store.create(prefix + ".mlp.c_proj.bias", zeros_row(width), {i64(width)});
    return l;
}

TransformerLayer TransformerLayer::clone_with_own_norms(ParameterStore& store, const std::string& prefix) const {
    TransformerLayer l = *this;
    const std::vector<std::int64_t> shape{i64(width)};
    l.ln_1_weight = store.create(prefix + ".ln_1.weight", ln_1_weight.value(), shape);
    l.ln_1_bias = store.create(prefix + ".ln_1.bias", ln_1_bias.value(), shape);
    l.ln_2_weight = store.create(prefix + ".ln_2.weight", ln_2_weight.value(), shape);
    l.ln_2_bias = store.create(prefix + ".ln_2.bias", ln_2_bias.value(), shape);
    return l;
}

Var TransformerLayer::forward(const Var& x, const Mat* attn_mask, int layer_index,
                              const LayerModulation* modulation) const {
    using namespace ops;
    const int head_dim = width / heads;
    const double scale_qk = 1.0 / std::sqrt(static_cast<double>(head_dim));

    Var h = layer_norm(x, ln_1_weight, ln_1_bias);
    Var qkv = linear(h, in_proj_weight, &in_proj_bias);
    std::vector<Var> head_out;
    head_out.reserve(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
        Var q = slice_cols(qkv, hd * head_dim, head_dim);
        Var k = slice_cols(qkv, width + hd * head_dim, head_dim);
        Var v = slice_cols(qkv, 2 * width + hd * head_dim, head_dim);
        Var att = softmax_rows(ops::scale(matmul_nt(q, k), scale_qk), attn_mask);
        head_out.push_back(matmul(att, v));
    }
    Var attn_in = concat_cols(head_out);
    Var attn_out = linear(attn_in, out_proj_weight, &out_proj_bias);
    if (modulation != nullptr) attn_out = modulation->modify(layer_index, Site::proj, attn_in, attn_out);
    Var x1 = add(x, attn_out);

    Var m_in = layer_norm(x1, ln_2_weight, ln_2_bias);
    Var m_out = linear(quick_gelu(linear(m_in, fc_weight, &fc_bias)), proj_weight, &proj_bias);
    if (modulation != nullptr) m_out = modulation->modify(layer_index, Site::mlp, m_in, m_out);
    return add(x1, m_out);
}

// ---------------------------------------------------------------------------

constexpr double kToyAttentionGain = 4.0;

VisionTower::VisionTower(const BackboneConfig& config, ParameterStore& store, Rng* init) : config_(config) {
    const int C = config.embed_dim;
    const int p = config.patch_size;
    const int fan_in = 3 * p * p;
    const double scale = std::pow(C, -0.5);
    conv1_weight_ = store.create("visual.conv1.weight", uniform(init, C, fan_in, 1.0 / std::sqrt(fan_in)),
                                 {i64(C), 3, i64(p), i64(p)});
    class_embedding_ = store.create("visual.class_embedding", gaussian(init, 1, C, scale), {i64(C)});
    positional_embedding_ =
        store.create("visual.positional_embedding", gaussian(init, config.num_patches() + 1, C, scale));
    ln_pre_weight_ = store.create("visual.ln_pre.weight", ones_row(C), {i64(C)});
    ln_pre_bias_ = store.create("visual.ln_pre.bias", zeros_row(C), {i64(C)});
    for (int i = 0; i < config.num_layers; ++i) {
        layers_.push_back(TransformerLayer::create(store, "visual.transformer.resblocks." + std::to_string(i), C,
                                                   config.num_heads, config.mlp_ratio, config.num_layers, init));
    }
    if (init != nullptr) {
        // Random towers otherwise map every image to nearly the same CLS:
        // filters respond to mean brightness and attention is near uniform.
        // Zero-mean filters and sharper query/key projections keep toy
        // features spread out the way pretrained ones are.
        Mat& w = conv1_weight_.mutable_value();
        for (Eigen::Index r = 0; r < w.rows(); ++r) w.row(r).array() -= w.row(r).mean();
        for (auto& layer : layers_) layer.in_proj_weight.mutable_value().topRows(2 * C) *= kToyAttentionGain;
    }
    ln_post_weight_ = store.create("visual.ln_post.weight", ones_row(C), {i64(C)});
    ln_post_bias_ = store.create("visual.ln_post.bias", zeros_row(C), {i64(C)});
    proj_ = store.create("visual.proj", gaussian(init, C, config.text_dim, scale));
}

Mat VisionTower::patchify(const Image& image) const {
    const int p = config_.patch_size;
    const int g = config_.grid_side();
    if (image.height != config_.image_size || image.width != config_.image_size) {
        throw ShapeError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         ", backbone expects " + std::to_string(config_.image_size));
    }
    Mat patches(g * g, 3 * p * p);
    for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
            const int row = gy * g + gx;
            int col = 0;
            for (int c = 0; c < 3; ++c)
                for (int ky = 0; ky < p; ++ky)
                    for (int kx = 0; kx < p; ++kx) patches(row, col++) = image.at(c, gy * p + ky, gx * p + kx);
        }
    }
    return patches;
}

Var VisionTower::embed(const Image& image) const {
    using namespace ops;
    Var tokens = matmul_nt(constant(patchify(image)), conv1_weight_);
    std::vector<Var> parts{class_embedding_, tokens};
    Var seq = add(concat_rows(parts), positional_embedding_);
    return layer_norm(seq, ln_pre_weight_, ln_pre_bias_);
}

VisualForwardResult VisionTower::forward(const Image& image, std::span<const Var> prompts,
                                         const LayerModulation* modulation,
                                         const VisualForwardOptions& options) const {
    using namespace ops;
    const int L = config_.num_layers;
    if (!prompts.empty() && static_cast<int>(prompts.size()) != L) {
        throw ShapeError("prompt bundle has " + std::to_string(prompts.size()) + " groups, backbone has " +
                         std::to_string(L) + " layers");
    }
    for (const auto& p : prompts) {
        if (p.cols() != config_.embed_dim || p.rows() != prompts[0].rows()) {
            throw ShapeError("prompt group shape mismatch");
        }
    }

    VisualForwardResult result;
    Var x = embed(image);
    const Eigen::Index n_tokens = x.rows();
    for (int i = 0; i < L; ++i) {
        if (i == L - 1) {
            result.penultimate_cls = slice_rows(x, 0, 1);
            result.penultimate_grid = slice_rows(x, 1, n_tokens - 1);
        }
        Var seq = x;
        Eigen::Index P = 0;
        if (!prompts.empty()) {
            P = prompts[static_cast<std::size_t>(i)].rows();
            if (config_.prompts_after_cls) {
                std::vector<Var> parts{slice_rows(x, 0, 1), prompts[static_cast<std::size_t>(i)],
                                       slice_rows(x, 1, n_tokens - 1)};
                seq = concat_rows(parts);
            } else {
                std::vector<Var> parts{prompts[static_cast<std::size_t>(i)], x};
                seq = concat_rows(parts);
            }
        }
        result.sequence_lengths.push_back(static_cast<int>(seq.rows()));
        if (i == options.tap_layer && options.tap_inputs) result.tapped = seq;
        Var y = layers_[static_cast<std::size_t>(i)].forward(seq, nullptr, i, modulation);
        if (i == options.tap_layer && !options.tap_inputs) result.tapped = y;
        if (P > 0) {
            if (config_.prompts_after_cls) {
                std::vector<Var> parts{slice_rows(y, 0, 1), slice_rows(y, 1 + P, n_tokens - 1)};
                y = concat_rows(parts);
            } else {
                y = slice_rows(y, P, n_tokens);
            }
        }
        x = y;
    }
    result.final_cls = layer_norm(slice_rows(x, 0, 1), ln_post_weight_, ln_post_bias_);
    return result;
}

// ---------------------------------------------------------------------------

TextTower::TextTower(const BackboneConfig& config, ParameterStore& store, Rng* init) : config_(config) {
    const int W = config.text_width;
    token_embedding_ = store.create("text.token_embedding.weight", gaussian(init, config.vocab_size, W, 0.02));
    positional_embedding_ = store.create("text.positional_embedding", gaussian(init, config.context_length, W, 0.01));
    for (int i = 0; i < config.text_layers; ++i) {
        layers_.push_back(TransformerLayer::create(store, "text.transformer.resblocks." + std::to_string(i), W,
                                                   config.text_heads, 4.0, config.text_layers, init));
    }
    ln_final_weight_ = store.create("text.ln_final.weight", ones_row(W), {i64(W)});
    ln_final_bias_ = store.create("text.ln_final.bias", zeros_row(W), {i64(W)});
    text_projection_ = store.create("text.text_projection", gaussian(init, W, config.text_dim, std::pow(W, -0.5)));
}

Var TextTower::embed_tokens(std::span<const int> tokens) const {
    for (int t : tokens) {
        if (t < 0 || t >= config_.vocab_size) throw UsageError("token id " + std::to_string(t) + " outside vocabulary");
    }
    return ops::gather_rows(token_embedding_, tokens);
}

Var TextTower::encode_embeddings(const Var& token_embeddings, int eot_index) const {
    using namespace ops;
    const Eigen::Index n = token_embeddings.rows();
    if (n > config_.context_length) {
        throw UsageError("text sequence of " + std::to_string(n) + " tokens exceeds context length " +
                         std::to_string(config_.context_length));
    }
    if (eot_index < 0 || eot_index >= n) throw UsageError("end-of-text index out of range");
    // Causal attention makes positions after EOT irrelevant, so the sequence
    // is run unpadded.
    const Mat mask = causal_mask(n);
    Var x = add(token_embeddings, slice_rows(positional_embedding_, 0, n));
    for (std::size_t i = 0; i < layers_.size(); ++i) x = layers_[i].forward(x, &mask, static_cast<int>(i), nullptr);
    Var eot = layer_norm(slice_rows(x, eot_index, 1), ln_final_weight_, ln_final_bias_);
    return matmul(eot, text_projection_);
}

Var TextTower::encode(std::span<const int> tokens) const {
    if (tokens.empty()) throw UsageError("empty token sequence");
    return encode_embeddings(embed_tokens(tokens), static_cast<int>(tokens.size()) - 1);
}

// ---------------------------------------------------------------------------

Backbone build_backbone(const BackboneConfig& config, ParameterStore& store) {
    config.validate(false);
    Backbone b;
    b.config = config;
    if (config.weight_source == WeightSource::toy_random) {
        Rng rng(config.seed);
        b.visual = VisionTower(config, store, &rng);
        b.text = TextTower(config, store, &rng);
        return b;
    }
    if (config.checkpoint_path.empty()) throw LoadError("pretrained weights requested but no checkpoint path given");
    b.visual = VisionTower(config, store, nullptr);
    b.text = TextTower(config, store, nullptr);
    const TensorFile file = TensorFile::load(config.checkpoint_path);
    store.load_from(file, "visual.");
    store.load_from(file, "text.");
    return b;
}

Image preprocess_image(const BackboneConfig& config, const Image& raw) {
    Image img = resize_bilinear(raw, config.image_size, config.image_size);
    if (config.weight_source == WeightSource::pretrained_clip_vitb32) {
        static const double mean[3] = {0.48145466, 0.4578275, 0.40821073};
        static const double stddev[3] = {0.26862954, 0.26130258, 0.27577711};
        img = normalize_channels(img, mean, stddev);
    }
    return img;
}

}  // namespace dpclip
