#include "dpclip/textual_prompting.hpp"

#include "dpclip/errors.hpp"

#include <cctype>
#include <cmath>
#include <mutex>

namespace dpclip {

namespace {

Mat uniform_init(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
}

Mat gaussian_init(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, stddev);
    return m;
}

}  // namespace

const char* scaling_mode_name(ScalingMode m) {
    switch (m) {
        case ScalingMode::none: return "none";
        case ScalingMode::direct: return "direct";
        case ScalingMode::sideway: return "sideway";
        case ScalingMode::sideway_noscale: return "sideway_noscale";
    }
    return "none";
}

ScalingMode parse_scaling_mode(const std::string& s) {
    if (s == "none") return ScalingMode::none;
    if (s == "direct") return ScalingMode::direct;
    if (s == "sideway") return ScalingMode::sideway;
    if (s == "sideway_noscale") return ScalingMode::sideway_noscale;
    throw ConfigError("unknown scaling mode '" + s + "'");
}

std::string category_sentence(const std::string& label) {
    if (label.empty()) throw UsageError("empty category label");
    const char first = static_cast<char>(std::tolower(static_cast<unsigned char>(label.front())));
    const bool vowel = first == 'a' || first == 'e' || first == 'i' || first == 'o' || first == 'u';
    return std::string("This is ") + (vowel ? "an " : "a ") + label + " in the image.";
}

Var TextMlp::forward(const Var& text) const {
    Var h = ops::relu(ops::linear(text, fc1_weight, &fc1_bias));
    return ops::linear(h, fc2_weight, &fc2_bias);
}

std::int64_t SideWayAdapter::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& s : sites) n += s.fc1.value().size() + s.fc2.value().size();
    return n;
}

ScalingPlan ScalingPlan::detached() const {
    ScalingPlan p;
    p.mode = mode;
    for (const auto& v : vectors) p.vectors.push_back(constant(v.value()));
    return p;
}

Var apply_direct(const Var& v, const Var& s) {
    if (s.rows() != 1 || s.cols() != v.cols()) {
        throw ShapeError("direct scaling: vector of " + std::to_string(s.cols()) + " channels for features of " +
                         std::to_string(v.cols()));
    }
    return ops::add(ops::mul_row(v, s), v);
}

Var apply_sideway(const Var& v_in, const Var* s, const SideWaySite& adapter, const Var& base_out) {
    if (adapter.fc1.cols() != v_in.cols() || adapter.fc2.rows() != base_out.cols()) {
        throw ShapeError("side-way adapter dims do not match the branch");
    }
    Var hidden = ops::matmul_nt(v_in, adapter.fc1);
    if (s != nullptr) {
        if (s->rows() != 1 || s->cols() != hidden.cols()) {
            throw ShapeError("side-way scaling: vector of " + std::to_string(s->cols()) + " channels for hidden width " +
                             std::to_string(hidden.cols()));
        }
        hidden = ops::mul_row(hidden, *s);
    }
    return ops::add(ops::matmul_nt(hidden, adapter.fc2), base_out);
}

Var ScalingModulation::modify(int layer, Site site, const Var& branch_input, const Var& branch_output) const {
    switch (plan_.mode) {
        case ScalingMode::none: return branch_output;
        case ScalingMode::direct: return apply_direct(branch_output, plan_.at(layer, site));
        case ScalingMode::sideway:
            if (adapter_ == nullptr) throw ConfigError("side-way scaling without adapters");
            return apply_sideway(branch_input, &plan_.at(layer, site), adapter_->at(layer, site), branch_output);
        case ScalingMode::sideway_noscale:
            if (adapter_ == nullptr) throw ConfigError("side-way scaling without adapters");
            return apply_sideway(branch_input, nullptr, adapter_->at(layer, site), branch_output);
    }
    return branch_output;
}

TextualPrompting::TextualPrompting(const BackboneConfig& config, ScalingMode mode, int side_dim, int text_prompt_len,
                                   ParameterStore& store, Rng& init)
    : config_(config), mode_(mode) {
    const int C = config.embed_dim;
    if ((mode == ScalingMode::sideway || mode == ScalingMode::sideway_noscale) && side_dim <= 0) {
        throw ConfigError("side-way hidden dimension must be positive");
    }
    if (mode == ScalingMode::direct || mode == ScalingMode::sideway) {
        const int out = mode == ScalingMode::direct ? C : side_dim;
        const int H = TextMlp::kHidden;
        const double b1 = 1.0 / std::sqrt(static_cast<double>(config.text_dim));
        const double b2 = 1.0 / std::sqrt(static_cast<double>(H));
        mlp_.fc1_weight = store.create("scaling.text_mlp.fc1.weight", uniform_init(init, H, config.text_dim, b1));
        mlp_.fc1_bias = store.create("scaling.text_mlp.fc1.bias", uniform_init(init, 1, H, b1), {H});
        mlp_.fc2_weight = store.create("scaling.text_mlp.fc2.weight", uniform_init(init, out, H, b2));
        mlp_.fc2_bias = store.create("scaling.text_mlp.fc2.bias", uniform_init(init, 1, out, b2), {out});
    }
    if (mode == ScalingMode::sideway || mode == ScalingMode::sideway_noscale) {
        adapter_.side_dim = side_dim;
        for (int layer = 0; layer < config.num_layers; ++layer) {
            for (const char* site : {"proj", "mlp"}) {
                const std::string prefix = "scaling.adapter." + std::to_string(layer) + "." + site;
                SideWaySite s;
                s.fc1 = store.create(prefix + ".fc1.weight", gaussian_init(init, side_dim, C, 0.02));
                s.fc2 = store.create(prefix + ".fc2.weight", Mat::Zero(C, side_dim));
                adapter_.sites.push_back(s);
            }
        }
    }
    if (text_prompt_len > 0) {
        learnable_ = store.create("text_prompt.tokens", gaussian_init(init, text_prompt_len, config.text_width, 0.02));
    }
}

TextEmbedding TextualPrompting::embed_category(const std::string& label, const Tokenizer& tokenizer,
                                               const TextTower& text) const {
    const auto ids = tokenizer.encode_with_markers(category_sentence(label), text.context_length());
    return TextEmbedding{text.encode(ids), TextSource::category_label};
}

TextEmbedding TextualPrompting::embed_learnable(const Tokenizer& tokenizer, const TextTower& text) const {
    if (!learnable_.defined()) throw ConfigError("learnable text prompt is not enabled (text_prompt_len = 0)");
    std::vector<int> prefix{tokenizer.sot()};
    const auto words = tokenizer.encode(std::string(kLearnablePromptPrefix) + " ");
    prefix.insert(prefix.end(), words.begin(), words.end());
    const std::vector<int> suffix{tokenizer.eot()};
    const auto total = prefix.size() + static_cast<std::size_t>(learnable_.rows()) + suffix.size();
    if (static_cast<int>(total) > text.context_length()) {
        throw UsageError("learnable text prompt needs " + std::to_string(total) + " tokens, context length is " +
                         std::to_string(text.context_length()));
    }
    std::vector<Var> parts{text.embed_tokens(prefix), learnable_, text.embed_tokens(suffix)};
    Var seq = ops::concat_rows(parts);
    return TextEmbedding{text.encode_embeddings(seq, static_cast<int>(total) - 1), TextSource::learnable_prompt};
}

ScalingPlan TextualPrompting::make_plan(const TextEmbedding& text) const {
    ScalingPlan plan;
    plan.mode = mode_;
    if (mode_ != ScalingMode::direct && mode_ != ScalingMode::sideway) return plan;
    if (text.vector.cols() != mlp_.fc1_weight.cols()) {
        throw ShapeError("text embedding has " + std::to_string(text.vector.cols()) + " channels, MLP expects " +
                         std::to_string(mlp_.fc1_weight.cols()));
    }
    // One shared MLP serves every site.
    Var s = mlp_.forward(text.vector);
    plan.vectors.assign(static_cast<std::size_t>(2 * config_.num_layers), s);
    return plan;
}

std::optional<Var> TextEmbeddingCache::find(const std::string& label) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(label);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void TextEmbeddingCache::store(const std::string& label, Var v) {
    std::unique_lock lock(mutex_);
    entries_[label] = std::move(v);
}

std::int64_t sideway_parameter_count(int num_layers, int embed_dim, int side_dim) {
    return 2LL * (2LL * num_layers) * embed_dim * side_dim;
}

std::int64_t text_mlp_parameter_count(int text_dim, int out_dim) {
    const std::int64_t H = TextMlp::kHidden;
    return text_dim * H + H + H * out_dim + out_dim;
}

}  // namespace dpclip
