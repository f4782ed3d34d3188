#include "dpclip/config.hpp"

#include "dpclip/errors.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace dpclip {

const std::vector<ConfigKey>& config_registry() {
    static const std::vector<ConfigKey> keys = {
        // backbone
        {"weights", "pretrained", "pretrained | toy"},
        {"clip_weights", "", "converted CLIP ViT-B/32 tensor file (weights=pretrained)"},
        {"bpe_merges", "", "CLIP BPE merges file (weights=pretrained)"},
        {"image_size", "224", "input resolution"},
        {"patch_size", "32", "patch side"},
        {"num_layers", "12", "vision layers"},
        {"embed_dim", "768", "vision width"},
        {"num_heads", "12", "vision heads"},
        {"mlp_ratio", "4", "MLP hidden / width"},
        {"text_dim", "512", "text feature size"},
        {"text_width", "512", "text transformer width"},
        {"text_layers", "12", "text layers"},
        {"text_heads", "8", "text heads"},
        {"context_length", "77", "text context"},
        {"vocab_size", "49408", "text vocabulary"},
        {"backbone_seed", "0", "toy weight seed"},
        {"prompts_after_cls", "true", "insert prompts after CLS (else before)"},
        // modules
        {"visual_prompts", "true", "enable visual prompting"},
        {"prompt_mode", "category_specific", "category_specific | instance_specific | common"},
        {"prompt_tokens", "3", "prompt tokens per layer"},
        {"scaling", "sideway", "none | direct | sideway | sideway_noscale"},
        {"side_dim", "16", "side-way hidden size"},
        {"text_source", "category", "category | learnable"},
        {"text_prompt_len", "4", "learnable text prompt tokens"},
        {"patch_matching", "true", "enable the four local branches"},
        {"module_seed", "0", "initialisation seed of added modules"},
        // training
        {"margin", "0.15", "triplet margin"},
        {"mining", "hardest_in_batch", "hardest_in_batch | random_in_batch"},
        {"distance", "cosine", "cosine | euclidean_on_normalized"},
        {"batch_size", "64", "pairs per batch"},
        {"epochs", "60", "training epochs"},
        {"max_steps", "-1", "stop after this many steps (-1: use epochs)"},
        {"lr_norm", "1e-6", "learning rate of the backbone LayerNorms"},
        {"lr_module", "1e-5", "learning rate of the added modules"},
        {"trade_off", "0.1", "weight of the local loss terms"},
        {"checkpoint_every", "0", "steps between checkpoints (0: final only)"},
        {"seed", "0", "training seed"},
        // data
        {"data_root", "", "dataset root"},
        {"manifest", "", "optional manifest CSV"},
        {"fine_grained", "true", "instance-level dataset"},
        {"unseen_count", "21", "categories held out by prepare-splits"},
        {"split_seed", "0", "seed of prepare-splits"},
        {"support_seed", "0", "seed of select-support"},
        {"exclude_support_sketch", "false", "drop each category's support sketch from its queries"},
    };
    return keys;
}

RunConfig::RunConfig() {
    for (const auto& k : config_registry()) values_[k.name] = k.default_value;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path.string());
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        }
        try {
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& s) {
    T v{};
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': '" + s + "' is not a valid number");
    return v;
}

}  // namespace

int RunConfig::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }
std::int64_t RunConfig::get_i64(const std::string& key) const { return parse_number<std::int64_t>(key, get(key)); }
std::uint64_t RunConfig::get_u64(const std::string& key) const { return parse_number<std::uint64_t>(key, get(key)); }

double RunConfig::get_double(const std::string& key) const {
    const std::string& s = get(key);
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + s + "' is not a valid number");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("config key '" + key + "': '" + s + "' is not a boolean");
}

std::string RunConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

std::string RunConfig::hash() const { return hex64(fnv1a64(canonical())); }

nlohmann::json RunConfig::to_json() const { return nlohmann::json(values_); }

ModelConfig RunConfig::model_config() const {
    ModelConfig m;
    BackboneConfig& b = m.backbone;
    const std::string& weights = get("weights");
    if (weights == "pretrained") {
        b.weight_source = WeightSource::pretrained_clip_vitb32;
    } else if (weights == "toy") {
        b.weight_source = WeightSource::toy_random;
    } else {
        throw ConfigError("weights must be 'pretrained' or 'toy', got '" + weights + "'");
    }
    b.checkpoint_path = get("clip_weights");
    b.bpe_vocab_path = get("bpe_merges");
    b.image_size = get_int("image_size");
    b.patch_size = get_int("patch_size");
    b.num_layers = get_int("num_layers");
    b.embed_dim = get_int("embed_dim");
    b.num_heads = get_int("num_heads");
    b.mlp_ratio = get_double("mlp_ratio");
    b.text_dim = get_int("text_dim");
    b.text_width = get_int("text_width");
    b.text_layers = get_int("text_layers");
    b.text_heads = get_int("text_heads");
    b.context_length = get_int("context_length");
    b.vocab_size = get_int("vocab_size");
    b.seed = get_u64("backbone_seed");
    b.prompts_after_cls = get_bool("prompts_after_cls");

    m.visual_prompts = get_bool("visual_prompts");
    m.prompt_mode = parse_prompt_mode(get("prompt_mode"));
    m.prompt_tokens = get_int("prompt_tokens");
    m.scaling = parse_scaling_mode(get("scaling"));
    m.side_dim = get_int("side_dim");
    const std::string& src = get("text_source");
    if (src == "category") {
        m.text_source = TextSource::category_label;
    } else if (src == "learnable") {
        m.text_source = TextSource::learnable_prompt;
    } else {
        throw ConfigError("text_source must be 'category' or 'learnable', got '" + src + "'");
    }
    m.text_prompt_len = get_int("text_prompt_len");
    m.patch_matching = get_bool("patch_matching");
    m.module_seed = get_u64("module_seed");
    m.validate();
    return m;
}

TrainOptions RunConfig::train_options() const {
    TrainOptions t;
    t.triplet.margin = get_double("margin");
    if (t.triplet.margin < 0.0) throw ConfigError("margin must be non-negative");
    t.triplet.mining = parse_mining(get("mining"));
    t.triplet.distance = parse_distance_kind(get("distance"));
    t.schedule.lr_norm = get_double("lr_norm");
    t.schedule.lr_module = get_double("lr_module");
    t.schedule.epochs = get_int("epochs");
    t.schedule.trade_off = get_double("trade_off");
    t.batch_size = get_int("batch_size");
    t.seed = get_u64("seed");
    t.max_steps = get_i64("max_steps");
    t.checkpoint_every = get_i64("checkpoint_every");
    t.config_hash = hash();
    return t;
}

}  // namespace dpclip
