// dpclip command-line front end.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.

#include "dpclip/config.hpp"
#include "dpclip/data.hpp"
#include "dpclip/errors.hpp"
#include "dpclip/oracle.hpp"
#include "dpclip/pipeline.hpp"
#include "dpclip/retrieval.hpp"
#include "dpclip/train.hpp"
#include "dpclip/visualize.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace dpclip;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool out_required) {
    cmd->add_option("--config", a.config, "key=value config file");
    cmd->add_option("--set", a.sets, "override a config key (key=value), repeatable");
    auto* out = cmd->add_option("--out", a.out, "output directory");
    if (out_required) out->required();
    cmd->add_flag("--dry-run", a.dry_run, "print the resolved config and planned outputs, write nothing");
}

// Flags named after config keys take precedence over --set and the file.
RunConfig resolve(const CommonArgs& a, const std::map<std::string, std::string>& flags) {
    RunConfig cfg;
    if (!a.config.empty()) cfg.merge_file(a.config);
    for (const auto& s : a.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : flags) {
        if (!v.empty()) cfg.set(k, v);
    }
    return cfg;
}

std::string timestamp() {
    std::time_t t = std::time(nullptr);
    if (const char* fixed = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(fixed, nullptr, 10));
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::string file_hash(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return hex64(fnv1a64(ss.str()));
}

// Tracks files written under --out and emits manifest.json.
class Outputs {
public:
    Outputs(std::string command, const CommonArgs& args, const RunConfig& cfg)
        : command_(std::move(command)), dir_(args.out), dry_(args.dry_run), cfg_(cfg) {}

    fs::path path(const std::string& rel) {
        planned_.push_back(rel);
        return dir_ / rel;
    }
    bool dry() const { return dry_; }
    bool enabled() const { return !dir_.empty(); }

    // Dry run: report the plan and stop.
    bool plan_only() const {
        if (!dry_) return false;
        json j{{"command", command_}, {"config_hash", cfg_.hash()}, {"config", cfg_.to_json()}};
        json planned = json::array();
        for (const auto& p : planned_) planned.push_back((dir_ / p).string());
        if (enabled()) planned.push_back((dir_ / "manifest.json").string());
        j["planned_outputs"] = planned;
        std::cout << j.dump(2) << "\n";
        return true;
    }

    void prepare() const {
        if (enabled()) fs::create_directories(dir_);
    }

    void finish(const std::string& hash_override = "") const {
        if (!enabled()) return;
        json arts = json::array();
        for (const auto& p : planned_) {
            const fs::path full = dir_ / p;
            if (!fs::exists(full) || fs::is_directory(full)) continue;
            arts.push_back({{"path", p}, {"bytes", fs::file_size(full)}, {"fnv1a64", file_hash(full)}});
        }
        json j{{"command", command_},
               {"config_hash", hash_override.empty() ? cfg_.hash() : hash_override},
               {"config", cfg_.to_json()},
               {"artifacts", arts},
               {"timestamp", timestamp()}};
        std::ofstream(dir_ / "manifest.json") << j.dump(2) << "\n";
    }

private:
    std::string command_;
    fs::path dir_;
    bool dry_;
    const RunConfig& cfg_;
    std::vector<std::string> planned_;
};

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    if (!out) throw DataError("cannot write '" + p.string() + "'");
    out << text;
}

Catalog open_catalog(const RunConfig& cfg) {
    const std::string& root = cfg.get("data_root");
    if (root.empty()) throw UsageError("no dataset root (set data_root or pass --data)");
    std::optional<fs::path> manifest;
    if (!cfg.get("manifest").empty()) manifest = cfg.get("manifest");
    Catalog c = scan_dataset(root, manifest, cfg.get_bool("fine_grained"));
    for (const auto& w : c.warnings) std::cerr << "warning: " << w << "\n";
    return c;
}

std::vector<std::string> pick_categories(const Catalog& catalog, const std::string& split_path,
                                         const std::string& which) {
    if (split_path.empty()) {
        if (which != "all") throw UsageError("--which " + which + " needs --split");
        return catalog.categories();
    }
    const Split split = Split::load(split_path);
    if (which == "seen") return split.seen;
    if (which == "unseen") return split.unseen;
    if (which == "all") {
        std::vector<std::string> all = split.seen;
        all.insert(all.end(), split.unseen.begin(), split.unseen.end());
        return all;
    }
    throw UsageError("--which must be seen, unseen or all");
}

struct OpenedModel {
    std::unique_ptr<DpClipModel> model;
    // Hash stamped on derived artifacts: the checkpoint's when there is one.
    std::string hash;
};

OpenedModel open_model(const RunConfig& cfg, const std::string& checkpoint, bool required) {
    if (checkpoint.empty() && required) throw UsageError("--checkpoint is required");
    OpenedModel out{std::make_unique<DpClipModel>(cfg.model_config()), cfg.hash()};
    if (!checkpoint.empty()) {
        if (!fs::exists(checkpoint)) throw DataError("checkpoint '" + checkpoint + "' does not exist");
        const TensorFile file = TensorFile::load(checkpoint);
        load_checkpoint_parameters(*out.model, file);
        auto it = file.metadata().find("config_hash");
        if (it != file.metadata().end()) out.hash = it->second;
    }
    return out;
}

void print_report(MetricsReport& report, Outputs& outs, const std::string& stem) {
    report.timestamp = timestamp();
    std::cout << report.to_json().dump(2) << "\n";
    if (outs.enabled()) {
        write_text(outs.path(stem + ".json"), report.to_json().dump(2) + "\n");
        write_text(outs.path(stem + ".txt"), report.to_table());
    }
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
}

struct ModelSource {
    std::string checkpoint;
    std::string split;
    std::string supports;
    std::string which = "unseen";
};

std::vector<EmbeddingRecord> embed_from_model(const RunConfig& cfg, const ModelSource& src, std::string* hash) {
    auto [model, model_hash] = open_model(cfg, src.checkpoint, false);
    if (hash != nullptr) *hash = model_hash;
    const Catalog catalog = open_catalog(cfg);
    const auto categories = pick_categories(catalog, src.split, src.which);
    ImageStore images(catalog.root, *model);
    std::optional<SupportAssignment> supports;
    if (!src.supports.empty()) supports = SupportAssignment::load(src.supports);
    ExtractOptions opts;
    opts.supports = supports ? &*supports : nullptr;
    opts.exclude_support_sketch = cfg.get_bool("exclude_support_sketch");
    return extract_embeddings(*model, catalog, images, categories, opts);
}

// Loads two embedding files; refuses differing config hashes unless forced.
std::string load_pair(const std::vector<std::string>& paths, bool force, std::vector<EmbeddingRecord>& sketches,
                      std::vector<EmbeddingRecord>& photos) {
    if (paths.size() != 2) throw UsageError("--embeddings takes exactly two files");
    const EmbeddingFile a = EmbeddingFile::load(paths[0]);
    const EmbeddingFile b = EmbeddingFile::load(paths[1]);
    if (a.config_hash != b.config_hash && !force) {
        throw DataError("embedding files carry different config hashes (" + a.config_hash + " vs " + b.config_hash +
                        "); pass --force to compare anyway");
    }
    for (const auto* f : {&a, &b}) split_by_modality(f->records, sketches, photos);
    return a.config_hash;
}

json audit_table(const RunConfig& cfg) {
    ModelConfig mc = cfg.model_config();
    const BackboneConfig& b = mc.backbone;
    const std::int64_t C = b.embed_dim, L = b.num_layers, p = b.patch_size, G = b.grid_side();
    const std::int64_t layer = 4 * C + (3 * C * C + 3 * C) + (C * C + C) + 2 * (static_cast<std::int64_t>(b.mlp_dim()) * C) +
                               b.mlp_dim() + C;
    const std::int64_t visual = C * 3 * p * p + C + (G * G + 1) * C + 2 * C + L * layer + 2 * C + C * b.text_dim;
    const std::int64_t T = b.text_width, TL = b.text_layers;
    const std::int64_t tlayer = 4 * T + (3 * T * T + 3 * T) + (T * T + T) + 8 * T * T + 4 * T + T;
    const std::int64_t text = static_cast<std::int64_t>(b.vocab_size) * T + b.context_length * T + TL * tlayer + 2 * T +
                              T * b.text_dim;

    // Added modules are built for real in a scratch store.
    ParameterStore store;
    Rng rng(0);
    const TransformerLayer host = TransformerLayer::create(store, "visual.host", static_cast<int>(C), b.num_heads,
                                                           b.mlp_ratio, static_cast<int>(L), nullptr);
    if (mc.visual_prompts) VisualPrompting(b, mc.prompt_tokens, store, rng);
    TextualPrompting(b, mc.scaling, mc.side_dim,
                     mc.text_source == TextSource::learnable_prompt ? mc.text_prompt_len : 0, store, rng);
    if (mc.patch_matching) PatchMatching(b, host, store);

    json rows = json::array();
    auto row = [&](const std::string& name, std::int64_t n) { rows.push_back({{"module", name}, {"parameters", n}}); };
    row("backbone.visual", visual);
    row("backbone.text", text);
    row("visual_norms (trainable)", L * 4 * C + 4 * C);
    row("prompt.token_bank", store.count_scalars("prompt.bank."));
    row("prompt.generator", store.count_scalars("prompt.generator."));
    row("prompt.support_conv", store.count_scalars("prompt.support_conv."));
    row("scaling.text_mlp", store.count_scalars("scaling.text_mlp."));
    row("scaling.sideway", store.count_scalars("scaling.adapter."));
    row("text_prompt", store.count_scalars("text_prompt."));
    row("local.norms", store.count_scalars("local.") - 4 * (C * C + C));
    row("local.proj", mc.patch_matching ? 4 * (C * C + C) : 0);
    return rows;
}

int run(int argc, char** argv) {
    CLI::App app{"dpclip: prompt-tuned CLIP for zero-shot sketch-based image retrieval"};
    app.require_subcommand(1);
    CommonArgs common;

    // make-toy
    ToyDatasetSpec toy;
    auto* make_toy = app.add_subcommand("make-toy", "write a synthetic fine-grained dataset");
    add_common(make_toy, common, true);
    make_toy->add_option("--categories", toy.categories);
    make_toy->add_option("--instances", toy.instances);
    make_toy->add_option("--sketches", toy.sketches_per_instance);
    make_toy->add_option("--size", toy.image_size);
    make_toy->add_option("--toy-seed", toy.seed);

    // shared flag storage
    std::string data, split_path, supports_path, checkpoint, resume, which = "unseen", seed, image, category;
    std::vector<std::string> embeddings;
    std::string report_path, protocol = "fg", mode, ls;
    bool force = false, use_inputs = false;
    int layer = -1;

    auto* prep = app.add_subcommand("prepare-splits", "seeded seen/unseen category split");
    add_common(prep, common, true);
    prep->add_option("--data", data, "dataset root");

    auto* sel = app.add_subcommand("select-support", "pick one sketch and two photos per category");
    add_common(sel, common, true);
    sel->add_option("--data", data, "dataset root");
    sel->add_option("--split", split_path, "split file");
    sel->add_option("--which", which, "seen | unseen | all")->default_val("all");

    auto* train = app.add_subcommand("train", "train the added modules");
    add_common(train, common, true);
    train->add_option("--data", data, "dataset root");
    train->add_option("--split", split_path, "split file")->required();
    train->add_option("--seed", seed, "training seed");
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* embed = app.add_subcommand("embed", "write sketch and photo embedding files");
    add_common(embed, common, true);
    embed->add_option("--checkpoint", checkpoint);
    embed->add_option("--data", data);
    embed->add_option("--split", split_path);
    embed->add_option("--supports", supports_path);
    embed->add_option("--which", which, "seen | unseen | all");

    auto add_eval = [&](CLI::App* cmd) {
        add_common(cmd, common, false);
        cmd->add_option("--embeddings", embeddings, "query and gallery embedding files")->expected(2);
        cmd->add_option("--checkpoint", checkpoint);
        cmd->add_option("--data", data);
        cmd->add_option("--split", split_path);
        cmd->add_option("--supports", supports_path);
        cmd->add_option("--which", which, "seen | unseen | all");
        cmd->add_flag("--force", force, "accept embedding files with different config hashes");
    };
    auto* eval_fg = app.add_subcommand("eval-fg", "fine-grained evaluation (Acc@1/5/10)");
    add_eval(eval_fg);
    auto* eval_cat = app.add_subcommand("eval-cat", "category-level evaluation (mAP, Prec@N)");
    add_eval(eval_cat);

    auto* vis = app.add_subcommand("visualize", "prompt/image-token similarity maps");
    add_common(vis, common, true);
    vis->add_option("--checkpoint", checkpoint)->required();
    vis->add_option("--image", image)->required();
    vis->add_option("--category", category, "support category")->required();
    vis->add_option("--data", data);
    vis->add_option("--supports", supports_path);
    vis->add_option("--layer", layer, "vision layer (default: last)");
    vis->add_flag("--use-inputs", use_inputs, "use layer inputs instead of outputs");

    auto* oracle_cmd = app.add_subcommand("oracle-check", "compare fast metrics with the brute-force oracle");
    add_common(oracle_cmd, common, false);
    oracle_cmd->add_option("--embeddings", embeddings)->expected(2)->required();
    oracle_cmd->add_option("--report", report_path, "report whose hash must match");
    oracle_cmd->add_option("--protocol", protocol, "fg | cat");
    oracle_cmd->add_flag("--force", force);

    auto* audit = app.add_subcommand("param-audit", "count parameters added by each module");
    add_common(audit, common, false);
    audit->add_option("--mode", mode, "scaling mode");
    audit->add_option("--ls", ls, "side-way hidden size");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        std::cerr << app.help();
        return 1;
    }

    std::map<std::string, std::string> flags{{"data_root", data}, {"seed", seed}, {"scaling", mode}, {"side_dim", ls}};
    const RunConfig cfg = resolve(common, flags);

    if (make_toy->parsed()) {
        Outputs outs("make-toy", common, cfg);
        outs.path("photo");
        outs.path("sketch");
        if (outs.plan_only()) return 0;
        write_toy_dataset(common.out, toy);
        std::cout << "wrote toy dataset to " << common.out << "\n";
        return 0;
    }

    if (prep->parsed()) {
        Outputs outs("prepare-splits", common, cfg);
        const fs::path out = outs.path("split.json");
        if (outs.plan_only()) return 0;
        const Catalog catalog = open_catalog(cfg);
        const Split split = make_split(catalog, cfg.get_int("unseen_count"), cfg.get_u64("split_seed"));
        outs.prepare();
        split.save(out);
        outs.finish();
        std::cout << "seen " << split.seen.size() << ", unseen " << split.unseen.size() << "\n";
        return 0;
    }

    if (sel->parsed()) {
        Outputs outs("select-support", common, cfg);
        const fs::path out = outs.path("supports.json");
        if (outs.plan_only()) return 0;
        const Catalog catalog = open_catalog(cfg);
        const auto cats = pick_categories(catalog, split_path, which);
        const SupportAssignment a = select_supports(catalog, cats, cfg.get_u64("support_seed"));
        outs.prepare();
        a.save(out);
        outs.finish();
        std::cout << "support sets for " << a.sets.size() << " categories\n";
        return 0;
    }

    if (train->parsed()) {
        Outputs outs("train", common, cfg);
        const fs::path final_path = outs.path("checkpoint.safetensors");
        const fs::path log_path = outs.path("train_log.jsonl");
        TrainOptions opts = cfg.train_options();
        if (opts.checkpoint_every > 0) outs.path("checkpoints/");
        if (outs.plan_only()) return 0;
        DpClipModel model(cfg.model_config());
        const Catalog catalog = open_catalog(cfg);
        const Split split = Split::load(split_path);
        Trainer trainer(model, catalog, split, opts);
        if (!resume.empty()) trainer.resume(TensorFile::load(resume));
        outs.prepare();
        std::ofstream log(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
        std::vector<std::string> periodic;
        trainer.run(
            [&](const StepRecord& r) {
                log << r.to_json(trainer.optimizer()).dump() << "\n";
                log.flush();
            },
            [&](const TensorFile& f, std::int64_t step) {
                fs::create_directories(fs::path(common.out) / "checkpoints");
                const std::string rel = "checkpoints/step_" + std::to_string(step) + ".safetensors";
                f.save(outs.path(rel));
            });
        trainer.checkpoint().save(final_path);
        log.close();
        outs.finish();
        std::cout << "trained " << trainer.current_step() << " steps; checkpoint " << final_path.string() << "\n";
        return 0;
    }

    if (embed->parsed()) {
        Outputs outs("embed", common, cfg);
        const fs::path sk = outs.path("sketches.emb");
        const fs::path ph = outs.path("photos.emb");
        if (outs.plan_only()) return 0;
        std::string hash;
        const auto records = embed_from_model(cfg, {checkpoint, split_path, supports_path, which}, &hash);
        EmbeddingFile sketches, photos;
        split_by_modality(records, sketches.records, photos.records);
        for (auto* f : {&sketches, &photos}) {
            f->dims = records.empty() ? 0 : static_cast<int>(records[0].global.size());
            f->has_locals = !records.empty() && !records[0].locals.empty();
            f->config_hash = hash;
        }
        outs.prepare();
        sketches.save(sk);
        photos.save(ph);
        outs.finish(hash);
        std::cout << "embedded " << sketches.records.size() << " sketches and " << photos.records.size() << " photos\n";
        return 0;
    }

    if (eval_fg->parsed() || eval_cat->parsed()) {
        const bool fg = eval_fg->parsed();
        Outputs outs(fg ? "eval-fg" : "eval-cat", common, cfg);
        if (outs.enabled()) {
            outs.path(fg ? "report_fg.json" : "report_cat.json");
            outs.path(fg ? "report_fg.txt" : "report_cat.txt");
        }
        if (outs.plan_only()) return 0;
        std::vector<EmbeddingRecord> sketches, photos;
        std::string hash = cfg.hash();
        if (!embeddings.empty()) {
            hash = load_pair(embeddings, force, sketches, photos);
        } else {
            split_by_modality(embed_from_model(cfg, {checkpoint, split_path, supports_path, which}, &hash), sketches,
                              photos);
        }
        const DistanceKind kind = parse_distance_kind(cfg.get("distance"));
        MetricsReport report = fg ? eval_fine_grained(sketches, photos, kind) : eval_category_level(sketches, photos, kind);
        report.config_hash = hash;
        outs.prepare();
        print_report(report, outs, fg ? "report_fg" : "report_cat");
        outs.finish(hash);
        return 0;
    }

    if (vis->parsed()) {
        Outputs outs("visualize", common, cfg);
        auto model_cfg = cfg.model_config();
        const fs::path mean_csv = outs.path("similarity_mean.csv");
        for (int k = 0; k < model_cfg.prompt_tokens; ++k) outs.path("similarity_prompt_" + std::to_string(k) + ".csv");
        const fs::path overlay = outs.path("overlay.png");
        const fs::path meta = outs.path("similarity.json");
        if (outs.plan_only()) return 0;
        auto [model, hash] = open_model(cfg, checkpoint, true);
        SupportSet set;
        if (!supports_path.empty()) {
            const auto a = SupportAssignment::load(supports_path);
            auto it = a.sets.find(category);
            if (it == a.sets.end()) throw DataError("no support set for '" + category + "' in " + supports_path);
            set = it->second;
        } else {
            set = select_support(open_catalog(cfg), category, cfg.get_u64("support_seed"));
        }
        ImageStore images(cfg.get("data_root"), *model);
        fs::path image_path(image);
        if (!fs::exists(image_path) && image_path.is_relative()) image_path = fs::path(cfg.get("data_root")) / image_path;
        const Image raw =
            resize_bilinear(load_image(image_path), model_cfg.backbone.image_size, model_cfg.backbone.image_size);
        const auto support = load_support(images, set);
        const CategoryContext ctx = model->context(category, support);
        const SimilarityMap map = prompt_similarity(*model, model->prepare(raw), ctx, {layer, use_inputs});
        outs.prepare();
        write_csv(map.mean, mean_csv);
        for (std::size_t k = 0; k < map.per_prompt.size(); ++k) {
            write_csv(map.per_prompt[k], fs::path(common.out) / ("similarity_prompt_" + std::to_string(k) + ".csv"));
        }
        save_image(similarity_overlay(raw, map.mean), overlay);
        write_text(meta, json{{"layer", map.layer},
                              {"use_inputs", use_inputs},
                              {"category", category},
                              {"image", image},
                              {"config_hash", hash}}
                             .dump(2) +
                             "\n");
        outs.finish(hash);
        std::cout << "similarity maps for layer " << map.layer << " written to " << common.out << "\n";
        return 0;
    }

    if (oracle_cmd->parsed()) {
        Outputs outs("oracle-check", common, cfg);
        if (outs.plan_only()) return 0;
        std::vector<EmbeddingRecord> sketches, photos;
        const std::string hash = load_pair(embeddings, force, sketches, photos);
        if (!report_path.empty()) {
            std::ifstream in(report_path);
            if (!in) throw DataError("cannot read report '" + report_path + "'");
            const json r = json::parse(in);
            const std::string report_hash = r.value("config_hash", "");
            if (report_hash != hash && !force) {
                throw DataError("report hash " + report_hash + " differs from embedding hash " + hash +
                                "; pass --force to compare anyway");
            }
        }
        const DistanceKind kind = parse_distance_kind(cfg.get("distance"));
        json result{{"config_hash", hash}, {"protocol", protocol}};
        int mismatches = 0;
        auto compare = [&](const std::map<std::string, double>& fast, const std::map<std::string, double>& slow,
                           const std::string& scope) {
            for (const auto& [k, v] : fast) {
                if (slow.at(k) != v) {
                    ++mismatches;
                    std::cerr << scope << " " << k << ": fast " << v << " oracle " << slow.at(k) << "\n";
                }
            }
        };
        auto to_rows = [](const Mat& m) {
            oracle::Matrix rows(static_cast<std::size_t>(m.rows()));
            for (Eigen::Index r = 0; r < m.rows(); ++r) rows[static_cast<std::size_t>(r)].assign(m.row(r).data(), m.row(r).data() + m.cols());
            return rows;
        };
        if (protocol == "fg") {
            std::set<std::string> cats;
            for (const auto& s : sketches) cats.insert(s.category);
            for (const auto& c : cats) {
                std::vector<EmbeddingRecord> q, g;
                for (const auto& p : photos) {
                    if (p.category == c) g.push_back(p);
                }
                std::vector<int> truth;
                for (const auto& s : sketches) {
                    if (s.category != c) continue;
                    for (std::size_t j = 0; j < g.size(); ++j) {
                        if (g[j].instance == s.instance) {
                            q.push_back(s);
                            truth.push_back(static_cast<int>(j));
                            break;
                        }
                    }
                }
                if (q.empty()) continue;
                const Mat d = fuse_distances(q, g, kind).fused;
                compare(fine_grained_metrics(d, truth), oracle::fine_grained(to_rows(d), truth), c);
            }
        } else if (protocol == "cat") {
            std::map<std::string, int> ids;
            auto label = [&](const std::string& c) { return ids.emplace(c, static_cast<int>(ids.size())).first->second; };
            std::vector<int> ql, gl;
            for (const auto& p : photos) gl.push_back(label(p.category));
            for (const auto& s : sketches) ql.push_back(label(s.category));
            const Mat d = fuse_distances(sketches, photos, kind).fused;
            compare(category_level_metrics(d, ql, gl), oracle::category_level(to_rows(d), ql, gl), "all");
        } else {
            throw UsageError("--protocol must be fg or cat");
        }
        result["mismatches"] = mismatches;
        result["status"] = mismatches == 0 ? "match" : "mismatch";
        std::cout << result.dump(2) << "\n";
        return mismatches == 0 ? 0 : 3;
    }

    if (audit->parsed()) {
        Outputs outs("param-audit", common, cfg);
        if (outs.enabled()) outs.path("param_audit.json");
        if (outs.plan_only()) return 0;
        const json rows = audit_table(cfg);
        for (const auto& r : rows) {
            std::cout << std::left << std::setw(28) << r["module"].get<std::string>() << std::right << std::setw(14)
                      << r["parameters"].get<std::int64_t>() << "\n";
        }
        if (outs.enabled()) {
            outs.prepare();
            write_text(fs::path(common.out) / "param_audit.json",
                       json{{"rows", rows}, {"config_hash", cfg.hash()}}.dump(2) + "\n");
            outs.finish();
        }
        return 0;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
