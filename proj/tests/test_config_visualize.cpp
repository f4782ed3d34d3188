#include "support.hpp"

#include "dpclip/errors.hpp"
#include "dpclip/pipeline.hpp"
#include "dpclip/train.hpp"
#include "dpclip/visualize.hpp"

#include <doctest.h>

#include <fstream>

using namespace dpclip;
using dpclip::testing::TempDir;
using dpclip::testing::toy_dataset;
using dpclip::testing::toy_run_config;

TEST_CASE("config files merge, override and reject unknown keys") {
    RunConfig cfg;
    const std::string default_hash = cfg.hash();
    cfg.merge_text("# comment\nmargin = 0.2\n\nmining=random\n", "a.cfg");
    CHECK(cfg.get_double("margin") == 0.2);
    CHECK(cfg.get("mining") == "random");
    CHECK(cfg.hash() != default_hash);
    cfg.set("margin", "0.15");
    cfg.set("mining", "hardest");
    CHECK(cfg.hash() != default_hash);  // spelling is part of the canonical text

    try {
        cfg.merge_text("margin = 1\nbogus = 3\n", "b.cfg");
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("b.cfg:2") != std::string::npos);
    }
    CHECK_THROWS_AS(cfg.merge_text("no equals sign\n"), ConfigError);
    CHECK_THROWS_AS(cfg.set("nope", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.merge_file("/nonexistent.cfg"), ConfigError);

    cfg.set("batch_size", "12x");
    CHECK_THROWS_AS(cfg.get_int("batch_size"), ConfigError);
    cfg.set("patch_matching", "maybe");
    CHECK_THROWS_AS(cfg.get_bool("patch_matching"), ConfigError);
}

TEST_CASE("config hash is order independent and canonical text is sorted") {
    RunConfig a, b;
    a.merge_text("margin = 0.3\nseed = 4\n");
    b.merge_text("seed=4\nmargin=0.3\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 16);
    const std::string text = a.canonical();
    CHECK(text.find("margin=0.3\n") != std::string::npos);
    CHECK(text.find("batch_size=") < text.find("margin="));
    CHECK(a.hash() == hex64(fnv1a64(text)));
}

TEST_CASE("resolved configs map onto model and training options") {
    RunConfig cfg = toy_run_config();
    cfg.set("scaling", "direct");
    cfg.set("prompt_mode", "common");
    cfg.set("patch_matching", "false");
    cfg.set("margin", "0.25");
    const ModelConfig m = cfg.model_config();
    CHECK(m.scaling == ScalingMode::direct);
    CHECK(m.prompt_mode == PromptMode::common);
    CHECK_FALSE(m.patch_matching);
    CHECK(m.backbone.weight_source == WeightSource::toy_random);
    CHECK(m.backbone.embed_dim == 64);
    const TrainOptions t = cfg.train_options();
    CHECK(t.triplet.margin == 0.25);
    CHECK(t.batch_size == 12);
    CHECK(t.config_hash == cfg.hash());

    RunConfig defaults;
    const TrainOptions d = defaults.train_options();
    CHECK(d.schedule.lr_norm == 1e-6);
    CHECK(d.schedule.lr_module == 1e-5);
    CHECK(d.schedule.epochs == 60);
    CHECK(d.schedule.trade_off == 0.1);
    CHECK(d.triplet.margin == 0.15);

    cfg.set("text_source", "words");
    CHECK_THROWS_AS(cfg.model_config(), ConfigError);
}

namespace {

struct VisFixture {
    DpClipModel model{toy_run_config().model_config()};
    Catalog catalog = scan_dataset(toy_dataset(), std::nullopt);
    ImageStore images{catalog.root, model};

    CategoryContext context_for(const std::string& category) {
        const SupportSet s = select_support(catalog, category, 0);
        const auto support = load_support(images, s);
        return model.context(category, support);
    }
};

}  // namespace

TEST_CASE("prompt similarity maps") {
    VisFixture f;
    const auto photos = f.catalog.of("tree", Modality::photo);
    const Image img = f.images.prepared(photos.front()->path);

    const SimilarityMap cabin = prompt_similarity(f.model, img, f.context_for("cabin"), {});
    CHECK(cabin.layer == 1);
    CHECK(cabin.per_prompt.size() == 3);
    CHECK(cabin.mean.rows() == 7);
    CHECK(cabin.mean.cols() == 7);
    CHECK(cabin.mean.maxCoeff() <= 1.0);
    CHECK(cabin.mean.minCoeff() >= -1.0);

    const SimilarityMap tree = prompt_similarity(f.model, img, f.context_for("tree"), {});
    CHECK((cabin.mean - tree.mean).cwiseAbs().maxCoeff() > 0.0);

    const SimilarityMap inputs = prompt_similarity(f.model, img, f.context_for("cabin"), {0, true});
    CHECK(inputs.layer == 0);
    CHECK((inputs.mean - cabin.mean).cwiseAbs().maxCoeff() > 0.0);
    CHECK_THROWS(prompt_similarity(f.model, img, f.context_for("cabin"), {5, false}));

    TempDir dir("vis");
    write_csv(cabin.mean, dir.path() / "m.csv");
    const Mat back = read_csv(dir.path() / "m.csv");
    CHECK(back == cabin.mean);
    const Image overlay = similarity_overlay(load_image(toy_dataset() / photos.front()->path), cabin.mean);
    CHECK(overlay.height == 56);
}

TEST_CASE("constant image maps are flat once positional differences are removed") {
    VisFixture f;
    const Image img = f.model.prepare(dpclip::testing::constant_image(56, 0.5));
    const CategoryContext ctx = f.context_for("cabin");
    // With positions, a constant image still yields a spatially varying map
    // at toy init: zero-mean patch filters leave only the positional signal.
    const SimilarityMap with_pos = prompt_similarity(f.model, img, ctx, {});
    CHECK((with_pos.mean.array() - with_pos.mean.mean()).abs().maxCoeff() > 1e-3);

    Mat& pos = f.model.params().at("visual.positional_embedding").var.mutable_value();
    const RowVec shared = pos.row(1);
    for (Eigen::Index r = 1; r < pos.rows(); ++r) pos.row(r) = shared;
    const SimilarityMap m = prompt_similarity(f.model, img, ctx, {});
    CHECK((m.mean.array() - m.mean.mean()).abs().maxCoeff() < 1e-3);
}
