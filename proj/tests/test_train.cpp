#include "support.hpp"

#include "dpclip/errors.hpp"
#include "dpclip/train.hpp"

#include <doctest.h>

using namespace dpclip;
using dpclip::testing::toy_dataset;
using dpclip::testing::toy_run_config;

namespace {

RowVec vec2(double x, double y) {
    RowVec v(2);
    v << x, y;
    return v;
}

Embedding emb(const RowVec& g, const std::vector<RowVec>& locals = {}) {
    Embedding e;
    e.global = constant(g);
    for (const auto& l : locals) e.locals.push_back(constant(l));
    return e;
}

double cos_dist(const RowVec& a, const RowVec& b) { return 1.0 - a.dot(b) / (a.norm() * b.norm()); }

// Loop-based reference for one feature's term: hardest negative by
// (distance, index) among photos of another instance.
double reference_term(const std::vector<RowVec>& s, const std::vector<RowVec>& p, const std::vector<std::string>& ids,
                      double margin) {
    double sum = 0;
    int anchors = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        int best = -1;
        double best_d = 0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (ids[j] == ids[i]) continue;
            const double d = cos_dist(s[i], p[j]);
            if (best < 0 || d < best_d) {
                best = static_cast<int>(j);
                best_d = d;
            }
        }
        if (best < 0) continue;
        sum += std::max(0.0, cos_dist(s[i], p[i]) - best_d + margin);
        ++anchors;
    }
    return sum / anchors;
}

}  // namespace

TEST_CASE("triplet loss by hand") {
    const TripletConfig cfg;
    const double h = std::sqrt(2.0) / 2.0;
    CHECK(triplet_loss(vec2(1, 0), vec2(1, 0), vec2(0, 1), cfg) == 0.0);
    CHECK(triplet_loss(vec2(1, 0), vec2(0, 1), vec2(1, 0), cfg) == doctest::Approx(1.15));
    CHECK(triplet_loss(vec2(1, 0), vec2(h, h), vec2(0, 1), cfg) == 0.0);
    CHECK(triplet_loss(vec2(3, 0), vec2(0, 0.5), vec2(2, 0), cfg) == doctest::Approx(1.15));
    CHECK_THROWS_AS(triplet_loss(vec2(0, 0), vec2(1, 0), vec2(0, 1), cfg), NumericError);
    CHECK(parse_mining("hardest") == Mining::hardest_in_batch);
    CHECK(parse_mining("random_in_batch") == Mining::random_in_batch);
    CHECK_THROWS_AS(parse_mining("semi"), ConfigError);
}

TEST_CASE("batch loss combines global and local terms") {
    TripletConfig cfg;
    cfg.margin = 0.0;
    // Global: both anchors sit on their negative -> 1.0 each.
    // Local: anchor 0 loses 1.0, anchor 1 is satisfied -> mean 0.5.
    const RowVec x = vec2(1, 0), y = vec2(0, 1);
    const std::vector<Embedding> sketches{emb(x, {x, x, x, x}), emb(y, {x, x, x, x})};
    const std::vector<Embedding> photos{emb(y, {y, y, y, y}), emb(x, {x, x, x, x})};
    const BatchLoss l = batch_loss(sketches, photos, {"a", "b"}, cfg, 0.1);
    REQUIRE_FALSE(l.skipped);
    CHECK(l.global == doctest::Approx(1.0));
    for (double v : l.local) CHECK(v == doctest::Approx(0.5));
    CHECK(l.total.item() == doctest::Approx(1.2));

    const std::vector<Embedding> g_only{emb(x), emb(y)};
    const std::vector<Embedding> p_only{emb(y), emb(x)};
    CHECK(batch_loss(g_only, p_only, {"a", "b"}, cfg, 0.1).total.item() == doctest::Approx(1.0));

    const std::vector<Embedding> same{emb(x), emb(y)};
    CHECK(batch_loss(same, same, {"a", "b"}, TripletConfig{}, 0.1).total.item() == 0.0);

    CHECK(batch_loss({emb(x)}, {emb(x)}, {"a"}, cfg, 0.1).skipped);
    CHECK(batch_loss(same, same, {"a", "a"}, cfg, 0.1).skipped);
    CHECK_THROWS_AS(batch_loss(sketches, g_only, {"a", "b"}, cfg, 0.1), ShapeError);
}

TEST_CASE("hardest mining matches a loop reference") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(6));
        std::vector<RowVec> s, p;
        std::vector<std::string> ids;
        std::vector<Embedding> se, pe;
        for (int i = 0; i < n; ++i) {
            RowVec a(3), b(3);
            // Few distinct directions so distance ties occur.
            for (int k = 0; k < 3; ++k) {
                a(k) = static_cast<double>(rng.below(3)) - 0.5;
                b(k) = static_cast<double>(rng.below(3)) - 0.5;
            }
            s.push_back(a);
            p.push_back(b);
            se.push_back(emb(a));
            pe.push_back(emb(b));
            ids.push_back("i" + std::to_string(rng.below(static_cast<std::uint64_t>(n))));
        }
        const TripletConfig cfg;
        const BatchLoss l = batch_loss(se, pe, ids, cfg, 0.1);
        bool any_negative = false;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) any_negative |= ids[static_cast<std::size_t>(j)] != ids[static_cast<std::size_t>(i)];
        }
        if (!any_negative) {
            CHECK(l.skipped);
            continue;
        }
        REQUIRE_FALSE(l.skipped);
        CHECK(l.global == doctest::Approx(reference_term(s, p, ids, cfg.margin)).epsilon(1e-12));
        CHECK(l.global >= 0.0);
        for (std::size_t i = 0; i < l.negatives.size(); ++i) {
            const int j = l.negatives[i];
            if (j < 0) continue;
            CHECK(ids[static_cast<std::size_t>(j)] != ids[i]);
            for (int k = 0; k < j; ++k) {
                if (ids[static_cast<std::size_t>(k)] == ids[i]) continue;
                CHECK(cos_dist(s[i], p[static_cast<std::size_t>(k)]) > cos_dist(s[i], p[static_cast<std::size_t>(j)]));
            }
        }
    }
}

TEST_CASE("random mining draws an other-instance negative") {
    const RowVec x = vec2(1, 0), y = vec2(0, 1), z = vec2(1, 1);
    const std::vector<Embedding> e{emb(x), emb(y), emb(z)};
    TripletConfig cfg;
    cfg.mining = Mining::random_in_batch;
    Rng rng(1);
    for (int i = 0; i < 20; ++i) {
        const BatchLoss l = batch_loss(e, e, {"a", "a", "b"}, cfg, 0.1, &rng);
        CHECK(l.negatives[0] == 2);
        CHECK(l.negatives[2] != 2);
    }
}

TEST_CASE("optimizer group semantics") {
    ParameterStore store;
    store.create("visual.conv1.weight", Mat::Ones(1, 2), {2});
    store.create("visual.ln_post.weight", Mat::Ones(1, 2), {2});
    store.create("prompt.bank.0", Mat::Ones(1, 2), {2});
    const ParameterPolicy policy = classify_parameters(store);
    apply_policy(store, policy);
    Optimizer opt(store, policy, OptimSchedule{});
    CHECK(opt.group_size(Tier::norm) == 1);
    CHECK(opt.group_size(Tier::module) == 1);
    CHECK(opt.lr(Tier::norm) == 1e-6);
    CHECK(opt.lr(Tier::module) == 1e-5);

    SUBCASE("zero gradients leave every parameter unchanged") {
        for (auto& p : store.all()) p.var.node()->grad = Mat::Zero(1, 2);
        opt.step();
        for (const auto& p : store.all()) CHECK(p.var.value() == Mat::Ones(1, 2));
    }
    SUBCASE("first step moves by the tier rate; frozen stays fixed") {
        for (auto& p : store.all()) p.var.node()->grad = Mat::Ones(1, 2);
        opt.step();
        const double norm_step = 1.0 - store.at("visual.ln_post.weight").var.value()(0, 0);
        const double module_step = 1.0 - store.at("prompt.bank.0").var.value()(0, 0);
        CHECK(store.at("visual.conv1.weight").var.value() == Mat::Ones(1, 2));
        CHECK(norm_step == doctest::Approx(1e-6).epsilon(1e-6));
        CHECK(module_step / norm_step == doctest::Approx(10.0).epsilon(1e-6));
    }
    SUBCASE("parameters without a gradient are skipped") {
        store.at("prompt.bank.0").var.node()->grad = Mat::Ones(1, 2);
        opt.step();
        CHECK(store.at("visual.ln_post.weight").var.value() == Mat::Ones(1, 2));
        CHECK(store.at("prompt.bank.0").var.value()(0, 0) < 1.0);
    }
    SUBCASE("state round trip") {
        for (auto& p : store.all()) p.var.node()->grad = Mat::Ones(1, 2);
        opt.step();
        TensorFile f;
        opt.save_state(f);
        Optimizer other(store, policy, OptimSchedule{});
        other.load_state(f);
        CHECK(other.steps() == 1);
    }
    store.create("stray.thing", Mat::Ones(1, 1));
    CHECK_THROWS_AS(Optimizer(store, policy, OptimSchedule{}), ConfigError);
}

TEST_CASE("training resumes from a checkpoint identically") {
    RunConfig cfg = toy_run_config();
    cfg.set("data_root", toy_dataset().string());
    cfg.set("batch_size", "4");
    cfg.set("max_steps", "4");
    const Catalog catalog = scan_dataset(toy_dataset(), std::nullopt);
    const Split split = make_split(catalog, 1, 0);
    TrainOptions opts = cfg.train_options();

    DpClipModel full_model(cfg.model_config());
    Trainer full(full_model, catalog, split, opts);
    std::vector<double> losses;
    TensorFile mid;
    for (int i = 0; i < 4; ++i) {
        losses.push_back(full.step().loss);
        if (i == 1) mid = full.checkpoint();
    }
    CHECK(losses[0] > 0.0);

    DpClipModel resumed_model(cfg.model_config());
    Trainer resumed(resumed_model, catalog, split, opts);
    resumed.resume(mid);
    CHECK(resumed.current_step() == 2);
    CHECK(resumed.step().loss == losses[2]);
    CHECK(resumed.step().loss == losses[3]);
    for (const auto& name : full_model.policy().names_in(Tier::module)) {
        CHECK(full_model.params().at(name).var.value() == resumed_model.params().at(name).var.value());
    }

    TrainOptions other = opts;
    other.config_hash = "different";
    DpClipModel m3(cfg.model_config());
    Trainer t3(m3, catalog, split, other);
    CHECK_THROWS_AS(t3.resume(mid), ConfigError);

    DpClipModel m4(checkpoint_model_config(mid));
    load_checkpoint_parameters(m4, mid);
    CHECK(m4.params().at("prompt.bank.0").var.value() == mid.get("prompt.bank.0").as_matrix());
}

TEST_CASE("learnable text prompt tokens receive updates") {
    RunConfig cfg = toy_run_config();
    cfg.set("text_source", "learnable");
    cfg.set("batch_size", "4");
    const Catalog catalog = scan_dataset(toy_dataset(), std::nullopt);
    const Split split = make_split(catalog, 1, 0);
    DpClipModel model(cfg.model_config());
    REQUIRE(model.params().contains("text_prompt.tokens"));
    const Mat before = model.params().at("text_prompt.tokens").var.value();
    Trainer t(model, catalog, split, cfg.train_options());
    // The side-way output projection starts at zero, so the text path only
    // carries gradient from the second step on.
    for (int i = 0; i < 3; ++i) t.step();
    CHECK((model.params().at("text_prompt.tokens").var.value() - before).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("step records serialise to the log format") {
    ParameterStore store;
    Optimizer opt(store, ParameterPolicy{}, OptimSchedule{});
    StepRecord r;
    r.step = 3;
    r.loss = 0.5;
    r.loss_local = {0.1, 0.2, 0.3, 0.4};
    const auto j = r.to_json(opt);
    CHECK(j.at("step") == 3);
    CHECK(j.at("loss_local").size() == 4);
    CHECK(j.at("lr").at("module_tier") == 1e-5);
}
