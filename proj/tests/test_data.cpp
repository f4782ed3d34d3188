#include "support.hpp"

#include "dpclip/data.hpp"
#include "dpclip/errors.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace dpclip;
using dpclip::testing::TempDir;
using dpclip::testing::toy_dataset;

namespace {

void touch_png(const std::filesystem::path& p) {
    std::filesystem::create_directories(p.parent_path());
    save_image(Image(4, 4, 0.5), p);
}

}  // namespace

TEST_CASE("toy dataset scan follows the stem rule") {
    const Catalog cat = scan_dataset(toy_dataset(), std::nullopt);
    CHECK(cat.categories() == std::vector<std::string>{"airplane", "cabin", "tree"});
    CHECK(cat.records.size() == 3 * (6 + 12));
    CHECK(cat.warnings.empty());
    for (const auto& c : cat.categories()) {
        CHECK(cat.of(c, Modality::photo).size() == 6);
        CHECK(cat.of(c, Modality::sketch).size() == 12);
        CHECK(category_pairs(cat, c).size() == 12);
    }
    const auto sketches = cat.of("tree", Modality::sketch);
    const InstanceRecord& s = *sketches.front();
    CHECK(s.sketch_variant.has_value());
    const InstanceRecord* p = cat.photo_for("tree", s.instance_id);
    REQUIRE(p != nullptr);
    CHECK(std::filesystem::path(s.path).stem().string().rfind(std::filesystem::path(p->path).stem().string() + "-", 0) == 0);
    CHECK(s.id().rfind("sketch/tree/", 0) == 0);
}

TEST_CASE("orphan sketches are reported, manifest rows override the stem rule") {
    TempDir dir("scan");
    touch_png(dir.path() / "photo" / "owl" / "a.png");
    touch_png(dir.path() / "photo" / "owl" / "b.png");
    touch_png(dir.path() / "sketch" / "owl" / "a-1.png");
    touch_png(dir.path() / "sketch" / "owl" / "zz.png");

    const Catalog plain = scan_dataset(dir.path(), std::nullopt);
    CHECK(plain.warnings.size() == 1);
    CHECK(plain.warnings[0].find("zz") != std::string::npos);
    CHECK(category_pairs(plain, "owl").size() == 1);
    CHECK(scan_dataset(dir.path(), std::nullopt, false).warnings.empty());

    std::ofstream(dir.path() / "m.csv") << "path,modality,category,instance_id\n"
                                        << "sketch/owl/zz.png,sketch,owl,b\n";
    const Catalog over = scan_dataset(dir.path(), dir.path() / "m.csv");
    CHECK(over.warnings.empty());
    CHECK(category_pairs(over, "owl").size() == 2);

    std::ofstream(dir.path() / "bad.csv") << "path,modality\nx.png,photo\n";
    CHECK_THROWS_AS(scan_dataset(dir.path(), dir.path() / "bad.csv"), DataError);
    CHECK_THROWS_AS(scan_dataset(dir.path(), dir.path() / "absent.csv"), DataError);
}

TEST_CASE("unreadable images fail the scan") {
    TempDir dir("scan_bad");
    std::filesystem::create_directories(dir.path() / "photo" / "owl");
    std::ofstream(dir.path() / "photo" / "owl" / "x.png") << "";
    std::filesystem::permissions(dir.path() / "photo" / "owl" / "x.png", std::filesystem::perms::none);
    // Root ignores permission bits; only check when they are enforced.
    if (!std::ifstream(dir.path() / "photo" / "owl" / "x.png")) {
        CHECK_THROWS_AS(scan_dataset(dir.path(), std::nullopt), DataError);
    }
}

TEST_CASE("splits are seeded, disjoint and round trip") {
    const Catalog cat = scan_dataset(toy_dataset(), std::nullopt);
    const Split a = make_split(cat, 1, 7);
    const Split b = make_split(cat, 1, 7);
    CHECK(a.seen == b.seen);
    CHECK(a.unseen == b.unseen);
    CHECK(a.unseen.size() == 1);
    CHECK(a.seen.size() == 2);
    CHECK_NOTHROW(a.validate());
    std::set<std::string> held;
    for (std::uint64_t s = 0; s < 20; ++s) held.insert(make_split(cat, 1, s).unseen[0]);
    CHECK(held.size() > 1);
    CHECK_THROWS_AS(make_split(cat, 4, 0), UsageError);

    TempDir dir("split");
    a.save(dir.path() / "split.json");
    const Split c = Split::load(dir.path() / "split.json");
    CHECK(c.seen == a.seen);
    CHECK(c.unseen == a.unseen);

    Split bad{{"x"}, {"x"}};
    CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("support selection is deterministic per seed") {
    const Catalog cat = scan_dataset(toy_dataset(), std::nullopt);
    const SupportSet a = select_support(cat, "tree", 3);
    const SupportSet b = select_support(cat, "tree", 3);
    CHECK(a.sketch == b.sketch);
    CHECK(a.photo_1 == b.photo_1);
    CHECK(a.photo_2 == b.photo_2);
    CHECK(a.photo_1 != a.photo_2);
    CHECK(a.sketch.rfind("sketch/tree/", 0) == 0);

    bool differs = false;
    for (std::uint64_t s = 4; s < 12 && !differs; ++s) {
        const SupportSet c = select_support(cat, "tree", s);
        differs = c.sketch != a.sketch || c.photo_1 != a.photo_1 || c.photo_2 != a.photo_2;
    }
    CHECK(differs);

    TempDir dir("support");
    const SupportAssignment all = select_supports(cat, cat.categories(), 3);
    all.save(dir.path() / "s.json");
    const SupportAssignment back = SupportAssignment::load(dir.path() / "s.json");
    CHECK(back.seed == 3);
    CHECK(back.sets.at("tree").photo_2 == a.photo_2);

    TempDir tiny("support_tiny");
    touch_png(tiny.path() / "photo" / "owl" / "a.png");
    touch_png(tiny.path() / "sketch" / "owl" / "a-1.png");
    CHECK_THROWS_AS(select_support(scan_dataset(tiny.path(), std::nullopt), "owl", 0), DataError);
}

TEST_CASE("batches come from one seen category") {
    const Catalog cat = scan_dataset(toy_dataset(), std::nullopt);
    const Split split = make_split(cat, 1, 0);
    Rng rng(1);
    std::set<std::string> categories;
    for (int i = 0; i < 30; ++i) {
        const Batch b = sample_batch(cat, split, 5, rng);
        categories.insert(b.category);
        CHECK(split.is_seen(b.category));
        CHECK(b.pairs.size() == 5);
        std::set<const InstanceRecord*> distinct;
        for (const auto& p : b.pairs) {
            CHECK(p.sketch->category == b.category);
            CHECK(p.photo->instance_id == p.sketch->instance_id);
            distinct.insert(p.sketch);
        }
        CHECK(distinct.size() == 5);  // no repeats while pairs last
    }
    CHECK(categories.size() == 2);

    const Batch big = sample_batch(cat, split, 20, rng);
    CHECK(big.pairs.size() == 20);
    std::set<const InstanceRecord*> distinct;
    for (const auto& p : big.pairs) distinct.insert(p.sketch);
    CHECK(distinct.size() == 12);

    CHECK_THROWS_AS(sample_batch(cat, split, 0, rng), UsageError);
    CHECK_THROWS_AS(sample_batch(cat, Split{{}, cat.categories()}, 4, rng), DataError);
    CHECK(count_training_pairs(cat, split) == 24);
    CHECK(batches_per_epoch(24, 5) == 5);
    CHECK(batches_per_epoch(24, 12) == 2);
}

TEST_CASE("paired augmentation") {
    Image sketch(2, 2, 1.0), photo(2, 2);
    sketch.at(0, 0, 0) = 0.0;
    photo.at(0, 0, 0) = 1.0;
    const ImagePair pair{sketch, photo};

    const ImagePair same = augment(pair, AugmentFlags{});
    CHECK(same.sketch == sketch);
    CHECK(same.photo == photo);

    const ImagePair flipped = augment(pair, AugmentFlags{true, false});
    CHECK(flipped.sketch.at(0, 0, 1) == 0.0);
    CHECK(flipped.photo.at(0, 0, 1) == 1.0);

    const ImagePair gray = augment(pair, AugmentFlags{false, true});
    CHECK(gray.sketch == sketch);
    CHECK(gray.photo.at(1, 0, 0) == doctest::Approx(0.299));

    Rng rng(0);
    int flips = 0, grays = 0;
    for (int i = 0; i < 4000; ++i) {
        const AugmentFlags f = draw_augment(rng);
        flips += f.flipped;
        grays += f.photo_grayscale;
    }
    CHECK(std::abs(flips / 4000.0 - 0.5) < 0.05);
    CHECK(std::abs(grays / 4000.0 - 0.5) < 0.05);
}

TEST_CASE("toy dataset generation is deterministic") {
    TempDir a("toy_a"), b("toy_b");
    ToyDatasetSpec spec;
    spec.categories = 2;
    spec.instances = 2;
    spec.sketches_per_instance = 1;
    write_toy_dataset(a.path(), spec);
    write_toy_dataset(b.path(), spec);
    const Catalog ca = scan_dataset(a.path(), std::nullopt);
    const Catalog cb = scan_dataset(b.path(), std::nullopt);
    REQUIRE(ca.records.size() == 8);
    for (std::size_t i = 0; i < ca.records.size(); ++i) {
        CHECK(ca.records[i].path == cb.records[i].path);
        CHECK(load_image(ca.resolve(ca.records[i])) == load_image(cb.resolve(cb.records[i])));
    }
}
