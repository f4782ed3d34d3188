#include "support.hpp"

#include "dpclip/errors.hpp"
#include "dpclip/oracle.hpp"
#include "dpclip/retrieval.hpp"

#include <doctest.h>

#include <fstream>

using namespace dpclip;
using dpclip::testing::TempDir;

namespace {

oracle::Matrix to_nested(const Mat& m) {
    oracle::Matrix out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(r)].push_back(m(r, c));
    }
    return out;
}

RowVec random_row(Rng& rng, int dims) {
    RowVec v(dims);
    for (int i = 0; i < dims; ++i) v(i) = rng.normal();
    return v;
}

EmbeddingRecord record(const std::string& cat, const std::string& inst, Modality m, RowVec g,
                       std::vector<RowVec> locals = {}) {
    EmbeddingRecord r;
    r.category = cat;
    r.instance = inst;
    r.modality = m;
    r.id = std::string(modality_name(m)) + "/" + cat + "/" + inst;
    r.global = std::move(g);
    r.locals = std::move(locals);
    return r;
}

}  // namespace

TEST_CASE("average precision by hand") {
    CHECK(average_precision({1, 0, 1}) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
    CHECK(average_precision({0, 1, 0, 1}, 2) == doctest::Approx(0.25));
    CHECK(average_precision({0, 0, 1}, 2) == 0.0);
    CHECK(average_precision({1, 1, 1}) == 1.0);
    CHECK_THROWS_AS(average_precision({}), UsageError);
    CHECK_THROWS_AS(average_precision({0, 0}), UsageError);
    CHECK(precision_at({0, 1}, 1) == 0.0);
    CHECK(precision_at({0, 1}, 2) == 0.5);
    CHECK(oracle::ap({1, 0, 1}, 3) == doctest::Approx(0.833333333333));
}

TEST_CASE("accuracy at k by hand, ties to the lower gallery index") {
    Mat d(2, 3);
    d << 0.1, 0.2, 0.3, 0.5, 0.4, 0.6;
    CHECK(acc_at_k(d, {1, 1}, 1) == 0.5);
    CHECK(acc_at_k(d, {1, 1}, 2) == 1.0);
    CHECK(acc_at_k(d, {2, 2}, 2) == 0.0);
    Mat tie(1, 2);
    tie << 0.5, 0.5;
    CHECK(acc_at_k(tie, {1}, 1) == 0.0);
    CHECK(acc_at_k(tie, {0}, 1) == 1.0);
    CHECK(rank_row(tie.row(0)) == std::vector<int>{0, 1});
    CHECK_THROWS_AS(acc_at_k(d, {3, 0}, 1), UsageError);
}

TEST_CASE("fast metrics agree with the brute-force oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
        const int q = 1 + static_cast<int>(rng.below(12));
        const int g = 1 + static_cast<int>(rng.below(30));
        Mat d(q, g);
        // Coarse values so ties are common.
        for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = static_cast<double>(rng.below(5)) / 4.0;
        std::vector<int> truth;
        for (int i = 0; i < q; ++i) truth.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(g))));
        const auto fast = fine_grained_metrics(d, truth);
        const auto slow = oracle::fine_grained(to_nested(d), truth);
        REQUIRE(fast.size() == slow.size());
        for (const auto& [k, v] : slow) CHECK(fast.at(k) == doctest::Approx(v).epsilon(1e-12));

        std::vector<int> ql, gl;
        for (int i = 0; i < q; ++i) ql.push_back(static_cast<int>(rng.below(3)));
        for (int i = 0; i < g; ++i) gl.push_back(static_cast<int>(rng.below(3)));
        for (int c = 0; c < 3; ++c) gl.push_back(c);  // every query label has a relevant item
        Mat d2(q, g + 3);
        for (Eigen::Index i = 0; i < d2.size(); ++i) d2.data()[i] = static_cast<double>(rng.below(7));
        const auto fc = category_level_metrics(d2, ql, gl);
        const auto sc = oracle::category_level(to_nested(d2), ql, gl);
        REQUIRE(fc.size() == sc.size());
        for (const auto& [k, v] : sc) CHECK(fc.at(k) == doctest::Approx(v).epsilon(1e-12));
    }
}

TEST_CASE("random embeddings retrieve at chance") {
    Rng rng(5);
    const int M = 20, trials = 400;
    double hits = 0;
    for (int t = 0; t < trials; ++t) {
        Mat q(1, 8), g(M, 8);
        for (Eigen::Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
        hits += acc_at_k(pairwise_distance(q, g, DistanceKind::cosine), {static_cast<int>(rng.below(M))}, 1);
    }
    // Binomial(400, 0.05): sd ~ 0.011.
    CHECK(std::abs(hits / trials - 1.0 / M) < 0.04);
}

TEST_CASE("distances") {
    Mat q(1, 2), g(3, 2);
    q << 1, 0;
    g << 2, 0, 0, 5, -1, 0;
    const Mat c = pairwise_distance(q, g, DistanceKind::cosine);
    CHECK(c(0, 0) == doctest::Approx(0.0));
    CHECK(c(0, 1) == doctest::Approx(1.0));
    CHECK(c(0, 2) == doctest::Approx(2.0));
    const Mat e = pairwise_distance(q, g, DistanceKind::euclidean_on_normalized);
    CHECK(e(0, 0) == doctest::Approx(0.0));
    CHECK(e(0, 1) == doctest::Approx(std::sqrt(2.0)));
    CHECK(e(0, 2) == doctest::Approx(2.0));
    CHECK_THROWS_AS(pairwise_distance(Mat::Zero(1, 2), g, DistanceKind::cosine), NumericError);
    CHECK(parse_distance_kind("cosine") == DistanceKind::cosine);
    CHECK(std::string(distance_kind_name(DistanceKind::euclidean_on_normalized)) == "euclidean_on_normalized");
}

TEST_CASE("distance fusion sums global and local terms") {
    Rng rng(3);
    std::vector<RowVec> ql, gl;
    for (int k = 0; k < 4; ++k) {
        ql.push_back(random_row(rng, 6));
        gl.push_back(random_row(rng, 6));
    }
    const auto qa = record("c", "a", Modality::sketch, random_row(rng, 6), ql);
    const auto ga = record("c", "a", Modality::photo, random_row(rng, 6), gl);
    const DistanceMatrix d = fuse_distances({qa}, {ga}, DistanceKind::cosine);
    double expect = pairwise_distance(qa.global, ga.global, DistanceKind::cosine)(0, 0);
    for (int k = 0; k < 4; ++k) expect += pairwise_distance(ql[k], gl[k], DistanceKind::cosine)(0, 0);
    CHECK(d.fused(0, 0) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(d.locals.size() == 4);

    // Invariant to positive rescaling of any embedding.
    auto scaled = qa;
    scaled.global *= 7.5;
    for (auto& l : scaled.locals) l *= 0.01;
    CHECK(fuse_distances({scaled}, {ga}, DistanceKind::cosine).fused(0, 0) == doctest::Approx(d.fused(0, 0)).epsilon(1e-12));

    const auto bare = record("c", "a", Modality::photo, random_row(rng, 6));
    CHECK_THROWS_AS(fuse_distances({qa}, {bare}, DistanceKind::cosine), ShapeError);
    CHECK(fuse_distances({bare}, {bare}, DistanceKind::cosine).fused(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("fine-grained evaluation groups by category and reports gaps") {
    RowVec x(2), y(2);
    x << 1, 0;
    y << 0, 1;
    const std::vector<EmbeddingRecord> photos{record("a", "p1", Modality::photo, x), record("a", "p2", Modality::photo, y),
                                              record("b", "p1", Modality::photo, y), record("b", "p2", Modality::photo, x)};
    const std::vector<EmbeddingRecord> sketches{
        record("a", "p1", Modality::sketch, x),  // correct
        record("b", "p1", Modality::sketch, x),  // wrong: x matches b/p2
        record("b", "ghost", Modality::sketch, x),
        record("c", "p1", Modality::sketch, x),
    };
    const MetricsReport r = eval_fine_grained(sketches, photos, DistanceKind::cosine);
    CHECK(r.per_category.at("a").at("acc@1") == 1.0);
    CHECK(r.per_category.at("b").at("acc@1") == 0.0);
    CHECK(r.per_category.at("b").at("acc@5") == 1.0);
    CHECK(r.aggregates.at("acc@1") == 0.5);
    CHECK(r.per_category.count("c") == 0);
    CHECK(r.warnings.size() == 2);
    CHECK(r.counts.at("b") == 1);

    const auto j = r.to_json();
    CHECK(j.at("aggregates").at("acc@1") == 0.5);
    CHECK(r.to_table().find("acc@1") != std::string::npos);

    const MetricsReport cat = eval_category_level(sketches, photos, DistanceKind::cosine);
    CHECK(cat.aggregates.count("map@all") == 1);
    CHECK(cat.warnings.size() == 1);  // category c has no photos
}

TEST_CASE("embedding file round trip") {
    TempDir dir("emb");
    Rng rng(2);
    EmbeddingFile f;
    f.dims = 5;
    f.has_locals = true;
    f.config_hash = "abc";
    for (int i = 0; i < 3; ++i) {
        std::vector<RowVec> locals;
        for (int k = 0; k < 4; ++k) locals.push_back(random_row(rng, 5));
        f.records.push_back(record("tree", "i" + std::to_string(i), i ? Modality::photo : Modality::sketch,
                                   random_row(rng, 5), locals));
    }
    f.save(dir.path() / "e.bin");
    const EmbeddingFile g = EmbeddingFile::load(dir.path() / "e.bin");
    CHECK(g.dims == 5);
    CHECK(g.has_locals);
    CHECK(g.config_hash == "abc");
    REQUIRE(g.records.size() == 3);
    CHECK(g.records[0].modality == Modality::sketch);
    CHECK(g.records[2].instance == "i2");
    CHECK((g.records[1].global - f.records[1].global).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((g.records[1].locals[3] - f.records[1].locals[3]).cwiseAbs().maxCoeff() < 1e-6);

    std::ofstream(dir.path() / "junk.bin") << "xx";
    CHECK_THROWS(EmbeddingFile::load(dir.path() / "junk.bin"));
}
