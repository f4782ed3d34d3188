#include "support.hpp"

#include "dpclip/errors.hpp"
#include "dpclip/image.hpp"
#include "dpclip/params.hpp"
#include "dpclip/rng.hpp"
#include "dpclip/tensor_file.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>

using namespace dpclip;
using dpclip::testing::TempDir;

TEST_CASE("rng streams are reproducible and restorable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    a.normal();  // leaves a spare variate pending
    const std::string saved = a.state();
    std::vector<double> expected;
    for (int i = 0; i < 10; ++i) expected.push_back(a.normal());
    Rng c;
    c.restore(saved);
    for (int i = 0; i < 10; ++i) CHECK(c.normal() == expected[static_cast<std::size_t>(i)]);
}

TEST_CASE("rng variates respect their ranges") {
    Rng r(3);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(r.below(7) < 7u);
    }
    double sum = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("derived streams differ by key") {
    CHECK(Rng::derive(1, 2, 3).next_u64() == Rng::derive(1, 2, 3).next_u64());
    CHECK(Rng::derive(1, 2, 3).next_u64() != Rng::derive(1, 2, 4).next_u64());
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("tensor file round trip in every dtype") {
    TempDir dir("tensors");
    Mat m(2, 3);
    m << 1.0, -2.5, 0.125, 3.0, 65504.0, -0.0;
    TensorFile f;
    f.put("a.f64", m, {2, 3}, DType::F64);
    f.put("b.f32", m, {2, 3}, DType::F32);
    f.put("c.f16", m, {3, 2}, DType::F16);
    f.metadata()["note"] = "hello";
    f.save(dir.path() / "t.safetensors");

    const TensorFile g = TensorFile::load(dir.path() / "t.safetensors");
    CHECK(g.metadata().at("note") == "hello");
    CHECK(g.get("a.f64").as_matrix() == m);
    CHECK(g.get("b.f32").as_matrix() == m);  // all values exactly representable
    CHECK(g.get("c.f16").shape == std::vector<std::int64_t>{3, 2});
    CHECK(g.get("c.f16").data[4] == 65504.0);
    CHECK_THROWS_AS(g.expect("a.f64", {3, 2}), LoadError);
    CHECK_THROWS_AS(g.get("missing"), LoadError);
}

TEST_CASE("tensor file header is 8-byte aligned and loads corrupt files as errors") {
    TempDir dir("tensors_bad");
    TensorFile f;
    f.put("x", Mat::Ones(1, 5));
    f.save(dir.path() / "ok.bin");
    std::ifstream in(dir.path() / "ok.bin", std::ios::binary);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    CHECK(len % 8 == 0);

    std::ofstream(dir.path() / "bad.bin", std::ios::binary) << "garbage";
    CHECK_THROWS_AS(TensorFile::load(dir.path() / "bad.bin"), LoadError);
    CHECK_THROWS_AS(TensorFile::load(dir.path() / "absent.bin"), LoadError);
}

TEST_CASE("parameter store rejects duplicates and checks shapes on load") {
    ParameterStore s;
    s.create("visual.ln_pre.weight", Mat::Ones(1, 4), {4});
    CHECK_THROWS_AS(s.create("visual.ln_pre.weight", Mat::Ones(1, 4), {4}), ConfigError);
    CHECK(s.count_scalars() == 4);

    TensorFile f;
    f.put("visual.ln_pre.weight", Mat::Ones(1, 5), {5});
    CHECK_THROWS_AS(s.load_from(f, "visual."), LoadError);
}

TEST_CASE("tier classification") {
    ParameterStore s;
    for (const char* n : {"visual.transformer.resblocks.0.ln_1.weight", "visual.ln_post.bias", "visual.conv1.weight",
                          "text.ln_final.weight", "text.token_embedding.weight", "prompt.bank.0",
                          "scaling.adapter.0.proj.fc1.weight", "local.TL.ln_1.weight", "local.TL.proj.weight"}) {
        s.create(n, Mat::Ones(1, 2), {2});
    }
    const ParameterPolicy p = classify_parameters(s);
    CHECK(p.tier_of("visual.transformer.resblocks.0.ln_1.weight") == Tier::norm);
    CHECK(p.tier_of("visual.ln_post.bias") == Tier::norm);
    CHECK(p.tier_of("visual.conv1.weight") == Tier::frozen);
    CHECK(p.tier_of("text.ln_final.weight") == Tier::frozen);
    CHECK(p.tier_of("text.token_embedding.weight") == Tier::frozen);
    CHECK(p.tier_of("prompt.bank.0") == Tier::module);
    CHECK(p.tier_of("scaling.adapter.0.proj.fc1.weight") == Tier::module);
    CHECK(p.tier_of("local.TL.ln_1.weight") == Tier::module);
    CHECK(p.tier_of("local.TL.proj.weight") == Tier::module);
    CHECK_THROWS_AS(p.tier_of("stray.weight"), ConfigError);

    apply_policy(s, p);
    CHECK_FALSE(s.at("visual.conv1.weight").var.requires_grad());
    CHECK(s.at("visual.ln_post.bias").var.requires_grad());
}

TEST_CASE("image operations") {
    Image img(2, 2);
    img.at(0, 0, 0) = 1.0;
    img.at(1, 0, 1) = 0.5;
    const Image f = flip_horizontal(img);
    CHECK(f.at(0, 0, 1) == 1.0);
    CHECK(f.at(1, 0, 0) == 0.5);
    CHECK(flip_horizontal(f) == img);

    Image c(1, 1);
    c.at(0, 0, 0) = 1.0;
    const Image g = to_grayscale(c);
    for (int ch = 0; ch < 3; ++ch) CHECK(g.at(ch, 0, 0) == doctest::Approx(0.299));

    const Image flat = resize_bilinear(Image(4, 4, 0.25), 7, 9);
    CHECK(flat.height == 7);
    CHECK(flat.width == 9);
    for (double v : flat.data) CHECK(v == doctest::Approx(0.25));

    TempDir dir("images");
    Rng rng(1);
    Image rnd = dpclip::testing::random_image(5, rng);
    save_image(rnd, dir.path() / "x.png");
    const Image back = load_image(dir.path() / "x.png");
    for (std::size_t i = 0; i < rnd.data.size(); ++i) CHECK(std::abs(back.data[i] - rnd.data[i]) <= 0.5 / 255.0 + 1e-12);
    CHECK_THROWS_AS(load_image(dir.path() / "missing.png"), DataError);
}
