#include "dpclip/data.hpp"

#include "dpclip/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace dpclip {

namespace {

bool is_image_ext(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return e == ".png" || e == ".jpg" || e == ".jpeg" || e == ".bmp" || e == ".ppm" || e == ".pgm";
}

// "X-k" -> ("X", k); anything else -> (stem, nullopt).
std::pair<std::string, std::optional<int>> split_sketch_stem(const std::string& stem) {
    const auto dash = stem.rfind('-');
    if (dash == std::string::npos || dash + 1 >= stem.size()) return {stem, std::nullopt};
    const std::string tail = stem.substr(dash + 1);
    if (!std::all_of(tail.begin(), tail.end(), [](unsigned char c) { return std::isdigit(c); })) return {stem, std::nullopt};
    return {stem.substr(0, dash), std::stoi(tail)};
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == ',' && !quoted) {
            out.push_back(cell);
            cell.clear();
        } else if (c != '\r') {
            cell.push_back(c);
        }
    }
    out.push_back(cell);
    return out;
}

void check_readable(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw DataError("unreadable file '" + p.string() + "'");
}

}  // namespace

const char* modality_name(Modality m) { return m == Modality::sketch ? "sketch" : "photo"; }

Modality parse_modality(const std::string& s) {
    if (s == "sketch") return Modality::sketch;
    if (s == "photo") return Modality::photo;
    throw DataError("unknown modality '" + s + "'");
}

std::string InstanceRecord::id() const {
    return std::string(modality_name(modality)) + "/" + category + "/" + fs::path(path).stem().string();
}

std::vector<std::string> Catalog::categories() const {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.category);
    return {s.begin(), s.end()};
}

std::vector<const InstanceRecord*> Catalog::of(const std::string& category, Modality m) const {
    std::vector<const InstanceRecord*> out;
    for (const auto& r : records) {
        if (r.category == category && r.modality == m) out.push_back(&r);
    }
    std::sort(out.begin(), out.end(), [](const auto* a, const auto* b) { return a->path < b->path; });
    return out;
}

const InstanceRecord* Catalog::photo_for(const std::string& category, const std::string& instance_id) const {
    for (const auto& r : records) {
        if (r.modality == Modality::photo && r.category == category && r.instance_id == instance_id) return &r;
    }
    return nullptr;
}

fs::path Catalog::resolve(const InstanceRecord& r) const {
    const fs::path p(r.path);
    return p.is_absolute() ? p : root / p;
}

Catalog scan_dataset(const fs::path& root, const std::optional<fs::path>& manifest, bool fine_grained) {
    Catalog cat;
    cat.root = root;
    std::map<std::string, std::size_t> by_path;

    for (Modality m : {Modality::photo, Modality::sketch}) {
        const fs::path base = root / modality_name(m);
        if (!fs::exists(base)) continue;
        std::vector<fs::path> files;
        for (const auto& cat_dir : fs::directory_iterator(base)) {
            if (!cat_dir.is_directory()) continue;
            for (const auto& f : fs::directory_iterator(cat_dir.path())) {
                if (f.is_regular_file() && is_image_ext(f.path())) files.push_back(f.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            check_readable(f);
            InstanceRecord r;
            r.path = fs::relative(f, root).generic_string();
            r.modality = m;
            r.category = f.parent_path().filename().string();
            const std::string stem = f.stem().string();
            if (m == Modality::sketch) {
                auto [inst, variant] = split_sketch_stem(stem);
                r.instance_id = inst;
                r.sketch_variant = variant;
            } else {
                r.instance_id = stem;
            }
            by_path[r.path] = cat.records.size();
            cat.records.push_back(std::move(r));
        }
    }

    if (manifest) {
        std::ifstream in(*manifest);
        if (!in) throw DataError("cannot open manifest '" + manifest->string() + "'");
        std::string line;
        std::getline(in, line);
        const auto header = split_csv_line(line);
        auto col = [&](const std::string& name) {
            auto it = std::find(header.begin(), header.end(), name);
            if (it == header.end()) throw DataError("manifest '" + manifest->string() + "' lacks column '" + name + "'");
            return static_cast<std::size_t>(it - header.begin());
        };
        const auto c_path = col("path"), c_mod = col("modality"), c_cat = col("category"), c_inst = col("instance_id");
        int line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto cells = split_csv_line(line);
            if (cells.size() < header.size()) {
                throw DataError("manifest line " + std::to_string(line_no) + ": expected " +
                                std::to_string(header.size()) + " columns");
            }
            InstanceRecord r;
            r.path = cells[c_path];
            r.modality = parse_modality(cells[c_mod]);
            r.category = cells[c_cat];
            r.instance_id = cells[c_inst];
            if (r.modality == Modality::sketch) r.sketch_variant = split_sketch_stem(fs::path(r.path).stem().string()).second;
            check_readable(cat.resolve(r));
            auto it = by_path.find(r.path);
            if (it != by_path.end()) {
                cat.records[it->second] = std::move(r);
            } else {
                by_path[r.path] = cat.records.size();
                cat.records.push_back(std::move(r));
            }
        }
    }

    if (fine_grained) {
        for (const auto& r : cat.records) {
            if (r.modality == Modality::sketch && cat.photo_for(r.category, r.instance_id) == nullptr) {
                cat.warnings.push_back("orphan sketch '" + r.path + "': no photo with instance '" + r.instance_id + "'");
            }
        }
    }
    return cat;
}

bool Split::is_seen(const std::string& category) const {
    return std::find(seen.begin(), seen.end(), category) != seen.end();
}

bool Split::is_unseen(const std::string& category) const {
    return std::find(unseen.begin(), unseen.end(), category) != unseen.end();
}

void Split::validate() const {
    for (const auto& c : seen) {
        if (is_unseen(c)) throw DataError("category '" + c + "' is both seen and unseen");
    }
}

void Split::save(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write split file '" + path.string() + "'");
    out << nlohmann::json{{"seen", seen}, {"unseen", unseen}}.dump(2) << "\n";
}

Split Split::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open split file '" + path.string() + "'");
    try {
        const auto j = nlohmann::json::parse(in);
        Split s;
        s.seen = j.at("seen").get<std::vector<std::string>>();
        s.unseen = j.at("unseen").get<std::vector<std::string>>();
        s.validate();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed split file '" + path.string() + "': " + e.what());
    }
}

Split make_split(const Catalog& catalog, int unseen_count, std::uint64_t seed) {
    auto cats = catalog.categories();
    if (unseen_count < 0 || unseen_count > static_cast<int>(cats.size())) {
        throw UsageError("cannot hold out " + std::to_string(unseen_count) + " of " + std::to_string(cats.size()) +
                         " categories");
    }
    Rng rng(seed);
    for (std::size_t i = cats.size(); i > 1; --i) std::swap(cats[i - 1], cats[rng.below(i)]);
    Split s;
    s.unseen.assign(cats.begin(), cats.begin() + unseen_count);
    s.seen.assign(cats.begin() + unseen_count, cats.end());
    std::sort(s.seen.begin(), s.seen.end());
    std::sort(s.unseen.begin(), s.unseen.end());
    return s;
}

void SupportAssignment::save(const fs::path& path) const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [cat, s] : sets) j[cat] = {{"sketch", s.sketch}, {"photos", {s.photo_1, s.photo_2}}};
    j["seed"] = seed;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write support file '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

SupportAssignment SupportAssignment::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open support file '" + path.string() + "'");
    try {
        const auto j = nlohmann::json::parse(in);
        SupportAssignment a;
        a.seed = j.at("seed").get<std::uint64_t>();
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "seed") continue;
            SupportSet s;
            s.category = it.key();
            s.sketch = it.value().at("sketch").get<std::string>();
            const auto photos = it.value().at("photos").get<std::vector<std::string>>();
            if (photos.size() != 2) throw DataError("support for '" + it.key() + "' must list exactly 2 photos");
            s.photo_1 = photos[0];
            s.photo_2 = photos[1];
            s.seed = a.seed;
            a.sets[s.category] = s;
        }
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed support file '" + path.string() + "': " + e.what());
    }
}

SupportSet select_support(const Catalog& catalog, const std::string& category, std::uint64_t seed) {
    const auto sketches = catalog.of(category, Modality::sketch);
    const auto photos = catalog.of(category, Modality::photo);
    if (sketches.empty() || photos.size() < 2) {
        throw DataError("category '" + category + "' needs at least 1 sketch and 2 photos for a support set (has " +
                        std::to_string(sketches.size()) + " and " + std::to_string(photos.size()) + ")");
    }
    Rng rng = Rng::derive(seed, fnv1a64(category));
    SupportSet s;
    s.category = category;
    s.seed = seed;
    s.sketch = sketches[rng.below(sketches.size())]->path;
    const auto a = rng.below(photos.size());
    auto b = rng.below(photos.size() - 1);
    if (b >= a) ++b;
    s.photo_1 = photos[a]->path;
    s.photo_2 = photos[b]->path;
    return s;
}

SupportAssignment select_supports(const Catalog& catalog, const std::vector<std::string>& categories,
                                  std::uint64_t seed) {
    SupportAssignment a;
    a.seed = seed;
    for (const auto& c : categories) a.sets[c] = select_support(catalog, c, seed);
    return a;
}

std::vector<PairRef> category_pairs(const Catalog& catalog, const std::string& category) {
    std::vector<PairRef> out;
    for (const auto* s : catalog.of(category, Modality::sketch)) {
        if (const auto* p = catalog.photo_for(category, s->instance_id)) out.push_back({s, p});
    }
    return out;
}

std::size_t count_training_pairs(const Catalog& catalog, const Split& split) {
    std::size_t n = 0;
    for (const auto& c : split.seen) n += category_pairs(catalog, c).size();
    return n;
}

Batch sample_batch(const Catalog& catalog, const Split& split, int batch_size, Rng& rng) {
    if (batch_size <= 0) throw UsageError("batch size must be positive");
    std::vector<std::string> usable;
    for (const auto& c : split.seen) {
        if (!category_pairs(catalog, c).empty()) usable.push_back(c);
    }
    if (usable.empty()) throw DataError("no seen category has a sketch-photo pair");
    Batch b;
    b.category = usable[rng.below(usable.size())];
    auto pairs = category_pairs(catalog, b.category);
    const std::size_t want = static_cast<std::size_t>(batch_size);
    // Partial Fisher-Yates for the distinct part.
    const std::size_t distinct = std::min(want, pairs.size());
    for (std::size_t i = 0; i < distinct; ++i) {
        std::swap(pairs[i], pairs[i + rng.below(pairs.size() - i)]);
        b.pairs.push_back(pairs[i]);
    }
    while (b.pairs.size() < want) b.pairs.push_back(pairs[rng.below(pairs.size())]);
    return b;
}

AugmentFlags draw_augment(Rng& rng) {
    AugmentFlags f;
    f.flipped = rng.bernoulli(0.5);
    f.photo_grayscale = rng.bernoulli(0.5);
    return f;
}

ImagePair augment(const ImagePair& pair, const AugmentFlags& flags) {
    ImagePair out = pair;
    if (flags.photo_grayscale) out.photo = to_grayscale(out.photo);
    if (flags.flipped) {
        out.sketch = flip_horizontal(out.sketch);
        out.photo = flip_horizontal(out.photo);
    }
    return out;
}

ImagePair augment(const ImagePair& pair, Rng& rng) { return augment(pair, draw_augment(rng)); }

int batches_per_epoch(std::size_t training_pairs, int batch_size) {
    if (batch_size <= 0) throw UsageError("batch size must be positive");
    return static_cast<int>((training_pairs + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

// ---------------------------------------------------------------------------
// Synthetic data

std::vector<std::string> toy_category_names(int n) {
    static const char* names[] = {"cabin",  "tree",   "airplane", "helicopter", "umbrella", "bicycle",
                                  "owl",    "apple",  "zebra",    "teapot",     "guitar",   "rabbit"};
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
        out.push_back(i < 12 ? names[i] : "category_" + std::to_string(i));
    }
    return out;
}

namespace {

struct ShapeParams {
    int family = 0;
    double cx = 28, cy = 28, size = 12;
    double mx = 10, my = 10;  // marker centre
    double r = 0.5, g = 0.5, b = 0.5;
};

bool inside_shape(int family, double dx, double dy, double s) {
    if (s <= 0) return false;
    const double ax = std::abs(dx), ay = std::abs(dy);
    switch (family % 8) {
        case 0: return dx * dx + dy * dy <= s * s;
        case 1: return ax <= 0.85 * s && ay <= 0.85 * s;
        case 2: return dy <= s && dy >= -s && ax <= (dy + s) / 2.0;
        case 3: return (ax <= s / 3.0 && ay <= s) || (ay <= s / 3.0 && ax <= s);
        case 4: {
            const double r2 = dx * dx + dy * dy;
            return r2 <= s * s && r2 >= 0.3 * s * s;
        }
        case 5: return ax + ay <= s;
        case 6: return (std::abs(dy - s / 2) <= s / 4 || std::abs(dy + s / 2) <= s / 4) && ax <= s;
        default: return (dx / s) * (dx / s) + (dy / (0.55 * s)) * (dy / (0.55 * s)) <= 1.0;
    }
}

Image render_photo(const ShapeParams& p, int size, Rng& texture) {
    Image img(size, size);
    const double base = texture.uniform(0.8, 0.92);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double n = base + texture.uniform(-0.05, 0.05);
            double px[3] = {n, n, n};
            if (inside_shape(p.family, x - p.cx, y - p.cy, p.size)) {
                // object boundary is darker than its fill
                const bool rim = !inside_shape(p.family, x - p.cx, y - p.cy, p.size - 1.6);
                const double k = rim ? 0.35 : 1.0;
                px[0] = k * p.r;
                px[1] = k * p.g;
                px[2] = k * p.b;
            }
            if (std::abs(x - p.mx) <= 3 && std::abs(y - p.my) <= 3) px[0] = px[1] = px[2] = 0.1;
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(px[c], 0.0, 1.0);
        }
    }
    return img;
}

Image render_sketch(const ShapeParams& p, int size, Rng& jitter) {
    Image img(size, size, 1.0);
    const double jx = jitter.uniform(-1.0, 1.0), jy = jitter.uniform(-1.0, 1.0);
    const double js = p.size * jitter.uniform(0.93, 1.07);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double dx = x - p.cx - jx, dy = y - p.cy - jy;
            const bool edge = inside_shape(p.family, dx, dy, js) && !inside_shape(p.family, dx, dy, js - 2.2);
            const double mdx = std::abs(x - p.mx - jx), mdy = std::abs(y - p.my - jy);
            const bool marker = std::max(mdx, mdy) <= 3.5 && std::max(mdx, mdy) >= 2.0;
            if (edge || marker) {
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = 0.0;
            }
        }
    }
    return img;
}

}  // namespace

void write_toy_dataset(const fs::path& root, const ToyDatasetSpec& spec) {
    const auto names = toy_category_names(spec.categories);
    const int S = spec.image_size;
    for (int c = 0; c < spec.categories; ++c) {
        const std::string& cat = names[static_cast<std::size_t>(c)];
        fs::create_directories(root / "photo" / cat);
        fs::create_directories(root / "sketch" / cat);
        Rng cat_rng = Rng::derive(spec.seed, 0x70ec, static_cast<std::uint64_t>(c));
        // Which attribute varies between instances differs by category.
        const int varying = c % 3;
        const double fixed_cx = cat_rng.uniform(0.4, 0.6) * S, fixed_cy = cat_rng.uniform(0.4, 0.6) * S;
        const double fixed_size = cat_rng.uniform(0.17, 0.23) * S;
        for (int i = 0; i < spec.instances; ++i) {
            Rng inst = Rng::derive(spec.seed, 0x1257, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i));
            ShapeParams p;
            p.family = c;
            p.cx = fixed_cx;
            p.cy = fixed_cy;
            p.size = fixed_size;
            if (varying == 0 || varying == 2) {
                p.cx = inst.uniform(0.3, 0.7) * S;
                p.cy = inst.uniform(0.3, 0.7) * S;
            }
            if (varying == 1 || varying == 2) p.size = inst.uniform(0.12, 0.3) * S;
            p.mx = inst.uniform(0.1, 0.9) * S;
            p.my = inst.uniform(0.1, 0.9) * S;
            p.r = inst.uniform(0.1, 0.9);
            p.g = inst.uniform(0.1, 0.9);
            p.b = inst.uniform(0.1, 0.9);

            const std::string stem = cat.substr(0, 2) + "_" + std::to_string(i);
            Rng texture = Rng::derive(spec.seed, 0x7e47, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(i));
            save_image(render_photo(p, S, texture), root / "photo" / cat / (stem + ".png"));
            for (int k = 1; k <= spec.sketches_per_instance; ++k) {
                Rng jitter = Rng::derive(spec.seed, 0x5e7c, static_cast<std::uint64_t>(c * 1000 + i),
                                         static_cast<std::uint64_t>(k));
                save_image(render_sketch(p, S, jitter), root / "sketch" / cat / (stem + "-" + std::to_string(k) + ".png"));
            }
        }
    }
}

}  // namespace dpclip
