#include "dpclip/retrieval.hpp"

#include "dpclip/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace dpclip {

namespace {

Mat normalized_rows(const Mat& m) {
    Mat out = m;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double n = m.row(r).norm();
        if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("feature row " + std::to_string(r) + " has zero or non-finite norm");
        out.row(r) /= n;
    }
    return out;
}

Mat stack(const std::vector<EmbeddingRecord>& recs, int local) {
    if (recs.empty()) return Mat(0, 0);
    const Eigen::Index d = recs[0].global.size();
    Mat m(static_cast<Eigen::Index>(recs.size()), d);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const RowVec& v = local < 0 ? recs[i].global : recs[i].locals.at(static_cast<std::size_t>(local));
        if (v.size() != d) throw ShapeError("embedding '" + recs[i].id + "' has mismatched dimension");
        m.row(static_cast<Eigen::Index>(i)) = v;
    }
    return m;
}

const char* protocol_name(Protocol p) { return p == Protocol::fine_grained ? "fine_grained" : "category_level"; }

}  // namespace

const char* distance_kind_name(DistanceKind d) {
    return d == DistanceKind::cosine ? "cosine" : "euclidean_on_normalized";
}

DistanceKind parse_distance_kind(const std::string& s) {
    if (s == "cosine") return DistanceKind::cosine;
    if (s == "euclidean_on_normalized") return DistanceKind::euclidean_on_normalized;
    throw ConfigError("unknown distance '" + s + "'");
}

// ---------------------------------------------------------------------------

void EmbeddingFile::save(const std::filesystem::path& path) const {
    nlohmann::json header{{"format", "dpclip-embeddings"},
                          {"version", 1},
                          {"dims", dims},
                          {"count", records.size()},
                          {"has_locals", has_locals},
                          {"config_hash", config_hash}};
    nlohmann::json meta = nlohmann::json::array();
    for (const auto& r : records) {
        meta.push_back({{"id", r.id}, {"category", r.category}, {"instance", r.instance}, {"modality", modality_name(r.modality)}});
    }
    header["records"] = std::move(meta);
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write embedding file '" + path.string() + "'");
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    std::vector<float> buf;
    for (const auto& r : records) {
        if (r.global.size() != dims || (has_locals && r.locals.size() != 4)) {
            throw ShapeError("embedding '" + r.id + "' does not match the file dims");
        }
        buf.assign(r.global.data(), r.global.data() + dims);
        if (has_locals) {
            for (const auto& l : r.locals) {
                if (l.size() != dims) throw ShapeError("embedding '" + r.id + "' local dimension mismatch");
                buf.insert(buf.end(), l.data(), l.data() + dims);
            }
        }
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    }
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

EmbeddingFile EmbeddingFile::load(const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open embedding file '" + path.string() + "'");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    if (!in || len > (1ULL << 32)) throw DataError("'" + path.string() + "': bad header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    EmbeddingFile f;
    try {
        const auto h = nlohmann::json::parse(text);
        if (h.at("format").get<std::string>() != "dpclip-embeddings") throw DataError("'" + path.string() + "' is not an embedding file");
        f.dims = h.at("dims").get<int>();
        f.has_locals = h.at("has_locals").get<bool>();
        f.config_hash = h.at("config_hash").get<std::string>();
        const auto count = h.at("count").get<std::size_t>();
        const auto& meta = h.at("records");
        if (meta.size() != count) throw DataError("'" + path.string() + "': record count mismatch");
        const std::size_t per = static_cast<std::size_t>(f.dims) * (f.has_locals ? 5 : 1);
        std::vector<float> buf(per);
        for (const auto& m : meta) {
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(per * 4));
            if (!in) throw DataError("'" + path.string() + "': truncated record data");
            EmbeddingRecord r;
            r.id = m.at("id").get<std::string>();
            r.category = m.at("category").get<std::string>();
            r.instance = m.at("instance").get<std::string>();
            r.modality = parse_modality(m.at("modality").get<std::string>());
            r.global = RowVec(f.dims);
            for (int i = 0; i < f.dims; ++i) r.global(i) = buf[static_cast<std::size_t>(i)];
            if (f.has_locals) {
                for (int k = 0; k < 4; ++k) {
                    RowVec l(f.dims);
                    for (int i = 0; i < f.dims; ++i) l(i) = buf[static_cast<std::size_t>((k + 1) * f.dims + i)];
                    r.locals.push_back(std::move(l));
                }
            }
            f.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed embedding header in '" + path.string() + "': " + e.what());
    }
    return f;
}

// ---------------------------------------------------------------------------

Mat pairwise_distance(const Mat& queries, const Mat& gallery, DistanceKind kind) {
    if (queries.cols() != gallery.cols()) {
        throw ShapeError("query features have " + std::to_string(queries.cols()) + " dims, gallery " +
                         std::to_string(gallery.cols()));
    }
    const Mat sim = normalized_rows(queries) * normalized_rows(gallery).transpose();
    if (kind == DistanceKind::cosine) return (1.0 - sim.array()).matrix();
    return (2.0 - 2.0 * sim.array()).cwiseMax(0.0).sqrt().matrix();
}

DistanceMatrix fuse_distances(const std::vector<EmbeddingRecord>& queries, const std::vector<EmbeddingRecord>& gallery,
                              DistanceKind kind) {
    DistanceMatrix d;
    d.global = pairwise_distance(stack(queries, -1), stack(gallery, -1), kind);
    d.fused = d.global;
    const bool q_locals = !queries.empty() && !queries[0].locals.empty();
    const bool g_locals = !gallery.empty() && !gallery[0].locals.empty();
    if (q_locals != g_locals) throw ShapeError("queries and gallery disagree on local features");
    for (const auto* set : {&queries, &gallery}) {
        for (const auto& r : *set) {
            if (r.locals.size() != (q_locals ? 4u : 0u)) throw ShapeError("embedding '" + r.id + "' has inconsistent locals");
        }
    }
    if (q_locals) {
        for (int k = 0; k < 4; ++k) {
            d.locals.push_back(pairwise_distance(stack(queries, k), stack(gallery, k), kind));
            d.fused += d.locals.back();
        }
    }
    return d;
}

std::vector<int> rank_row(const Eigen::Ref<const RowVec>& row) {
    std::vector<int> order(static_cast<std::size_t>(row.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row(a) < row(b); });
    return order;
}

double acc_at_k(const Mat& distances, const std::vector<int>& truth, int k) {
    if (static_cast<Eigen::Index>(truth.size()) != distances.rows()) throw UsageError("one truth index per query required");
    if (truth.empty()) throw UsageError("acc@k of zero queries");
    int hits = 0;
    for (Eigen::Index q = 0; q < distances.rows(); ++q) {
        const int t = truth[static_cast<std::size_t>(q)];
        if (t < 0 || t >= distances.cols()) throw UsageError("truth index " + std::to_string(t) + " out of range");
        const auto order = rank_row(distances.row(q));
        const auto pos = std::find(order.begin(), order.end(), t) - order.begin();
        if (pos < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double average_precision(const std::vector<int>& relevance, int cutoff) {
    if (relevance.empty()) throw UsageError("average precision of an empty ranking");
    const long total = std::count_if(relevance.begin(), relevance.end(), [](int r) { return r != 0; });
    if (total == 0) {
        if (cutoff == kNoCutoff) throw UsageError("average precision needs at least one relevant item");
        return 0.0;
    }
    const std::size_t limit = std::min(relevance.size(), static_cast<std::size_t>(cutoff));
    double sum = 0.0;
    long hits = 0;
    for (std::size_t i = 0; i < limit; ++i) {
        if (relevance[i] != 0) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    const double denom = static_cast<double>(std::min<long>(total, cutoff));
    return sum / denom;
}

double precision_at(const std::vector<int>& relevance, int n) {
    if (relevance.empty()) throw UsageError("precision of an empty ranking");
    if (n <= 0) throw UsageError("precision cutoff must be positive");
    const std::size_t limit = std::min(relevance.size(), static_cast<std::size_t>(n));
    const auto hits = std::count_if(relevance.begin(), relevance.begin() + static_cast<long>(limit), [](int r) { return r != 0; });
    return static_cast<double>(hits) / static_cast<double>(n);
}

std::map<std::string, double> fine_grained_metrics(const Mat& distances, const std::vector<int>& truth) {
    return {{"acc@1", acc_at_k(distances, truth, 1)},
            {"acc@5", acc_at_k(distances, truth, 5)},
            {"acc@10", acc_at_k(distances, truth, 10)}};
}

std::map<std::string, double> category_level_metrics(const Mat& distances, const std::vector<int>& query_labels,
                                                     const std::vector<int>& gallery_labels) {
    if (static_cast<Eigen::Index>(query_labels.size()) != distances.rows() ||
        static_cast<Eigen::Index>(gallery_labels.size()) != distances.cols()) {
        throw UsageError("label counts do not match the distance matrix");
    }
    if (query_labels.empty()) throw UsageError("no queries");
    double map_all = 0, map_200 = 0, p100 = 0, p200 = 0;
    std::vector<int> rel(gallery_labels.size());
    for (Eigen::Index q = 0; q < distances.rows(); ++q) {
        const auto order = rank_row(distances.row(q));
        for (std::size_t i = 0; i < order.size(); ++i) {
            rel[i] = gallery_labels[static_cast<std::size_t>(order[i])] == query_labels[static_cast<std::size_t>(q)];
        }
        map_all += average_precision(rel);
        map_200 += average_precision(rel, 200);
        p100 += precision_at(rel, 100);
        p200 += precision_at(rel, 200);
    }
    const double n = static_cast<double>(query_labels.size());
    return {{"map@all", map_all / n}, {"map@200", map_200 / n}, {"prec@100", p100 / n}, {"prec@200", p200 / n}};
}

MetricsReport eval_fine_grained(const std::vector<EmbeddingRecord>& sketches, const std::vector<EmbeddingRecord>& photos,
                                DistanceKind kind) {
    MetricsReport report;
    report.protocol = Protocol::fine_grained;
    std::set<std::string> categories;
    for (const auto& s : sketches) categories.insert(s.category);

    std::map<std::string, double> sums;
    int included = 0;
    for (const auto& cat : categories) {
        std::vector<EmbeddingRecord> gallery;
        for (const auto& p : photos) {
            if (p.category == cat) gallery.push_back(p);
        }
        if (gallery.empty()) {
            report.warnings.push_back("category '" + cat + "' has no photos; excluded");
            continue;
        }
        std::vector<EmbeddingRecord> queries;
        std::vector<int> truth;
        for (const auto& s : sketches) {
            if (s.category != cat) continue;
            auto it = std::find_if(gallery.begin(), gallery.end(), [&](const auto& p) { return p.instance == s.instance; });
            if (it == gallery.end()) {
                report.warnings.push_back("sketch '" + s.id + "' has no matching photo; skipped");
                continue;
            }
            queries.push_back(s);
            truth.push_back(static_cast<int>(it - gallery.begin()));
        }
        if (queries.empty()) continue;
        const DistanceMatrix d = fuse_distances(queries, gallery, kind);
        auto m = fine_grained_metrics(d.fused, truth);
        for (const auto& [k, v] : m) sums[k] += v;
        report.per_category[cat] = std::move(m);
        report.counts[cat] = static_cast<int>(queries.size());
        ++included;
    }
    if (included == 0) throw DataError("no evaluable fine-grained category");
    for (const auto& [k, v] : sums) report.aggregates[k] = v / included;
    return report;
}

MetricsReport eval_category_level(const std::vector<EmbeddingRecord>& sketches,
                                  const std::vector<EmbeddingRecord>& photos, DistanceKind kind) {
    MetricsReport report;
    report.protocol = Protocol::category_level;
    if (photos.empty() || sketches.empty()) throw DataError("category-level evaluation needs sketches and photos");
    std::map<std::string, int> ids;
    auto label = [&](const std::string& c) { return ids.emplace(c, static_cast<int>(ids.size())).first->second; };
    std::vector<int> g_labels, q_labels;
    for (const auto& p : photos) g_labels.push_back(label(p.category));
    std::vector<EmbeddingRecord> queries;
    for (const auto& s : sketches) {
        if (std::find(g_labels.begin(), g_labels.end(), label(s.category)) == g_labels.end()) {
            report.warnings.push_back("sketch '" + s.id + "' has no same-category photo; skipped");
            continue;
        }
        queries.push_back(s);
        q_labels.push_back(label(s.category));
    }
    const DistanceMatrix d = fuse_distances(queries, photos, kind);
    report.aggregates = category_level_metrics(d.fused, q_labels, g_labels);
    report.counts["queries"] = static_cast<int>(queries.size());
    report.counts["gallery"] = static_cast<int>(photos.size());
    return report;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j{{"protocol", protocol_name(protocol)},
                     {"aggregates", aggregates},
                     {"per_category", per_category},
                     {"counts", counts},
                     {"warnings", warnings},
                     {"config_hash", config_hash},
                     {"timestamp", timestamp}};
    return j;
}

std::string MetricsReport::to_table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    std::vector<std::string> cols;
    for (const auto& [k, v] : aggregates) cols.push_back(k);
    std::size_t name_w = 8;
    for (const auto& [c, m] : per_category) name_w = std::max(name_w, c.size());
    out << std::left << std::setw(static_cast<int>(name_w)) << "category";
    for (const auto& c : cols) out << "  " << std::right << std::setw(9) << c;
    out << "\n";
    for (const auto& [cat, m] : per_category) {
        out << std::left << std::setw(static_cast<int>(name_w)) << cat;
        for (const auto& c : cols) out << "  " << std::right << std::setw(9) << (m.count(c) ? m.at(c) : 0.0);
        out << "\n";
    }
    out << std::left << std::setw(static_cast<int>(name_w)) << "mean";
    for (const auto& c : cols) out << "  " << std::right << std::setw(9) << aggregates.at(c);
    out << "\n";
    return out.str();
}

}  // namespace dpclip
