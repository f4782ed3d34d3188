#pragma once

// Distance fusion, fine-grained (per-category instance) and category-level
// retrieval metrics, embedding serialisation and metric reports.
//
// Ranking rule everywhere: ascending distance, ties by ascending gallery index.

#include "dpclip/autograd.hpp"
#include "dpclip/data.hpp"

#include <json.hpp>

#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace dpclip {

enum class DistanceKind { cosine, euclidean_on_normalized };

const char* distance_kind_name(DistanceKind d);
DistanceKind parse_distance_kind(const std::string& s);

struct EmbeddingRecord {
    std::string id;
    std::string category;
    std::string instance;
    Modality modality = Modality::photo;
    RowVec global;
    std::vector<RowVec> locals;  // 0 or 4
};

struct EmbeddingFile {
    int dims = 0;
    bool has_locals = false;
    std::string config_hash;
    std::vector<EmbeddingRecord> records;

    // u64 LE header length, JSON header (format, dims, count, has_locals,
    // config_hash, per-record metadata), then per record little-endian f32:
    // global[dims] followed by locals[4][dims] when present.
    void save(const std::filesystem::path& path) const;
    static EmbeddingFile load(const std::filesystem::path& path);
};

struct DistanceMatrix {
    Mat global;
    std::vector<Mat> locals;
    Mat fused;  // global + sum(locals)
};

DistanceMatrix fuse_distances(const std::vector<EmbeddingRecord>& queries, const std::vector<EmbeddingRecord>& gallery,
                              DistanceKind kind);
Mat pairwise_distance(const Mat& queries, const Mat& gallery, DistanceKind kind);

// Fraction of queries whose true gallery index lies in the k best ranks.
double acc_at_k(const Mat& distances, const std::vector<int>& truth, int k);
// Stable ranking of one distance row.
std::vector<int> rank_row(const Eigen::Ref<const RowVec>& row);

inline constexpr int kNoCutoff = std::numeric_limits<int>::max();

// AP over a full ranked relevance list; precisions at hit positions within
// `cutoff` are averaged over min(total relevant, cutoff).
double average_precision(const std::vector<int>& relevance, int cutoff = kNoCutoff);
double precision_at(const std::vector<int>& relevance, int n);

enum class Protocol { fine_grained, category_level };

struct MetricsReport {
    Protocol protocol = Protocol::fine_grained;
    // category -> metric name -> value (fine-grained only)
    std::map<std::string, std::map<std::string, double>> per_category;
    std::map<std::string, double> aggregates;
    std::map<std::string, int> counts;  // queries per category, or "queries"/"gallery"
    std::vector<std::string> warnings;
    std::string config_hash;
    std::string timestamp;

    nlohmann::json to_json() const;
    std::string to_table() const;
};

// Dense fast path for one fine-grained category: Acc@{1,5,10}.
std::map<std::string, double> fine_grained_metrics(const Mat& distances, const std::vector<int>& truth);
// Category-level metrics for a query x gallery matrix and labels.
std::map<std::string, double> category_level_metrics(const Mat& distances, const std::vector<int>& query_labels,
                                                     const std::vector<int>& gallery_labels);

// queries: sketches, gallery: photos; records are grouped by category.
MetricsReport eval_fine_grained(const std::vector<EmbeddingRecord>& sketches, const std::vector<EmbeddingRecord>& photos,
                                DistanceKind kind);
MetricsReport eval_category_level(const std::vector<EmbeddingRecord>& sketches,
                                  const std::vector<EmbeddingRecord>& photos, DistanceKind kind);

}  // namespace dpclip
