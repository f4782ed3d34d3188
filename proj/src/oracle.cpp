#include "dpclip/oracle.hpp"

#include <stdexcept>

namespace dpclip::oracle {

std::vector<int> full_ranking(const std::vector<double>& row) {
    const int n = static_cast<int>(row.size());
    std::vector<bool> used(row.size(), false);
    std::vector<int> out;
    for (int step = 0; step < n; ++step) {
        int best = -1;
        for (int j = 0; j < n; ++j) {
            if (used[j]) continue;
            // strict < keeps the lowest index among equals
            if (best < 0 || row[j] < row[best]) best = j;
        }
        used[best] = true;
        out.push_back(best);
    }
    return out;
}

std::map<std::string, double> fine_grained(const Matrix& d, const std::vector<int>& truth) {
    if (d.size() != truth.size() || d.empty()) throw std::invalid_argument("oracle: bad fine-grained input");
    double hit1 = 0, hit5 = 0, hit10 = 0;
    for (std::size_t q = 0; q < d.size(); ++q) {
        const auto order = full_ranking(d[q]);
        int position = -1;
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (order[i] == truth[q]) position = static_cast<int>(i);
        }
        if (position < 0) throw std::invalid_argument("oracle: truth index out of range");
        hit1 += position < 1;
        hit5 += position < 5;
        hit10 += position < 10;
    }
    const double n = static_cast<double>(d.size());
    return {{"acc@1", hit1 / n}, {"acc@5", hit5 / n}, {"acc@10", hit10 / n}};
}

double ap(const std::vector<int>& relevance, long cutoff) {
    long total = 0;
    for (int r : relevance) total += r != 0;
    if (total == 0) return 0.0;
    double sum = 0.0;
    long seen = 0;
    for (long i = 0; i < static_cast<long>(relevance.size()) && i < cutoff; ++i) {
        if (relevance[static_cast<std::size_t>(i)] == 0) continue;
        ++seen;
        sum += static_cast<double>(seen) / static_cast<double>(i + 1);
    }
    return sum / static_cast<double>(total < cutoff ? total : cutoff);
}

std::map<std::string, double> category_level(const Matrix& d, const std::vector<int>& query_labels,
                                             const std::vector<int>& gallery_labels) {
    if (d.size() != query_labels.size() || d.empty()) throw std::invalid_argument("oracle: bad category input");
    double map_all = 0, map_200 = 0, p100 = 0, p200 = 0;
    for (std::size_t q = 0; q < d.size(); ++q) {
        const auto order = full_ranking(d[q]);
        std::vector<int> rel;
        for (int g : order) rel.push_back(gallery_labels[static_cast<std::size_t>(g)] == query_labels[q] ? 1 : 0);
        map_all += ap(rel, static_cast<long>(rel.size()));
        map_200 += ap(rel, 200);
        long top100 = 0, top200 = 0;
        for (std::size_t i = 0; i < rel.size(); ++i) {
            if (i < 100) top100 += rel[i];
            if (i < 200) top200 += rel[i];
        }
        p100 += static_cast<double>(top100) / 100.0;
        p200 += static_cast<double>(top200) / 200.0;
    }
    const double n = static_cast<double>(d.size());
    return {{"map@all", map_all / n}, {"map@200", map_200 / n}, {"prec@100", p100 / n}, {"prec@200", p200 / n}};
}

}  // namespace dpclip::oracle
