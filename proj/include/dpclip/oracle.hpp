#pragma once

// Brute-force reference for the retrieval metrics. Written against plain
// std::vector inputs so that it shares no code with the fast path.

#include <map>
#include <string>
#include <vector>

namespace dpclip::oracle {

using Matrix = std::vector<std::vector<double>>;

// Gallery indices sorted by (distance, index) via exhaustive selection.
std::vector<int> full_ranking(const std::vector<double>& row);

// Acc@1/5/10 keyed "acc@1", "acc@5", "acc@10".
std::map<std::string, double> fine_grained(const Matrix& d, const std::vector<int>& truth);

// "map@all", "map@200", "prec@100", "prec@200".
std::map<std::string, double> category_level(const Matrix& d, const std::vector<int>& query_labels,
                                             const std::vector<int>& gallery_labels);

double ap(const std::vector<int>& relevance, long cutoff);

}  // namespace dpclip::oracle
