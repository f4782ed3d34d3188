#include "dpclip/visualize.hpp"

#include "dpclip/errors.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dpclip {

SimilarityMap prompt_similarity(const DpClipModel& model, const Image& prepared, const CategoryContext& ctx,
                                const SimilarityOptions& options) {
    const auto& cfg = model.config();
    if (!cfg.visual_prompts) throw UsageError("visual prompts are disabled in this model");
    const int layers = cfg.backbone.num_layers;
    const int layer = options.layer < 0 ? layers - 1 : options.layer;
    if (layer >= layers) throw UsageError("layer " + std::to_string(layer) + " out of range (model has " +
                                          std::to_string(layers) + ")");
    NoGradGuard no_grad;
    VisualForwardOptions fwd;
    fwd.tap_layer = layer;
    fwd.tap_inputs = options.use_inputs;
    const Mat seq = model.forward_visual(prepared, ctx, fwd).tapped.value();

    const int n_prompts = cfg.prompt_tokens;
    const int grid = cfg.backbone.grid_side();
    const Eigen::Index prompt_start = cfg.backbone.prompts_after_cls ? 1 : 0;
    const Eigen::Index patch_start = cfg.backbone.prompts_after_cls ? 1 + n_prompts : n_prompts + 1;

    Mat patches = seq.middleRows(patch_start, grid * grid);
    for (Eigen::Index r = 0; r < patches.rows(); ++r) patches.row(r).normalize();

    SimilarityMap out;
    out.layer = layer;
    out.mean = Mat::Zero(grid, grid);
    for (int k = 0; k < n_prompts; ++k) {
        RowVec p = seq.row(prompt_start + k);
        p.normalize();
        const Eigen::VectorXd sims = patches * p.transpose();
        Mat m(grid, grid);
        for (int i = 0; i < grid * grid; ++i) m(i / grid, i % grid) = std::clamp(sims(i), -1.0, 1.0);
        out.mean += m / n_prompts;
        out.per_prompt.push_back(std::move(m));
    }
    return out;
}

void write_csv(const Mat& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << std::setprecision(17);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
        out << "\n";
    }
}

Mat read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path.string() + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) return Mat();
    Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) throw DataError("ragged CSV '" + path.string() + "'");
        for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    return m;
}

Image similarity_overlay(const Image& raw, const Mat& map) {
    cv::Mat grid(static_cast<int>(map.rows()), static_cast<int>(map.cols()), CV_8UC1);
    for (int r = 0; r < grid.rows; ++r) {
        for (int c = 0; c < grid.cols; ++c) {
            const double v = (std::clamp(map(r, c), -1.0, 1.0) + 1.0) * 0.5;
            grid.at<unsigned char>(r, c) = static_cast<unsigned char>(std::lround(v * 255.0));
        }
    }
    cv::Mat up, colored;
    cv::resize(grid, up, cv::Size(raw.width, raw.height), 0, 0, cv::INTER_LINEAR);
    cv::applyColorMap(up, colored, cv::COLORMAP_JET);
    Image out(raw.height, raw.width);
    for (int y = 0; y < raw.height; ++y) {
        for (int x = 0; x < raw.width; ++x) {
            const auto& bgr = colored.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) {
                const double heat = bgr[2 - c] / 255.0;
                out.at(c, y, x) = 0.5 * raw.at(c, y, x) + 0.5 * heat;
            }
        }
    }
    return out;
}

}  // namespace dpclip
