#include "dpclip/image.hpp"

#include "dpclip/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace dpclip {

Image load_image(const std::filesystem::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw DataError("cannot decode image '" + path.string() + "'");
    Image img(bgr.rows, bgr.cols);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            img.at(0, y, x) = row[x][2] / 255.0;
            img.at(1, y, x) = row[x][1] / 255.0;
            img.at(2, y, x) = row[x][0] / 255.0;
        }
    }
    return img;
}

void save_image(const Image& img, const std::filesystem::path& path) {
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    auto to_byte = [](double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
    for (int y = 0; y < img.height; ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width; ++x) {
            row[x][2] = to_byte(img.at(0, y, x));
            row[x][1] = to_byte(img.at(1, y, x));
            row[x][0] = to_byte(img.at(2, y, x));
        }
    }
    if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image '" + path.string() + "'");
}

Image resize_bilinear(const Image& img, int height, int width) {
    if (img.height == height && img.width == width) return img;
    Image out(height, width);
    const double sy = static_cast<double>(img.height) / height;
    const double sx = static_cast<double>(img.width) / width;
    for (int y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = img.at(c, y0, x0) * (1 - wx) + img.at(c, y0, x1) * wx;
                const double bot = img.at(c, y1, x0) * (1 - wx) + img.at(c, y1, x1) * wx;
                out.at(c, y, x) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

Image to_grayscale(const Image& img) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double l = 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = l;
        }
    }
    return out;
}

Image normalize_channels(const Image& img, const double mean[3], const double stddev[3]) {
    Image out = img;
    const std::size_t plane = static_cast<std::size_t>(img.height * img.width);
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
            auto& v = out.data[c * plane + i];
            v = (v - mean[c]) / stddev[c];
        }
    }
    return out;
}

}  // namespace dpclip
