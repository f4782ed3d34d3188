#pragma once

#include <filesystem>
#include <vector>

namespace dpclip {

// Planar 3-channel image, values in [0, 1], channel-major (C, H, W).
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(3 * h * w), fill) {}

    double& at(int c, int y, int x) { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
    double at(int c, int y, int x) const { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
    bool operator==(const Image&) const = default;
};

// Decodes any format OpenCV reads; grayscale inputs are expanded to 3 channels.
Image load_image(const std::filesystem::path& path);
void save_image(const Image& img, const std::filesystem::path& path);

Image resize_bilinear(const Image& img, int height, int width);
Image flip_horizontal(const Image& img);
// ITU-R 601 luma replicated over the three channels.
Image to_grayscale(const Image& img);

// Per-channel (x - mean) / std, e.g. the pretrained checkpoint's preprocessing.
Image normalize_channels(const Image& img, const double mean[3], const double stddev[3]);

}  // namespace dpclip
