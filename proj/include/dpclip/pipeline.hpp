#pragma once

// Glue between the dataset catalog and the model: cached image loading and
// embedding extraction for evaluation.

#include "dpclip/data.hpp"
#include "dpclip/model.hpp"
#include "dpclip/retrieval.hpp"

#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace dpclip {

// Loads images relative to a dataset root and keeps the preprocessed result.
class ImageStore {
public:
    ImageStore(std::filesystem::path root, const DpClipModel& model) : root_(std::move(root)), model_(model) {}

    // Raw decoded image resized to the model input size, without the
    // checkpoint's pixel normalisation (augmentation runs on this).
    const Image& resized(const std::string& path);
    // Resized and normalised, ready for the model.
    Image prepared(const std::string& path);
    Image prepare(const Image& resized_image) const;

    std::filesystem::path resolve(const std::string& path) const;

private:
    std::filesystem::path root_;
    const DpClipModel& model_;
    std::mutex mutex_;
    std::map<std::string, Image> cache_;
};

// Prepared (sketch, photo_1, photo_2) images of a support set.
std::vector<Image> load_support(ImageStore& images, const SupportSet& support);

struct ExtractOptions {
    // Category-specific prompts use these supports; missing entries are an error.
    const SupportAssignment* supports = nullptr;
    // Drop the support sketch from the query set of its category.
    bool exclude_support_sketch = false;
};

// Embeds every record of `categories` (sketches and photos) without gradients.
// Vectors are L2-normalised.
std::vector<EmbeddingRecord> extract_embeddings(const DpClipModel& model, const Catalog& catalog,
                                                ImageStore& images, const std::vector<std::string>& categories,
                                                const ExtractOptions& options);

void split_by_modality(const std::vector<EmbeddingRecord>& all, std::vector<EmbeddingRecord>& sketches,
                       std::vector<EmbeddingRecord>& photos);

}  // namespace dpclip
