#pragma once

// Dataset catalog, seen/unseen splits, support-set selection, single-category
// batch sampling and paired augmentation.
//
// Layout: root/photo/<category>/<stem>.<ext>
//         root/sketch/<category>/<stem>-<k>.<ext>
// A sketch "X-k" depicts photo "X". A manifest CSV (path, modality,
// category, instance_id) overrides the stem rule for the rows it lists.

#include "dpclip/image.hpp"
#include "dpclip/rng.hpp"
#include "dpclip/visual_prompting.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dpclip {

enum class Modality { sketch, photo };

const char* modality_name(Modality m);
Modality parse_modality(const std::string& s);

struct InstanceRecord {
    std::string path;  // absolute or relative to the dataset root
    Modality modality = Modality::photo;
    std::string category;
    std::string instance_id;
    std::optional<int> sketch_variant;

    std::string id() const;  // "<modality>/<category>/<file stem>"
};

struct Catalog {
    std::filesystem::path root;
    std::vector<InstanceRecord> records;
    std::vector<std::string> warnings;

    std::vector<std::string> categories() const;
    std::vector<const InstanceRecord*> of(const std::string& category, Modality m) const;
    // Photo record carrying (category, instance_id), or nullptr.
    const InstanceRecord* photo_for(const std::string& category, const std::string& instance_id) const;
    std::filesystem::path resolve(const InstanceRecord& r) const;
};

// fine_grained: sketches whose instance has no photo are reported in
// Catalog::warnings (and kept).
Catalog scan_dataset(const std::filesystem::path& root, const std::optional<std::filesystem::path>& manifest,
                     bool fine_grained = true);

struct Split {
    std::vector<std::string> seen;
    std::vector<std::string> unseen;

    bool is_seen(const std::string& category) const;
    bool is_unseen(const std::string& category) const;
    void validate() const;  // disjointness

    void save(const std::filesystem::path& path) const;
    static Split load(const std::filesystem::path& path);
};

// Seeded split of the catalog's categories: `unseen_count` categories held out.
Split make_split(const Catalog& catalog, int unseen_count, std::uint64_t seed);

// Per-category support sets plus the seed they were drawn with; on disk:
// {"<category>": {"sketch": path, "photos": [path, path]}, ..., "seed": int}.
struct SupportAssignment {
    std::uint64_t seed = 0;
    std::map<std::string, SupportSet> sets;

    void save(const std::filesystem::path& path) const;
    static SupportAssignment load(const std::filesystem::path& path);
};

SupportSet select_support(const Catalog& catalog, const std::string& category, std::uint64_t seed);
SupportAssignment select_supports(const Catalog& catalog, const std::vector<std::string>& categories,
                                  std::uint64_t seed);

struct PairRef {
    const InstanceRecord* sketch = nullptr;
    const InstanceRecord* photo = nullptr;
};

struct Batch {
    std::string category;
    std::vector<PairRef> pairs;
};

// True sketch->photo pairs of a category.
std::vector<PairRef> category_pairs(const Catalog& catalog, const std::string& category);
std::size_t count_training_pairs(const Catalog& catalog, const Split& split);

// One uniformly drawn seen category with at least one pair; pairs drawn
// without replacement while they last, then with replacement.
Batch sample_batch(const Catalog& catalog, const Split& split, int batch_size, Rng& rng);

struct AugmentFlags {
    bool flipped = false;
    bool photo_grayscale = false;
};

struct ImagePair {
    Image sketch;
    Image photo;
};

// Coupled horizontal flip (p = 0.5) and photo-only grayscale (p = 0.5).
AugmentFlags draw_augment(Rng& rng);
ImagePair augment(const ImagePair& pair, const AugmentFlags& flags);
ImagePair augment(const ImagePair& pair, Rng& rng);

int batches_per_epoch(std::size_t training_pairs, int batch_size);

// Synthetic fine-grained dataset written in the standard layout: each
// category draws a distinct shape family; an instance fixes shape geometry,
// color and a marker; sketches are outlines of their instance with small
// per-variant jitter.
struct ToyDatasetSpec {
    int categories = 3;
    int instances = 6;
    int sketches_per_instance = 2;
    int image_size = 56;
    std::uint64_t seed = 0;
};

std::vector<std::string> toy_category_names(int n);
void write_toy_dataset(const std::filesystem::path& root, const ToyDatasetSpec& spec);

}  // namespace dpclip
