#include "dpclip/pipeline.hpp"

#include "dpclip/errors.hpp"

namespace dpclip {

std::filesystem::path ImageStore::resolve(const std::string& path) const {
    std::filesystem::path p(path);
    return p.is_absolute() ? p : root_ / p;
}

const Image& ImageStore::resized(const std::string& path) {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    const int size = model_.config().backbone.image_size;
    Image img = resize_bilinear(load_image(resolve(path)), size, size);
    return cache_.emplace(path, std::move(img)).first->second;
}

Image ImageStore::prepare(const Image& resized_image) const { return model_.prepare(resized_image); }

Image ImageStore::prepared(const std::string& path) { return prepare(resized(path)); }

std::vector<Image> load_support(ImageStore& images, const SupportSet& support) {
    return {images.prepared(support.sketch), images.prepared(support.photo_1), images.prepared(support.photo_2)};
}

namespace {

RowVec unit(const Var& v) {
    RowVec r = v.value();
    const double n = r.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("embedding with zero or non-finite norm");
    return r / n;
}

}  // namespace

std::vector<EmbeddingRecord> extract_embeddings(const DpClipModel& model, const Catalog& catalog,
                                                ImageStore& images, const std::vector<std::string>& categories,
                                                const ExtractOptions& options) {
    NoGradGuard no_grad;
    const bool needs_support =
        model.config().visual_prompts && model.config().prompt_mode == PromptMode::category_specific;
    std::vector<EmbeddingRecord> out;
    for (const auto& category : categories) {
        std::vector<Image> support;
        const SupportSet* set = nullptr;
        if (options.supports) {
            auto it = options.supports->sets.find(category);
            if (it != options.supports->sets.end()) set = &it->second;
        }
        if (needs_support) {
            if (!set) throw DataError("no support set for category '" + category + "'");
            support = load_support(images, *set);
        }
        const CategoryContext ctx = model.context(category, support);
        for (Modality m : {Modality::sketch, Modality::photo}) {
            for (const InstanceRecord* r : catalog.of(category, m)) {
                if (options.exclude_support_sketch && set && m == Modality::sketch && r->path == set->sketch) continue;
                const Embedding e = model.embed(images.prepared(r->path), ctx);
                EmbeddingRecord rec;
                rec.id = r->id();
                rec.category = r->category;
                rec.instance = r->instance_id;
                rec.modality = m;
                rec.global = unit(e.global);
                for (const auto& l : e.locals) rec.locals.push_back(unit(l));
                out.push_back(std::move(rec));
            }
        }
    }
    return out;
}

void split_by_modality(const std::vector<EmbeddingRecord>& all, std::vector<EmbeddingRecord>& sketches,
                       std::vector<EmbeddingRecord>& photos) {
    for (const auto& r : all) (r.modality == Modality::sketch ? sketches : photos).push_back(r);
}

}  // namespace dpclip
