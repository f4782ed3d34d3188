#include "dpclip/train.hpp"

#include "dpclip/errors.hpp"

#include <cmath>
#include <sstream>

namespace dpclip {

const char* mining_name(Mining m) { return m == Mining::hardest_in_batch ? "hardest_in_batch" : "random_in_batch"; }

Mining parse_mining(const std::string& s) {
    if (s == "hardest_in_batch" || s == "hardest") return Mining::hardest_in_batch;
    if (s == "random_in_batch" || s == "random") return Mining::random_in_batch;
    throw ConfigError("unknown mining rule '" + s + "'");
}

namespace {

RowVec unit_or_throw(const RowVec& v, const char* what) {
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError(std::string(what) + " vector has zero or non-finite norm");
    return v / n;
}

double vector_distance(const RowVec& a, const RowVec& b, DistanceKind kind) {
    const double cos = a.dot(b);
    if (kind == DistanceKind::cosine) return 1.0 - cos;
    return std::sqrt(std::max(0.0, 2.0 - 2.0 * cos));
}

struct Term {
    Var loss;
    double value = 0.0;
    std::vector<int> negatives;
    bool any = false;
};

Term triplet_term(const std::vector<Var>& anchors, const std::vector<Var>& photos,
                  const std::vector<std::string>& ids, const TripletConfig& cfg, Rng* rng) {
    const auto b = static_cast<Eigen::Index>(anchors.size());
    const Var d = distance_matrix(anchors, photos, cfg.distance);
    const Mat& dv = d.value();

    Mat pos_mask = Mat::Zero(b, b);
    Mat neg_mask = Mat::Zero(b, b);
    Mat active = Mat::Zero(b, 1);
    Term t;
    t.negatives.assign(static_cast<std::size_t>(b), -1);
    int count = 0;
    for (Eigen::Index i = 0; i < b; ++i) {
        std::vector<int> candidates;
        for (Eigen::Index j = 0; j < b; ++j) {
            if (ids[static_cast<std::size_t>(j)] != ids[static_cast<std::size_t>(i)]) candidates.push_back(static_cast<int>(j));
        }
        if (candidates.empty()) continue;
        int n = candidates.front();
        if (cfg.mining == Mining::hardest_in_batch) {
            for (int j : candidates) {
                if (dv(i, j) < dv(i, n)) n = j;
            }
        } else {
            if (!rng) throw UsageError("random mining needs a generator");
            n = candidates[rng->below(candidates.size())];
        }
        pos_mask(i, i) = 1.0;
        neg_mask(i, n) = 1.0;
        active(i, 0) = 1.0;
        t.negatives[static_cast<std::size_t>(i)] = n;
        ++count;
    }
    if (count == 0) return t;

    const Var ones = constant(Mat::Ones(b, 1));
    const Var pos = ops::matmul(ops::mul(d, constant(pos_mask)), ones);
    const Var neg = ops::matmul(ops::mul(d, constant(neg_mask)), ones);
    const Var hinge = ops::relu(ops::add_scalar(pos - neg, cfg.margin));
    t.loss = ops::scale(ops::sum(ops::mul(hinge, constant(active))), 1.0 / count);
    t.value = t.loss.item();
    t.any = true;
    return t;
}

}  // namespace

double triplet_loss(const RowVec& anchor, const RowVec& positive, const RowVec& negative, const TripletConfig& cfg) {
    if (cfg.margin < 0.0) throw ConfigError("triplet margin must be non-negative");
    if (anchor.size() != positive.size() || anchor.size() != negative.size()) {
        throw ShapeError("triplet vectors differ in length");
    }
    const RowVec a = unit_or_throw(anchor, "anchor");
    const RowVec p = unit_or_throw(positive, "positive");
    const RowVec n = unit_or_throw(negative, "negative");
    return std::max(0.0, vector_distance(a, p, cfg.distance) - vector_distance(a, n, cfg.distance) + cfg.margin);
}

Var distance_matrix(const std::vector<Var>& anchors, const std::vector<Var>& photos, DistanceKind kind) {
    const Var a = ops::l2_normalize_rows(ops::concat_rows(anchors));
    const Var p = ops::l2_normalize_rows(ops::concat_rows(photos));
    const Var sim = ops::matmul_nt(a, p);
    if (kind == DistanceKind::cosine) return ops::add_scalar(ops::scale(sim, -1.0), 1.0);
    return ops::sqrt(ops::add_scalar(ops::scale(sim, -2.0), 2.0));
}

BatchLoss batch_loss(const std::vector<Embedding>& sketches, const std::vector<Embedding>& photos,
                     const std::vector<std::string>& instance_ids, const TripletConfig& cfg, double trade_off,
                     Rng* rng) {
    if (cfg.margin < 0.0) throw ConfigError("triplet margin must be non-negative");
    if (sketches.size() != photos.size() || sketches.size() != instance_ids.size()) {
        throw UsageError("batch_loss needs one photo and one instance id per sketch");
    }
    BatchLoss out;
    if (sketches.size() < 2) {
        out.skipped = true;
        return out;
    }
    auto gather = [](const std::vector<Embedding>& es, int k) {
        std::vector<Var> v;
        for (const auto& e : es) v.push_back(k < 0 ? e.global : e.locals.at(static_cast<std::size_t>(k)));
        return v;
    };
    Term g = triplet_term(gather(sketches, -1), gather(photos, -1), instance_ids, cfg, rng);
    if (!g.any) {
        out.skipped = true;
        return out;
    }
    out.global = g.value;
    out.negatives = g.negatives;
    out.total = g.loss;

    const bool locals = !sketches.front().locals.empty();
    for (std::size_t i = 0; i < sketches.size(); ++i) {
        if (sketches[i].locals.empty() != !locals || photos[i].locals.empty() != !locals) {
            throw ShapeError("batch mixes embeddings with and without local features");
        }
    }
    if (locals) {
        std::vector<Var> terms;
        for (int k = 0; k < 4; ++k) {
            Term l = triplet_term(gather(sketches, k), gather(photos, k), instance_ids, cfg, rng);
            out.local[static_cast<std::size_t>(k)] = l.value;
            terms.push_back(l.loss);
        }
        const Var local_sum = terms[0] + terms[1] + terms[2] + terms[3];
        out.total = out.total + ops::scale(local_sum, trade_off);
    }
    return out;
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(ParameterStore& store, const ParameterPolicy& policy, const OptimSchedule& schedule)
    : schedule_(schedule) {
    for (auto& p : store.all()) {
        const Tier tier = policy.tier_of(p.name);
        if (tier == Tier::frozen) continue;
        slots_.push_back({&p, tier, Mat(), Mat()});
    }
}

double Optimizer::lr(Tier t) const {
    switch (t) {
        case Tier::norm: return schedule_.lr_norm;
        case Tier::module: return schedule_.lr_module;
        case Tier::frozen: return 0.0;
    }
    return 0.0;
}

std::size_t Optimizer::group_size(Tier t) const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.tier == t;
    return n;
}

void Optimizer::zero_grad() {
    for (auto& s : slots_) s.param->var.zero_grad();
}

void Optimizer::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(schedule_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(schedule_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
        Var& v = s.param->var;
        if (!v.has_grad()) continue;
        const Mat& g = v.grad();
        if (s.m.size() == 0) {
            s.m = Mat::Zero(g.rows(), g.cols());
            s.v = Mat::Zero(g.rows(), g.cols());
        }
        s.m = schedule_.beta1 * s.m + (1.0 - schedule_.beta1) * g;
        s.v = schedule_.beta2 * s.v + (1.0 - schedule_.beta2) * g.cwiseProduct(g);
        const double rate = lr(s.tier);
        v.mutable_value().array() -=
            rate * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + schedule_.eps);
    }
}

void Optimizer::save_state(TensorFile& file) const {
    for (const auto& s : slots_) {
        if (s.m.size() == 0) continue;
        file.put("optimizer.m." + s.param->name, s.m);
        file.put("optimizer.v." + s.param->name, s.v);
    }
    file.metadata()["optimizer_step"] = std::to_string(t_);
}

void Optimizer::load_state(const TensorFile& file) {
    const auto& meta = file.metadata();
    auto it = meta.find("optimizer_step");
    if (it == meta.end()) throw LoadError("checkpoint has no optimizer state");
    t_ = std::stoll(it->second);
    for (auto& s : slots_) {
        const std::string m_name = "optimizer.m." + s.param->name;
        if (!file.contains(m_name)) {
            s.m.resize(0, 0);
            s.v.resize(0, 0);
            continue;
        }
        const auto& value = s.param->var.value();
        const std::vector<std::int64_t> shape{value.rows(), value.cols()};
        s.m = file.expect(m_name, shape).as_matrix();
        s.v = file.expect("optimizer.v." + s.param->name, shape).as_matrix();
    }
}

// ---------------------------------------------------------------------------

nlohmann::json StepRecord::to_json(const Optimizer& opt) const {
    return {{"step", step},
            {"epoch", epoch},
            {"loss", loss},
            {"loss_global", loss_global},
            {"loss_local", loss_local},
            {"lr", {{"norm_tier", opt.lr(Tier::norm)}, {"module_tier", opt.lr(Tier::module)}}},
            {"skipped", skipped}};
}

Trainer::Trainer(DpClipModel& model, const Catalog& catalog, const Split& split, const TrainOptions& options)
    : model_(model),
      catalog_(catalog),
      split_(split),
      options_(options),
      optimizer_(model.params(), model.policy(), options.schedule),
      images_(catalog.root, model),
      rng_(options.seed) {
    if (options_.batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (options_.triplet.margin < 0.0) throw ConfigError("margin must be non-negative");
    split_.validate();
    const std::size_t pairs = count_training_pairs(catalog_, split_);
    if (pairs == 0) throw DataError("no training pairs in the seen categories");
    steps_per_epoch_ = batches_per_epoch(pairs, options_.batch_size);
}

std::int64_t Trainer::total_steps() const {
    if (options_.max_steps >= 0) return options_.max_steps;
    return static_cast<std::int64_t>(options_.schedule.epochs) * steps_per_epoch_;
}

StepRecord Trainer::step() {
    StepRecord rec;
    rec.step = step_;
    rec.epoch = static_cast<int>(step_ / steps_per_epoch_);

    const Batch batch = sample_batch(catalog_, split_, options_.batch_size, rng_);

    std::vector<Image> support;
    const auto& cfg = model_.config();
    if (cfg.visual_prompts && cfg.prompt_mode == PromptMode::category_specific) {
        const auto sketches = catalog_.of(batch.category, Modality::sketch);
        const auto photos = catalog_.of(batch.category, Modality::photo);
        if (sketches.empty() || photos.size() < 2) {
            throw DataError("category '" + batch.category + "' cannot form a support set");
        }
        const auto s = rng_.below(sketches.size());
        const auto a = rng_.below(photos.size());
        auto b = rng_.below(photos.size() - 1);
        if (b >= a) ++b;
        support = {images_.prepared(sketches[s]->path), images_.prepared(photos[a]->path),
                   images_.prepared(photos[b]->path)};
    }
    const CategoryContext ctx = model_.context(batch.category, support);

    std::vector<Embedding> sketch_emb, photo_emb;
    std::vector<std::string> ids;
    for (const PairRef& pair : batch.pairs) {
        Rng aug_rng = Rng::derive(options_.seed, static_cast<std::uint64_t>(rec.epoch),
                                  fnv1a64(pair.sketch->id() + "|" + pair.photo->id()));
        const ImagePair raw{images_.resized(pair.sketch->path), images_.resized(pair.photo->path)};
        const ImagePair aug = augment(raw, aug_rng);
        sketch_emb.push_back(model_.embed(images_.prepare(aug.sketch), ctx));
        photo_emb.push_back(model_.embed(images_.prepare(aug.photo), ctx));
        ids.push_back(pair.photo->instance_id);
    }

    BatchLoss loss = batch_loss(sketch_emb, photo_emb, ids, options_.triplet, options_.schedule.trade_off, &rng_);
    ++step_;
    if (loss.skipped) {
        rec.skipped = true;
        history_.push_back(rec);
        return rec;
    }
    rec.loss = loss.total.item();
    rec.loss_global = loss.global;
    rec.loss_local = loss.local;
    if (!std::isfinite(rec.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << rec.step << " (category '" << batch.category << "'; pairs:";
        for (const auto& p : batch.pairs) msg << " " << p.sketch->id() << "~" << p.photo->id();
        msg << ")";
        throw NumericError(msg.str());
    }
    optimizer_.zero_grad();
    loss.total.backward();
    optimizer_.step();
    model_.bump_version();
    history_.push_back(rec);
    return rec;
}

void Trainer::run(const std::function<void(const StepRecord&)>& on_step,
                  const std::function<void(const TensorFile&, std::int64_t)>& on_checkpoint) {
    const std::int64_t end = total_steps();
    while (step_ < end) {
        const StepRecord rec = step();
        if (on_step) on_step(rec);
        if (on_checkpoint && options_.checkpoint_every > 0 && step_ % options_.checkpoint_every == 0 && step_ < end) {
            on_checkpoint(checkpoint(), step_);
        }
    }
}

TensorFile Trainer::checkpoint() const {
    TensorFile file;
    const auto& policy = model_.policy();
    std::vector<std::string> names;
    for (Tier t : {Tier::norm, Tier::module}) {
        for (auto& n : policy.names_in(t)) names.push_back(n);
    }
    model_.params().save_to(file, names);
    optimizer_.save_state(file);

    nlohmann::json history = nlohmann::json::array();
    for (const auto& r : history_) {
        history.push_back({{"step", r.step}, {"loss", r.loss}, {"skipped", r.skipped}});
    }
    auto& meta = file.metadata();
    meta["format"] = "dpclip-checkpoint";
    meta["config_hash"] = options_.config_hash;
    meta["step"] = std::to_string(step_);
    meta["epoch"] = std::to_string(step_ / steps_per_epoch_);
    meta["rng_state"] = rng_.state();
    meta["model_config"] = nlohmann::json(model_.config()).dump();
    meta["history"] = history.dump();
    return file;
}

void Trainer::resume(const TensorFile& file) {
    const auto& meta = file.metadata();
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = meta.find(key);
        if (it == meta.end()) throw LoadError("checkpoint metadata lacks '" + key + "'");
        return it->second;
    };
    if (get("config_hash") != options_.config_hash) {
        throw ConfigError("checkpoint config hash " + get("config_hash") + " does not match " + options_.config_hash);
    }
    load_checkpoint_parameters(model_, file);
    optimizer_.load_state(file);
    step_ = std::stoll(get("step"));
    rng_.restore(get("rng_state"));
    history_.clear();
    for (const auto& h : nlohmann::json::parse(get("history"))) {
        StepRecord r;
        r.step = h.at("step").get<std::int64_t>();
        r.loss = h.at("loss").get<double>();
        r.skipped = h.at("skipped").get<bool>();
        history_.push_back(r);
    }
    model_.bump_version();
}

void load_checkpoint_parameters(DpClipModel& model, const TensorFile& file) {
    const auto& policy = model.policy();
    for (Tier t : {Tier::norm, Tier::module}) {
        for (const auto& name : policy.names_in(t)) {
            auto& p = model.params().at(name);
            const Tensor& src = file.expect(name, p.shape);
            Mat& dst = p.var.mutable_value();
            std::copy(src.data.begin(), src.data.end(), dst.data());
        }
    }
    model.bump_version();
}

ModelConfig checkpoint_model_config(const TensorFile& file) {
    auto it = file.metadata().find("model_config");
    if (it == file.metadata().end()) throw LoadError("checkpoint has no model configuration");
    try {
        return nlohmann::json::parse(it->second).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed model configuration in checkpoint: ") + e.what());
    }
}

}  // namespace dpclip
