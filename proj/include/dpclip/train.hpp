#pragma once

// Triplet objective over the global and four local features, two-tier Adam,
// the training loop and checkpoints.

#include "dpclip/data.hpp"
#include "dpclip/model.hpp"
#include "dpclip/pipeline.hpp"
#include "dpclip/retrieval.hpp"

#include <array>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dpclip {

enum class Mining { hardest_in_batch, random_in_batch };

const char* mining_name(Mining m);
Mining parse_mining(const std::string& s);

struct TripletConfig {
    double margin = 0.15;
    Mining mining = Mining::hardest_in_batch;
    DistanceKind distance = DistanceKind::cosine;
};

// max(0, d(a,p) - d(a,n) + margin) on L2-normalised copies of the inputs.
double triplet_loss(const RowVec& anchor, const RowVec& positive, const RowVec& negative, const TripletConfig& cfg);

struct BatchLoss {
    Var total;  // undefined when skipped
    double global = 0.0;
    std::array<double, 4> local{};
    bool skipped = false;
    // Chosen negative (photo index) per anchor for the global term.
    std::vector<int> negatives;
};

// sketches[i] and photos[i] form a true pair; photos whose instance equals the
// anchor's are never negatives. total = L(global) + trade_off * sum_k L(local k),
// each term a mean over anchors. `rng` is needed for random mining only.
BatchLoss batch_loss(const std::vector<Embedding>& sketches, const std::vector<Embedding>& photos,
                     const std::vector<std::string>& instance_ids, const TripletConfig& cfg, double trade_off,
                     Rng* rng = nullptr);

// Pairwise distance matrix (rows: anchors, cols: photos) as a graph value.
Var distance_matrix(const std::vector<Var>& anchors, const std::vector<Var>& photos, DistanceKind kind);

struct OptimSchedule {
    double lr_norm = 1e-6;
    double lr_module = 1e-5;
    int epochs = 60;
    double trade_off = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over the non-frozen tiers of a policy.
class Optimizer {
public:
    Optimizer(ParameterStore& store, const ParameterPolicy& policy, const OptimSchedule& schedule);

    // Parameters without an accumulated gradient are left untouched.
    void step();
    void zero_grad();

    std::int64_t steps() const { return t_; }
    double lr(Tier t) const;
    std::size_t group_size(Tier t) const;

    void save_state(TensorFile& file) const;
    void load_state(const TensorFile& file);

private:
    struct Slot {
        Parameter* param;
        Tier tier;
        Mat m, v;
    };
    OptimSchedule schedule_;
    std::vector<Slot> slots_;
    std::int64_t t_ = 0;
};

struct TrainOptions {
    TripletConfig triplet;
    OptimSchedule schedule;
    int batch_size = 64;
    std::uint64_t seed = 0;
    // Stops after this many steps when >= 0, else after schedule.epochs.
    std::int64_t max_steps = -1;
    std::int64_t checkpoint_every = 0;  // 0: only the final checkpoint
    std::string config_hash;
};

struct StepRecord {
    std::int64_t step = 0;
    int epoch = 0;
    double loss = 0.0;
    double loss_global = 0.0;
    std::array<double, 4> loss_local{};
    bool skipped = false;

    nlohmann::json to_json(const Optimizer& opt) const;
};

class Trainer {
public:
    Trainer(DpClipModel& model, const Catalog& catalog, const Split& split, const TrainOptions& options);

    // One optimizer step on a freshly sampled batch.
    StepRecord step();
    // Runs to the configured end; `on_step` sees every record, `on_checkpoint`
    // each periodic checkpoint.
    void run(const std::function<void(const StepRecord&)>& on_step,
             const std::function<void(const TensorFile&, std::int64_t step)>& on_checkpoint = {});

    std::int64_t total_steps() const;
    std::int64_t current_step() const { return step_; }
    int steps_per_epoch() const { return steps_per_epoch_; }
    const Optimizer& optimizer() const { return optimizer_; }
    ImageStore& images() { return images_; }

    TensorFile checkpoint() const;
    void resume(const TensorFile& file);

private:
    DpClipModel& model_;
    const Catalog& catalog_;
    const Split& split_;
    TrainOptions options_;
    Optimizer optimizer_;
    ImageStore images_;
    Rng rng_;
    std::int64_t step_ = 0;
    int steps_per_epoch_ = 1;
    std::vector<StepRecord> history_;
};

// Restores the trainable parameters of a checkpoint into a model whose
// configuration matches.
void load_checkpoint_parameters(DpClipModel& model, const TensorFile& file);
ModelConfig checkpoint_model_config(const TensorFile& file);

}  // namespace dpclip
