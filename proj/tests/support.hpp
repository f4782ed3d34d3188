#pragma once

// Shared helpers for the unit and acceptance tests.

#include "dpclip/config.hpp"
#include "dpclip/model.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

namespace dpclip::testing {

inline RunConfig toy_run_config() {
    RunConfig cfg;
    cfg.merge_file(std::filesystem::path(DPCLIP_SOURCE_DIR) / "configs" / "toy.cfg");
    return cfg;
}

inline ModelConfig toy_model_config() { return toy_run_config().model_config(); }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

// Toy dataset written once per process and shared by tests.
const std::filesystem::path& toy_dataset();

Image random_image(int size, Rng& rng);
Image constant_image(int size, double value);

// Central-difference check of d loss / d param at one entry.
struct GradSample {
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error() const {
        const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-10});
        return std::abs(analytic - numeric) / scale;
    }
};

// `loss` must rebuild the graph from current parameter values on every call.
// Returns the worst sample over `count` entries drawn from `rng`.
GradSample check_gradient(const std::function<Var()>& loss, Var& param, int count, Rng& rng, double step = 1e-6);

}  // namespace dpclip::testing
