#include "support.hpp"

#include "dpclip/data.hpp"

#include <mutex>
#include <unistd.h>

namespace dpclip::testing {

TempDir::TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("dpclip_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

const std::filesystem::path& toy_dataset() {
    static TempDir dir("toydata");
    static std::once_flag once;
    std::call_once(once, [] { write_toy_dataset(dir.path(), ToyDatasetSpec{}); });
    return dir.path();
}

Image random_image(int size, Rng& rng) {
    Image img(size, size);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

Image constant_image(int size, double value) { return Image(size, size, value); }

GradSample check_gradient(const std::function<Var()>& loss, Var& param, int count, Rng& rng, double step) {
    param.zero_grad();
    loss().backward();
    const Mat analytic = param.has_grad() ? param.grad() : Mat::Zero(param.rows(), param.cols());
    GradSample worst;
    bool first = true;
    for (int i = 0; i < count; ++i) {
        const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(param.value().size())));
        double& x = param.mutable_value().data()[idx];
        const double saved = x;
        double plus, minus;
        {
            NoGradGuard ng;
            x = saved + step;
            plus = loss().item();
            x = saved - step;
            minus = loss().item();
        }
        x = saved;
        GradSample s{analytic.data()[idx], (plus - minus) / (2.0 * step)};
        if (first || s.relative_error() > worst.relative_error()) worst = s;
        first = false;
    }
    param.zero_grad();
    return worst;
}

}  // namespace dpclip::testing
