#pragma once

// Flat key=value run configuration with a fixed key registry. Values are
// resolved as: command-line flag, then config file, then registry default.

#include "dpclip/model.hpp"
#include "dpclip/train.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dpclip {

struct ConfigKey {
    std::string name;
    std::string default_value;
    std::string help;
};

const std::vector<ConfigKey>& config_registry();

class RunConfig {
public:
    RunConfig();

    // Lines are "key = value"; '#' starts a comment; blank lines are ignored.
    void merge_file(const std::filesystem::path& path);
    void merge_text(const std::string& text, const std::string& origin = "<text>");
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::int64_t get_i64(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    // Sorted "key=value\n" lines; hash() is FNV-1a 64 over exactly this text.
    std::string canonical() const;
    std::string hash() const;
    nlohmann::json to_json() const;

    ModelConfig model_config() const;
    TrainOptions train_options() const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace dpclip
