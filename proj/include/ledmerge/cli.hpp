#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ledmerge/analysis.hpp"
#include "ledmerge/baselines.hpp"
#include "ledmerge/ledcore.hpp"

namespace ledmerge::cli {

inline constexpr int kSchemaVersion = 1;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;

struct TaskInput {
    std::string name;
    std::filesystem::path fine;
    std::filesystem::path dataset;
    /// Held-out data for toy-eval / grid; falls back to `dataset`.
    std::filesystem::path eval_dataset;
    std::filesystem::path fine_scores;
    std::filesystem::path base_scores;
    std::optional<double> ratio;
    std::optional<double> lambda;
};

/// Declarative run description shared by every subcommand. Unknown keys are
/// rejected; relative paths resolve against the config file's directory.
struct RunConfig {
    std::filesystem::path base;
    std::vector<TaskInput> tasks;
    std::string method = "led";
    ScoreMethod location = ScoreMethod::Snip;
    ElectionMode election = ElectionMode::Both;
    Granularity granularity = Granularity::PerTensor;
    std::vector<std::string> exclude;
    bool disjoint = true;
    /// Defaults for tasks that leave ratio / lambda unset.
    double ratio = 0.2;
    double lambda = 1.0;
    double trim_keep_ratio = 0.7;
    double top_mask_ratio = 0.01;
    double keep_ratio = 0.9;
    std::optional<std::size_t> max_examples;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir = ".";

    std::filesystem::path map_a;
    std::filesystem::path map_b;
    double jaccard_ratio = 0.2;
    std::vector<LayerKindRule> layer_kinds;
    bool csv = false;

    std::filesystem::path model;
    std::vector<std::filesystem::path> datasets;
    int epochs = 300;
    double lr = 0.5;
    std::filesystem::path output;

    double overlap = 0.0;
    std::size_t features_per_task = 8;
    std::size_t hidden_per_task = 8;
    std::size_t train_examples = 256;
    std::size_t test_examples = 512;

    /// Axis name -> explicit value list.
    nlohmann::json grid = nlohmann::json::object();

    MergeConfig merge_config() const;
    BaselineConfig baseline_config() const;
};

/// Throws ConfigError on unknown keys, wrong types or a missing/unsupported
/// schema_version.
RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

/// Per-task fine/base importance maps for a merge, as the CLI builds them:
/// imported files when given, otherwise the configured location method.
std::vector<TaskScores> build_scores(const RunConfig& config, const Checkpoint& base,
                                     const std::vector<Checkpoint>& fines);

/// Runs the configured merge and streams the merged values to `sink`. LED
/// merges arrive in bounded slices, baselines as whole tensors.
MergeReport run_merge(const RunConfig& config, const ChunkSink& sink);

/// Rows of a grid run, before grid_report.
std::vector<GridRow> run_grid_cells(const RunConfig& config, const nlohmann::json& raw, std::size_t threads);

/// Worker count from LEDMERGE_THREADS, else hardware concurrency.
std::size_t worker_threads();

/// Entry point: args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace ledmerge::cli
