#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ledmerge/checkpoint.hpp"
#include "ledmerge/toygrad.hpp"

namespace ledmerge {

enum class ScoreMethod { Snip, Wanda, Magnitude, Random, Imported };

std::string_view score_method_name(ScoreMethod method);
/// Throws ConfigError.
ScoreMethod parse_score_method(std::string_view name);

/// Per-weight non-negative importance scores aligned to a reference manifest.
///
/// Scores are produced per tensor on demand, so maps over file-backed or very
/// large checkpoints never hold more than one tensor of scores at a time.
/// Score tensors are F64 for f64 references and F32 otherwise.
class ImportanceMap {
public:
    using Producer = std::function<Tensor(const TensorMeta& score_meta)>;

    ImportanceMap(std::vector<TensorMeta> manifest, Producer producer, ScoreMethod method, std::string dataset_name,
                  std::uint64_t examples_count);

    /// Materialized map; the checkpoint's tensors are the scores.
    static ImportanceMap from_checkpoint(Checkpoint scores, ScoreMethod method, std::string dataset_name,
                                         std::uint64_t examples_count);

    /// Score layout: names and shapes of the reference, dtype of the scores.
    const std::vector<TensorMeta>& manifest() const { return manifest_; }
    const TensorMeta& meta(std::string_view name) const;
    Tensor scores(std::string_view name) const;

    ScoreMethod method() const { return method_; }
    const std::string& dataset_name() const { return dataset_name_; }
    std::uint64_t examples_count() const { return examples_count_; }

    /// Negative entries replaced by their absolute value during import.
    std::uint64_t negatives_normalized() const { return negatives_normalized_; }
    void set_negatives_normalized(std::uint64_t n) { negatives_normalized_ = n; }

    /// Materializes every tensor into an in-memory checkpoint carrying the
    /// method / dataset_name / examples_count metadata.
    Checkpoint to_checkpoint() const;

private:
    std::vector<TensorMeta> manifest_;
    Producer producer_;
    ScoreMethod method_;
    std::string dataset_name_;
    std::uint64_t examples_count_;
    std::uint64_t negatives_normalized_ = 0;
};

struct SnipOptions {
    /// Use only the first N examples of the dataset.
    std::optional<std::size_t> max_examples;
};

/// score_d = mean over examples of |theta_d * dL(x)/dtheta_d|.
ImportanceMap snip_scores(const toy::ToyModel& model, const toy::LocationDataset& data, const SnipOptions& options = {});

/// score[j,k] = |W[j,k]| * ||a_k||_2 over the dataset, where a_k is the k-th
/// input activation of that layer; bias scores are |bias|.
ImportanceMap wanda_scores(const toy::ToyModel& model, const toy::LocationDataset& data);

/// score_d = |value_d|, evaluated lazily per tensor.
ImportanceMap magnitude_scores(const Checkpoint& params);

/// i.i.d. uniform [0, 1) scores; tensor t draws from its own stream derived
/// from (seed, position of t in the manifest).
ImportanceMap random_scores(const Checkpoint& manifest, std::uint64_t seed);

/// Loads a map stored in the checkpoint format. Every tensor is scanned once:
/// NaN or infinity raises NumericsError, negative entries are counted and
/// served as their absolute value.
ImportanceMap import_scores(const std::filesystem::path& path, const Checkpoint& reference);
ImportanceMap import_scores(const std::filesystem::path& path, const std::vector<TensorMeta>& reference);

/// Writes the map in the checkpoint format with metadata keys
/// method, dataset_name, examples_count.
void export_scores(const ImportanceMap& map, const std::filesystem::path& path);

/// Throws NumericsError on the first non-finite or negative score.
void check_scores(const ImportanceMap& map);

} // namespace ledmerge
