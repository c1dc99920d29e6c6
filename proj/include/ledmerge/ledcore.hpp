#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ledmerge/bitset.hpp"
#include "ledmerge/checkpoint.hpp"
#include "ledmerge/report.hpp"
#include "ledmerge/scoring.hpp"

namespace ledmerge {

/// Per-tensor bitsets aligned to a manifest (names and shapes).
class BitsetMap {
public:
    BitsetMap() = default;
    explicit BitsetMap(const std::vector<TensorMeta>& layout);

    const std::vector<TensorMeta>& manifest() const { return manifest_; }
    std::size_t tensor_count() const { return bits_.size(); }

    Bitset& bits(std::size_t tensor) { return bits_[tensor]; }
    const Bitset& bits(std::size_t tensor) const { return bits_[tensor]; }
    /// Throws CompatError for an unknown name.
    Bitset& bits(std::string_view name);
    const Bitset& bits(std::string_view name) const;

    /// Total number of set bits across tensors.
    std::uint64_t count() const;

    /// Throws CompatError unless names and shapes match.
    void check_aligned(const BitsetMap& other) const;

    bool same_bits(const BitsetMap& other) const { return bits_ == other.bits_; }

private:
    std::size_t position(std::string_view name) const;

    std::vector<TensorMeta> manifest_;
    std::vector<Bitset> bits_;
};

enum class SetOrigin { Base, Fine, Elected, Disjoint };

/// A set of "neurons", i.e. flat element indices per tensor.
class NeuronSet : public BitsetMap {
public:
    NeuronSet() = default;
    NeuronSet(const std::vector<TensorMeta>& layout, double ratio, SetOrigin origin);

    double ratio() const { return ratio_; }
    SetOrigin origin() const { return origin_; }

private:
    double ratio_ = 1.0;
    SetOrigin origin_ = SetOrigin::Fine;
};

/// Binary merge mask m_i; a set bit applies the task delta at that element.
class MergeMask : public BitsetMap {
public:
    using BitsetMap::BitsetMap;
};

enum class ElectionMode { Both, BaseOnly, FineOnly };
enum class Granularity { PerTensor, Global };

std::string_view election_mode_name(ElectionMode mode);
/// Accepts both/base_only/fine_only and the ablation codes 11/10/01.
ElectionMode parse_election_mode(std::string_view name);
std::string_view granularity_name(Granularity g);
Granularity parse_granularity(std::string_view name);

/// floor(ratio * n), snapping products within 1e-9 of an integer onto it so
/// that decimal ratios such as 0.1 * 10 select exactly 1.
std::uint64_t count_for_ratio(double ratio, std::uint64_t n);

/// The k highest scores, ranked by (score descending, index ascending).
Bitset select_top_k(std::span<const float> scores, std::size_t k);
Bitset select_top_k(std::span<const double> scores, std::size_t k);

/// Top-r neurons of a map. Per-tensor: floor(r * n) per tensor; global:
/// floor(r * D) over all tensors, with flat indices running through tensors in
/// manifest order. Throws ConfigError unless 0 < r <= 1, NumericsError on
/// NaN scores.
NeuronSet top_r_select(const ImportanceMap& map, double ratio, Granularity granularity = Granularity::PerTensor,
                       SetOrigin origin = SetOrigin::Fine);

/// both: intersection; base_only: base_set; fine_only: fine_set.
NeuronSet elect(const NeuronSet& fine_set, const NeuronSet& base_set, ElectionMode mode);

/// Keeps, for each task, only the indices no other task elected.
std::vector<NeuronSet> disjoint(std::span<const NeuronSet> elected);

MergeMask build_mask(const NeuronSet& disjoint_set);

/// Receives merged tensors in manifest order.
using TensorSink = std::function<void(const TensorMeta& meta, Tensor tensor)>;

/// Receives consecutive flat slices of each tensor, tensors in manifest order.
using ChunkSink = std::function<void(const TensorMeta& meta, std::uint64_t first, Tensor chunk)>;

/// Adapts a TensorSink: slices are assembled into whole tensors.
ChunkSink assemble_tensors(TensorSink sink);

inline constexpr std::uint64_t kMergeChunkElements = std::uint64_t{1} << 20;

/// theta_m = theta_base + sum_i lambda_i * tau_i * m_i, element-wise, in the
/// base compute precision, tasks applied in index order. Each tau_i enters as
/// the exact pair fine - base = hi + lo and the sum is compensated, so a
/// single full-mask task with lambda = 1 reproduces the fine values exactly.
/// Elements no mask touches keep their base bits.
/// Throws CompatError on misalignment and NumericsError on non-finite output.
Checkpoint merge(const Checkpoint& base, std::span<const TaskVector> taus, std::span<const MergeMask> masks,
                 std::span<const double> lambdas);
void merge_into(const Checkpoint& base, std::span<const TaskVector> taus, std::span<const MergeMask> masks,
                std::span<const double> lambdas, const TensorSink& sink);
/// Streaming form: at most `chunk` elements of any input are resident at once.
void merge_chunks(const Checkpoint& base, std::span<const TaskVector> taus, std::span<const MergeMask> masks,
                  std::span<const double> lambdas, const ChunkSink& sink,
                  std::uint64_t chunk = kMergeChunkElements);

struct TaskSpec {
    std::string name;
    double ratio = 1.0;
    double lambda = 1.0;
};

struct MergeConfig {
    std::vector<TaskSpec> tasks;
    ElectionMode election = ElectionMode::Both;
    ScoreMethod location = ScoreMethod::Snip;
    Granularity granularity = Granularity::PerTensor;
    /// Tensors matching any glob keep their base values.
    std::vector<std::string> exclusion_patterns;
    /// Ablation switch: false applies the elected sets directly as masks.
    bool disjoint = true;
    std::uint64_t seed = 0;

    /// Throws ConfigError.
    void validate() const;
    bool excluded(std::string_view tensor_name) const;
};

/// Importance maps of one task: the fine-tuned model's and the base model's,
/// both computed on that task's location dataset.
struct TaskScores {
    ImportanceMap fine;
    ImportanceMap base;
};

/// Sets produced by a LED run. With keep_intermediate = false only the masks
/// survive; the report always carries the per-stage counts.
struct LedStages {
    std::vector<NeuronSet> selected_fine;
    std::vector<NeuronSet> selected_base;
    std::vector<NeuronSet> elected;
    std::vector<NeuronSet> disjoint;
    std::vector<MergeMask> masks;
    MergeReport report;
};

/// Location -> election -> disjoint -> masks for all tasks.
LedStages led_stages(const MergeConfig& config, const std::vector<TensorMeta>& layout,
                     std::span<const TaskScores> scores, bool keep_intermediate = true);

struct LedResult {
    Checkpoint merged;
    MergeReport report;
    LedStages stages;
};

/// top_r_select -> elect -> disjoint -> build_mask -> merge.
LedResult led_merge(const MergeConfig& config, const Checkpoint& base, std::span<const Checkpoint> fines,
                    std::span<const TaskScores> scores);

/// Same pipeline, streaming merged tensors into a safetensors file.
MergeReport led_merge_to_file(const MergeConfig& config, const Checkpoint& base, std::span<const Checkpoint> fines,
                              std::span<const TaskScores> scores, const std::filesystem::path& out);

/// Collects sink output into an in-memory checkpoint.
class CheckpointCollector {
public:
    TensorSink sink();
    Checkpoint finish(Metadata metadata = {});

private:
    std::vector<std::pair<std::string, Tensor>> tensors_;
};

} // namespace ledmerge
