#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ledmerge/checkpoint.hpp"

namespace ledmerge::toy {

struct Example {
    std::vector<double> x;
    std::size_t label = 0;
};

/// Classification pairs standing in for a task's location dataset.
struct LocationDataset {
    std::string name;
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
    /// Throws EmptyDatasetError / ShapeError.
    void validate(std::size_t input_dim) const;
};

/// One record per line: {"x": [floats], "y": int}. The name defaults to the file stem.
LocationDataset load_dataset(const std::filesystem::path& path, std::string name = {});
void save_dataset(const LocationDataset& data, const std::filesystem::path& path);

/// Row-major weight [out_features x in_features] plus bias [out_features].
struct AffineLayer {
    std::size_t in_features = 0;
    std::size_t out_features = 0;
    std::vector<double> weight;
    std::vector<double> bias;

    AffineLayer() = default;
    AffineLayer(std::size_t in, std::size_t out);

    double& w(std::size_t row, std::size_t col) { return weight[row * in_features + col]; }
    double w(std::size_t row, std::size_t col) const { return weight[row * in_features + col]; }

    bool operator==(const AffineLayer&) const = default;
};

/// Feed-forward classifier: affine layers with tanh between them and a linear
/// readout into softmax. Parameters are exported as "layer{k}.weight" /
/// "layer{k}.bias" F64 tensors.
class ToyModel {
public:
    ToyModel() = default;
    /// Throws ShapeError unless out_k == in_{k+1} for consecutive layers.
    explicit ToyModel(std::vector<AffineLayer> layers);

    /// dims = {input, hidden..., classes}; weights ~ N(0, 1/fan_in), biases 0.
    static ToyModel random(std::span<const std::size_t> dims, std::uint64_t seed);
    /// Throws CompatError / ShapeError if names or shapes do not describe a chain.
    static ToyModel from_checkpoint(const Checkpoint& ckpt);
    Checkpoint to_checkpoint() const;

    const std::vector<AffineLayer>& layers() const { return layers_; }
    std::vector<AffineLayer>& layers() { return layers_; }
    std::size_t input_dim() const;
    std::size_t num_classes() const;
    std::size_t parameter_count() const;

    std::vector<double> logits(std::span<const double> x) const;
    std::size_t predict(std::span<const double> x) const;

    bool operator==(const ToyModel&) const = default;

private:
    std::vector<AffineLayer> layers_;
};

std::string weight_name(std::size_t layer);
std::string bias_name(std::size_t layer);

/// Gradients share the layer layout of the model they were taken from.
using Gradients = std::vector<AffineLayer>;

/// -log p(y|x) under a softmax readout.
double forward_loss(const ToyModel& model, const Example& example);

/// Exact reverse-mode gradient of forward_loss for one example.
Gradients backward(const ToyModel& model, const Example& example);

/// Sum of per-example gradients in index order.
Gradients dataset_gradient(const ToyModel& model, const LocationDataset& data);

/// Full-batch gradient descent on the mean loss for `epochs` steps.
/// Returns a new model; throws DivergenceError on a non-finite loss.
/// `seed` is accepted for interface stability; full-batch descent draws no
/// randomness, so results depend only on (model, data order, epochs, lr).
ToyModel train_toy(const ToyModel& model, const LocationDataset& data, int epochs, double lr, std::uint64_t seed = 0);

/// Fraction of examples whose argmax logit (first index on ties) equals the label.
double eval_accuracy(const ToyModel& model, const LocationDataset& data);

struct ConflictOptions {
    /// Fraction of each task's features (and hidden units) shared with the other task.
    double overlap = 0.0;
    std::size_t features_per_task = 8;
    std::size_t hidden_per_task = 8;
    std::size_t train_examples = 256;
    std::size_t test_examples = 512;
};

/// Two binary tasks over one two-layer model.
///
/// Features split into [A-only | shared | B-only] blocks, hidden units into
/// matching groups. The base model connects each hidden group only to its own
/// feature block, so the two tasks train disjoint weights except where the
/// shared block is involved. The shared features enter task A's labels with
/// a positive sign and task B's with a negative sign.
struct ConflictScenario {
    ToyModel base;
    LocationDataset task_a;
    LocationDataset task_b;
    LocationDataset test_a;
    LocationDataset test_b;
    std::size_t shared_features = 0;
    std::size_t shared_hidden = 0;
};

ConflictScenario synth_conflict_scenario(std::uint64_t seed, const ConflictOptions& options = {});

} // namespace ledmerge::toy
