#include "ledmerge/toygrad.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/core.h>
#include <json.hpp>

#include "ledmerge/errors.hpp"
#include "ledmerge/random.hpp"

namespace ledmerge::toy {

void LocationDataset::validate(std::size_t input_dim) const {
    if (examples.empty()) throw EmptyDatasetError(fmt::format("dataset '{}' is empty", name));
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (examples[i].x.size() != input_dim)
            throw ShapeError(fmt::format("dataset '{}' example {}: {} features, model expects {}", name, i,
                                         examples[i].x.size(), input_dim));
    }
}

LocationDataset load_dataset(const std::filesystem::path& path, std::string name) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open dataset '{}'", path.string()));
    LocationDataset data;
    data.name = name.empty() ? path.stem().string() : std::move(name);

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
        }
        if (!record.is_object() || !record.contains("x") || !record.contains("y") || !record["x"].is_array() ||
            !record["y"].is_number_integer() || record["y"].get<std::int64_t>() < 0)
            throw FormatError(fmt::format("{}:{}: expected {{\"x\": [floats], \"y\": non-negative int}}",
                                          path.string(), line_no));
        Example ex;
        for (const auto& v : record["x"]) {
            if (!v.is_number()) throw FormatError(fmt::format("{}:{}: non-numeric feature", path.string(), line_no));
            ex.x.push_back(v.get<double>());
        }
        ex.label = record["y"].get<std::size_t>();
        if (!data.examples.empty() && ex.x.size() != data.examples.front().x.size())
            throw ShapeError(fmt::format("{}:{}: {} features, earlier records have {}", path.string(), line_no,
                                         ex.x.size(), data.examples.front().x.size()));
        data.examples.push_back(std::move(ex));
    }
    if (data.examples.empty()) throw EmptyDatasetError(fmt::format("dataset '{}' has no records", path.string()));
    return data;
}

void save_dataset(const LocationDataset& data, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write dataset '{}'", path.string()));
    for (const auto& ex : data.examples) out << nlohmann::json{{"x", ex.x}, {"y", ex.label}}.dump() << '\n';
    if (!out) throw IoError(fmt::format("write failed on '{}'", path.string()));
}

AffineLayer::AffineLayer(std::size_t in, std::size_t out)
    : in_features(in), out_features(out), weight(in * out, 0.0), bias(out, 0.0) {}

ToyModel::ToyModel(std::vector<AffineLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ShapeError("a toy model needs at least one layer");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
        const auto& l = layers_[k];
        if (l.in_features == 0 || l.out_features == 0 || l.weight.size() != l.in_features * l.out_features ||
            l.bias.size() != l.out_features)
            throw ShapeError(fmt::format("layer {} has inconsistent parameter sizes", k));
        if (k > 0 && layers_[k - 1].out_features != l.in_features)
            throw ShapeError(fmt::format("layer {} expects {} inputs but layer {} produces {}", k, l.in_features, k - 1,
                                         layers_[k - 1].out_features));
    }
}

ToyModel ToyModel::random(std::span<const std::size_t> dims, std::uint64_t seed) {
    if (dims.size() < 2) throw ShapeError("need at least input and output dimensions");
    std::mt19937_64 gen(seed);
    std::vector<AffineLayer> layers;
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
        AffineLayer layer(dims[k], dims[k + 1]);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dims[k]));
        for (auto& w : layer.weight) w = scale * standard_normal(gen);
        layers.push_back(std::move(layer));
    }
    return ToyModel(std::move(layers));
}

std::string weight_name(std::size_t layer) { return fmt::format("layer{}.weight", layer); }
std::string bias_name(std::size_t layer) { return fmt::format("layer{}.bias", layer); }

ToyModel ToyModel::from_checkpoint(const Checkpoint& ckpt) {
    std::vector<AffineLayer> layers;
    for (std::size_t k = 0;; ++k) {
        const auto* w = ckpt.find(weight_name(k));
        const auto* b = ckpt.find(bias_name(k));
        if (w == nullptr && b == nullptr) break;
        if (w == nullptr || b == nullptr)
            throw CompatError(fmt::format("layer {} is missing its {}", k, w == nullptr ? "weight" : "bias"));
        if (w->shape.size() != 2 || b->shape.size() != 1 || b->shape[0] != w->shape[0])
            throw ShapeError(fmt::format("layer {} tensors are not [out, in] / [out]", k));
        AffineLayer layer(w->shape[1], w->shape[0]);
        const Tensor wt = ckpt.read(w->name);
        const Tensor bt = ckpt.read(b->name);
        for (std::size_t i = 0; i < layer.weight.size(); ++i) layer.weight[i] = wt.at(i);
        for (std::size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] = bt.at(i);
        layers.push_back(std::move(layer));
    }
    if (layers.size() * 2 != ckpt.size())
        throw CompatError(fmt::format("checkpoint has {} tensors, a {}-layer toy model has {}", ckpt.size(),
                                      layers.size(), layers.size() * 2));
    return ToyModel(std::move(layers));
}

Checkpoint ToyModel::to_checkpoint() const {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
        const auto& l = layers_[k];
        tensors.emplace_back(weight_name(k), Tensor({l.out_features, l.in_features}, l.weight));
        tensors.emplace_back(bias_name(k), Tensor({l.out_features}, l.bias));
    }
    return Checkpoint::from_tensors(std::move(tensors));
}

std::size_t ToyModel::input_dim() const { return layers_.empty() ? 0 : layers_.front().in_features; }
std::size_t ToyModel::num_classes() const { return layers_.empty() ? 0 : layers_.back().out_features; }

std::size_t ToyModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

namespace {

void affine(const AffineLayer& layer, std::span<const double> in, std::vector<double>& out) {
    out.assign(layer.bias.begin(), layer.bias.end());
    for (std::size_t j = 0; j < layer.out_features; ++j) {
        const double* row = layer.weight.data() + j * layer.in_features;
        double acc = out[j];
        for (std::size_t k = 0; k < layer.in_features; ++k) acc += row[k] * in[k];
        out[j] = acc;
    }
}

/// Activations per layer input: acts[0] = x, acts[k] = tanh(z_{k-1}); plus final logits.
struct Trace {
    std::vector<std::vector<double>> inputs;
    std::vector<double> logits;
};

Trace run_forward(const ToyModel& model, std::span<const double> x) {
    if (x.size() != model.input_dim())
        throw ShapeError(fmt::format("input has {} features, model expects {}", x.size(), model.input_dim()));
    Trace trace;
    trace.inputs.emplace_back(x.begin(), x.end());
    const auto& layers = model.layers();
    std::vector<double> z;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        affine(layers[k], trace.inputs.back(), z);
        if (k + 1 < layers.size()) {
            for (auto& v : z) v = std::tanh(v);
            trace.inputs.push_back(z);
        }
    }
    trace.logits = std::move(z);
    return trace;
}

void check_label(const ToyModel& model, const Example& example) {
    if (example.label >= model.num_classes())
        throw ShapeError(fmt::format("label {} outside the model's {} classes", example.label, model.num_classes()));
}

double log_sum_exp(std::span<const double> z) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

Gradients zeros_like(const ToyModel& model) {
    Gradients g;
    for (const auto& l : model.layers()) g.emplace_back(l.in_features, l.out_features);
    return g;
}

} // namespace

std::vector<double> ToyModel::logits(std::span<const double> x) const { return run_forward(*this, x).logits; }

std::size_t ToyModel::predict(std::span<const double> x) const {
    const auto z = logits(x);
    return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

double forward_loss(const ToyModel& model, const Example& example) {
    check_label(model, example);
    const auto trace = run_forward(model, example.x);
    return log_sum_exp(trace.logits) - trace.logits[example.label];
}

Gradients backward(const ToyModel& model, const Example& example) {
    check_label(model, example);
    const auto trace = run_forward(model, example.x);
    const auto& layers = model.layers();
    Gradients grads = zeros_like(model);

    // dL/dz for the readout: softmax(z) - onehot(y)
    const double lse = log_sum_exp(trace.logits);
    std::vector<double> dz(trace.logits.size());
    for (std::size_t c = 0; c < dz.size(); ++c) dz[c] = std::exp(trace.logits[c] - lse);
    dz[example.label] -= 1.0;

    for (std::size_t k = layers.size(); k-- > 0;) {
        const auto& layer = layers[k];
        const auto& input = trace.inputs[k];
        auto& g = grads[k];
        for (std::size_t j = 0; j < layer.out_features; ++j) {
            g.bias[j] = dz[j];
            double* row = g.weight.data() + j * layer.in_features;
            for (std::size_t i = 0; i < layer.in_features; ++i) row[i] = dz[j] * input[i];
        }
        if (k == 0) break;
        std::vector<double> dprev(layer.in_features, 0.0);
        for (std::size_t j = 0; j < layer.out_features; ++j) {
            const double* row = layer.weight.data() + j * layer.in_features;
            for (std::size_t i = 0; i < layer.in_features; ++i) dprev[i] += row[i] * dz[j];
        }
        // input[i] = tanh(z_prev[i])
        for (std::size_t i = 0; i < dprev.size(); ++i) dprev[i] *= 1.0 - input[i] * input[i];
        dz = std::move(dprev);
    }
    return grads;
}

Gradients dataset_gradient(const ToyModel& model, const LocationDataset& data) {
    Gradients total = zeros_like(model);
    for (const auto& ex : data.examples) {
        const auto g = backward(model, ex);
        for (std::size_t k = 0; k < g.size(); ++k) {
            for (std::size_t i = 0; i < g[k].weight.size(); ++i) total[k].weight[i] += g[k].weight[i];
            for (std::size_t i = 0; i < g[k].bias.size(); ++i) total[k].bias[i] += g[k].bias[i];
        }
    }
    return total;
}

ToyModel train_toy(const ToyModel& model, const LocationDataset& data, int epochs, double lr, std::uint64_t /*seed*/) {
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive and finite");
    ToyModel current = model;
    if (epochs == 0) return current;
    data.validate(model.input_dim());

    const double inv_n = 1.0 / static_cast<double>(data.size());
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double loss = 0.0;
        for (const auto& ex : data.examples) loss += forward_loss(current, ex);
        if (!std::isfinite(loss)) throw DivergenceError(fmt::format("non-finite loss at epoch {}", epoch));
        const auto grads = dataset_gradient(current, data);
        auto& layers = current.layers();
        for (std::size_t k = 0; k < layers.size(); ++k) {
            for (std::size_t i = 0; i < layers[k].weight.size(); ++i)
                layers[k].weight[i] -= lr * inv_n * grads[k].weight[i];
            for (std::size_t i = 0; i < layers[k].bias.size(); ++i) layers[k].bias[i] -= lr * inv_n * grads[k].bias[i];
        }
    }
    for (const auto& l : current.layers()) {
        for (double v : l.weight)
            if (!std::isfinite(v)) throw DivergenceError("parameters became non-finite");
        for (double v : l.bias)
            if (!std::isfinite(v)) throw DivergenceError("parameters became non-finite");
    }
    return current;
}

double eval_accuracy(const ToyModel& model, const LocationDataset& data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& ex : data.examples) {
        if (model.predict(ex.x) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace {

struct Block {
    std::size_t begin = 0;
    std::size_t end = 0;
};

LocationDataset make_task(std::string name, std::size_t count, std::size_t input_dim, Block own, Block shared,
                          std::span<const double> own_coef, std::span<const double> shared_coef, double shared_sign,
                          std::mt19937_64& gen) {
    LocationDataset data;
    data.name = std::move(name);
    data.examples.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        Example ex;
        ex.x.assign(input_dim, 0.0);
        double score = 0.0;
        for (std::size_t k = own.begin; k < own.end; ++k) {
            ex.x[k] = standard_normal(gen);
            score += own_coef[k - own.begin] * ex.x[k];
        }
        for (std::size_t k = shared.begin; k < shared.end; ++k) {
            ex.x[k] = standard_normal(gen);
            score += shared_sign * shared_coef[k - shared.begin] * ex.x[k];
        }
        ex.label = score > 0.0 ? 1 : 0;
        data.examples.push_back(std::move(ex));
    }
    return data;
}

} // namespace

ConflictScenario synth_conflict_scenario(std::uint64_t seed, const ConflictOptions& options) {
    if (!(options.overlap >= 0.0 && options.overlap <= 1.0)) throw ConfigError("overlap must lie in [0, 1]");
    if (options.features_per_task == 0 || options.hidden_per_task == 0 || options.train_examples == 0)
        throw ConfigError("scenario sizes must be positive");

    const std::size_t f = options.features_per_task;
    const std::size_t h = options.hidden_per_task;
    const auto shared_f = static_cast<std::size_t>(std::lround(options.overlap * static_cast<double>(f)));
    const auto shared_h = static_cast<std::size_t>(std::lround(options.overlap * static_cast<double>(h)));

    const Block feat_a{0, f - shared_f};
    const Block feat_s{f - shared_f, f};
    const Block feat_b{f, 2 * f - shared_f};
    const Block hid_a{0, h - shared_h};
    const Block hid_s{h - shared_h, h};
    const Block hid_b{h, 2 * h - shared_h};
    const std::size_t n_in = 2 * f - shared_f;
    const std::size_t n_hidden = 2 * h - shared_h;

    std::mt19937_64 gen(seed);

    AffineLayer hidden(n_in, n_hidden);
    auto connect = [&](Block rows, Block cols) {
        if (cols.end == cols.begin) return;
        const double scale = 1.0 / std::sqrt(static_cast<double>(cols.end - cols.begin));
        for (std::size_t j = rows.begin; j < rows.end; ++j)
            for (std::size_t k = cols.begin; k < cols.end; ++k) hidden.w(j, k) = scale * standard_normal(gen);
    };
    connect(hid_a, feat_a);
    connect(hid_s, feat_s);
    connect(hid_b, feat_b);

    AffineLayer readout(n_hidden, 2);
    const double readout_scale = 1.0 / std::sqrt(static_cast<double>(n_hidden));
    for (auto& w : readout.weight) w = readout_scale * standard_normal(gen);

    std::vector<double> coef_a(feat_a.end - feat_a.begin);
    std::vector<double> coef_b(feat_b.end - feat_b.begin);
    std::vector<double> coef_s(feat_s.end - feat_s.begin);
    for (auto& c : coef_a) c = standard_normal(gen);
    for (auto& c : coef_b) c = standard_normal(gen);
    for (auto& c : coef_s) c = standard_normal(gen);

    ConflictScenario s;
    s.base = ToyModel({std::move(hidden), std::move(readout)});
    s.shared_features = shared_f;
    s.shared_hidden = shared_h;
    s.task_a = make_task("task_a", options.train_examples, n_in, feat_a, feat_s, coef_a, coef_s, +1.0, gen);
    s.task_b = make_task("task_b", options.train_examples, n_in, feat_b, feat_s, coef_b, coef_s, -1.0, gen);
    s.test_a = make_task("task_a_test", options.test_examples, n_in, feat_a, feat_s, coef_a, coef_s, +1.0, gen);
    s.test_b = make_task("task_b_test", options.test_examples, n_in, feat_b, feat_s, coef_b, coef_s, -1.0, gen);
    return s;
}

} // namespace ledmerge::toy
