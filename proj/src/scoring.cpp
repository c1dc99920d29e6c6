#include "ledmerge/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/core.h>

#include "ledmerge/errors.hpp"
#include "ledmerge/random.hpp"

namespace ledmerge {

std::string_view score_method_name(ScoreMethod method) {
    switch (method) {
    case ScoreMethod::Snip: return "snip";
    case ScoreMethod::Wanda: return "wanda";
    case ScoreMethod::Magnitude: return "magnitude";
    case ScoreMethod::Random: return "random";
    case ScoreMethod::Imported: return "imported";
    }
    return "unknown";
}

ScoreMethod parse_score_method(std::string_view name) {
    for (auto m : {ScoreMethod::Snip, ScoreMethod::Wanda, ScoreMethod::Magnitude, ScoreMethod::Random,
                   ScoreMethod::Imported}) {
        if (score_method_name(m) == name) return m;
    }
    throw ConfigError(fmt::format("unknown score method '{}'", name));
}

namespace {

/// Score dtype for a weight dtype: keep the compute precision.
DType score_dtype(DType weights) { return computes_in_f64(weights) ? DType::F64 : DType::F32; }

std::vector<TensorMeta> score_layout(const std::vector<TensorMeta>& reference) {
    std::vector<TensorMeta> out;
    out.reserve(reference.size());
    for (const auto& m : reference) {
        TensorMeta s{m.name, m.shape, score_dtype(m.dtype), 0, 0};
        s.byte_length = s.numel() * dtype_width(s.dtype);
        out.push_back(std::move(s));
    }
    return out;
}

Tensor abs_values(Tensor t) {
    t.visit([](auto& v) {
        for (auto& x : v) x = std::abs(x);
    });
    return t.with_storage(t.is_f64() ? DType::F64 : DType::F32);
}

/// Lays toy parameter / gradient arrays out in checkpoint (sorted-name) order.
ImportanceMap toy_map(const toy::ToyModel& model, std::vector<std::vector<double>> weight_scores,
                      std::vector<std::vector<double>> bias_scores, ScoreMethod method, const std::string& dataset,
                      std::uint64_t count) {
    std::vector<std::pair<std::string, Tensor>> tensors;
    const auto& layers = model.layers();
    for (std::size_t k = 0; k < layers.size(); ++k) {
        tensors.emplace_back(toy::weight_name(k),
                             Tensor({layers[k].out_features, layers[k].in_features}, std::move(weight_scores[k])));
        tensors.emplace_back(toy::bias_name(k), Tensor({layers[k].out_features}, std::move(bias_scores[k])));
    }
    return ImportanceMap::from_checkpoint(Checkpoint::from_tensors(std::move(tensors)), method, dataset, count);
}

} // namespace

ImportanceMap::ImportanceMap(std::vector<TensorMeta> manifest, Producer producer, ScoreMethod method,
                             std::string dataset_name, std::uint64_t examples_count)
    : manifest_(std::move(manifest)), producer_(std::move(producer)), method_(method),
      dataset_name_(std::move(dataset_name)), examples_count_(examples_count) {
    std::sort(manifest_.begin(), manifest_.end(),
              [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
}

ImportanceMap ImportanceMap::from_checkpoint(Checkpoint scores, ScoreMethod method, std::string dataset_name,
                                             std::uint64_t examples_count) {
    auto layout = score_layout(scores.manifest());
    auto producer = [scores](const TensorMeta& meta) {
        Tensor t = scores.read(meta.name);
        return t.with_storage(t.is_f64() ? DType::F64 : DType::F32);
    };
    return ImportanceMap(std::move(layout), std::move(producer), method, std::move(dataset_name), examples_count);
}

const TensorMeta& ImportanceMap::meta(std::string_view name) const {
    auto it = std::lower_bound(manifest_.begin(), manifest_.end(), name,
                               [](const TensorMeta& m, std::string_view n) { return m.name < n; });
    if (it == manifest_.end() || it->name != name)
        throw CompatError(fmt::format("importance map has no tensor named '{}'", name));
    return *it;
}

Tensor ImportanceMap::scores(std::string_view name) const { return producer_(meta(name)); }

Checkpoint ImportanceMap::to_checkpoint() const {
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (const auto& m : manifest_) tensors.emplace_back(m.name, scores(m.name));
    Metadata meta{{"method", std::string(score_method_name(method_))},
                  {"dataset_name", dataset_name_},
                  {"examples_count", std::to_string(examples_count_)}};
    return Checkpoint::from_tensors(std::move(tensors), std::move(meta));
}

ImportanceMap snip_scores(const toy::ToyModel& model, const toy::LocationDataset& data, const SnipOptions& options) {
    data.validate(model.input_dim());
    std::size_t n = data.size();
    if (options.max_examples) {
        if (*options.max_examples == 0) throw EmptyDatasetError("SNIP sample cap of zero examples");
        n = std::min(n, *options.max_examples);
    }

    const auto& layers = model.layers();
    std::vector<std::vector<double>> wsum(layers.size());
    std::vector<std::vector<double>> bsum(layers.size());
    for (std::size_t k = 0; k < layers.size(); ++k) {
        wsum[k].assign(layers[k].weight.size(), 0.0);
        bsum[k].assign(layers[k].bias.size(), 0.0);
    }

    // Per-example |theta * grad|, accumulated in example order.
    for (std::size_t e = 0; e < n; ++e) {
        const auto grads = toy::backward(model, data.examples[e]);
        for (std::size_t k = 0; k < layers.size(); ++k) {
            for (std::size_t i = 0; i < wsum[k].size(); ++i) {
                const double g = grads[k].weight[i];
                if (!std::isfinite(g))
                    throw NumericsError(fmt::format("non-finite gradient in {} (example {})", toy::weight_name(k), e));
                wsum[k][i] += std::abs(layers[k].weight[i] * g);
            }
            for (std::size_t i = 0; i < bsum[k].size(); ++i) {
                const double g = grads[k].bias[i];
                if (!std::isfinite(g))
                    throw NumericsError(fmt::format("non-finite gradient in {} (example {})", toy::bias_name(k), e));
                bsum[k][i] += std::abs(layers[k].bias[i] * g);
            }
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t k = 0; k < layers.size(); ++k) {
        for (auto& v : wsum[k]) v *= inv_n;
        for (auto& v : bsum[k]) v *= inv_n;
    }
    return toy_map(model, std::move(wsum), std::move(bsum), ScoreMethod::Snip, data.name, n);
}

ImportanceMap wanda_scores(const toy::ToyModel& model, const toy::LocationDataset& data) {
    data.validate(model.input_dim());
    const auto& layers = model.layers();

    // Squared L2 norm of each layer-input feature over the dataset.
    std::vector<std::vector<double>> sq(layers.size());
    for (std::size_t k = 0; k < layers.size(); ++k) sq[k].assign(layers[k].in_features, 0.0);
    for (const auto& ex : data.examples) {
        std::vector<double> act = ex.x;
        for (std::size_t k = 0; k < layers.size(); ++k) {
            for (std::size_t i = 0; i < act.size(); ++i) sq[k][i] += act[i] * act[i];
            if (k + 1 == layers.size()) break;
            std::vector<double> next(layers[k].bias);
            for (std::size_t j = 0; j < layers[k].out_features; ++j) {
                for (std::size_t i = 0; i < layers[k].in_features; ++i) next[j] += layers[k].w(j, i) * act[i];
                next[j] = std::tanh(next[j]);
            }
            act = std::move(next);
        }
    }

    std::vector<std::vector<double>> wscore(layers.size());
    std::vector<std::vector<double>> bscore(layers.size());
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& l = layers[k];
        wscore[k].resize(l.weight.size());
        for (std::size_t j = 0; j < l.out_features; ++j)
            for (std::size_t i = 0; i < l.in_features; ++i)
                wscore[k][j * l.in_features + i] = std::abs(l.w(j, i)) * std::sqrt(sq[k][i]);
        bscore[k].resize(l.bias.size());
        for (std::size_t j = 0; j < l.out_features; ++j) bscore[k][j] = std::abs(l.bias[j]);
    }
    return toy_map(model, std::move(wscore), std::move(bscore), ScoreMethod::Wanda, data.name, data.size());
}

ImportanceMap magnitude_scores(const Checkpoint& params) {
    auto producer = [params](const TensorMeta& meta) { return abs_values(params.read(meta.name)); };
    return ImportanceMap(score_layout(params.manifest()), std::move(producer), ScoreMethod::Magnitude, "", 0);
}

ImportanceMap random_scores(const Checkpoint& manifest, std::uint64_t seed) {
    auto layout = score_layout(manifest.manifest());
    std::vector<std::string> order;
    for (const auto& m : layout) order.push_back(m.name);
    auto producer = [seed, order = std::move(order)](const TensorMeta& meta) {
        const auto pos = static_cast<std::uint64_t>(std::find(order.begin(), order.end(), meta.name) - order.begin());
        std::mt19937_64 gen(derive_seed(seed, pos));
        const auto n = meta.numel();
        if (meta.dtype == DType::F64) {
            std::vector<double> v(n);
            for (auto& x : v) x = uniform01(gen);
            return Tensor(meta.shape, std::move(v));
        }
        std::vector<float> v(n);
        // 24 random bits: exactly representable, strictly below 1
        for (auto& x : v) x = static_cast<float>(gen() >> 40) * 0x1.0p-24f;
        return Tensor(meta.shape, std::move(v), DType::F32);
    };
    return ImportanceMap(std::move(layout), std::move(producer), ScoreMethod::Random, "", 0);
}

ImportanceMap import_scores(const std::filesystem::path& path, const std::vector<TensorMeta>& reference) {
    Checkpoint stored = Checkpoint::load(path);
    validate_aligned(reference, stored.manifest());

    std::uint64_t negatives = 0;
    for (const auto& m : stored.manifest()) {
        const Tensor t = stored.read(m.name);
        t.visit([&](const auto& v) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (std::isnan(v[i])) throw NumericsError(fmt::format("NaN score in '{}' at index {}", m.name, i));
                if (std::isinf(v[i])) throw NumericsError(fmt::format("infinite score in '{}' at index {}", m.name, i));
                if (v[i] < 0) ++negatives;
            }
        });
    }

    const auto& md = stored.metadata();
    std::string dataset;
    std::uint64_t count = 0;
    if (auto it = md.find("dataset_name"); it != md.end()) dataset = it->second;
    if (auto it = md.find("examples_count"); it != md.end()) {
        try {
            count = std::stoull(it->second);
        } catch (const std::exception&) {
            throw FormatError(fmt::format("'{}': examples_count '{}' is not an integer", path.string(), it->second));
        }
    }

    auto producer = [stored](const TensorMeta& meta) { return abs_values(stored.read(meta.name)); };
    ImportanceMap map(score_layout(stored.manifest()), std::move(producer), ScoreMethod::Imported, dataset, count);
    map.set_negatives_normalized(negatives);
    return map;
}

ImportanceMap import_scores(const std::filesystem::path& path, const Checkpoint& reference) {
    return import_scores(path, reference.manifest());
}

void export_scores(const ImportanceMap& map, const std::filesystem::path& path) {
    Metadata meta{{"method", std::string(score_method_name(map.method()))},
                  {"dataset_name", map.dataset_name()},
                  {"examples_count", std::to_string(map.examples_count())}};
    CheckpointWriter writer(path, map.manifest(), std::move(meta));
    for (const auto& m : map.manifest()) writer.write(m.name, map.scores(m.name));
    writer.finish();
}

void check_scores(const ImportanceMap& map) {
    for (const auto& m : map.manifest()) {
        const Tensor t = map.scores(m.name);
        t.visit([&](const auto& v) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (!std::isfinite(v[i]) || v[i] < 0)
                    throw NumericsError(fmt::format("score {} of '{}' is {}", i, m.name, static_cast<double>(v[i])));
            }
        });
    }
}

} // namespace ledmerge
