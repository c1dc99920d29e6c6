#include "ledmerge/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <memory>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "ledmerge/errors.hpp"
#include "ledmerge/random.hpp"
#include "ledmerge/scoring.hpp"
#include "ledmerge/toygrad.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ledmerge::cli {

namespace {

const std::set<std::string> kTopKeys = {
    "schema_version", "base",          "tasks",          "method",         "location",        "election",
    "granularity",    "exclude",       "disjoint",       "ratio",          "lambda",          "trim_keep_ratio",
    "top_mask_ratio", "keep_ratio",    "max_examples",   "seed",           "out_dir",         "map_a",
    "map_b",          "jaccard_ratio", "layer_kinds",    "csv",            "model",           "datasets",
    "epochs",         "lr",            "output",         "overlap",        "features_per_task", "hidden_per_task",
    "train_examples", "test_examples", "grid"};
const std::set<std::string> kTaskKeys = {"name",        "fine",        "dataset", "eval_dataset",
                                         "fine_scores", "base_scores", "ratio",   "lambda"};
const std::set<std::string> kTopPaths = {"base", "out_dir", "map_a", "map_b", "model", "output"};
const std::set<std::string> kTaskPaths = {"fine", "dataset", "eval_dataset", "fine_scores", "base_scores"};

template <class T>
T get_as(const json& j, const std::string& key) {
    try {
        return j.get<T>();
    } catch (const json::exception&) {
        throw ConfigError(fmt::format("config key '{}' has the wrong type", key));
    }
}

template <class T>
void read(const json& obj, const std::string& key, T& out) {
    if (auto it = obj.find(key); it != obj.end() && !it->is_null()) out = get_as<T>(*it, key);
}

void read_path(const json& obj, const std::string& key, fs::path& out) {
    std::string s;
    read(obj, key, s);
    if (!s.empty()) out = s;
}

void check_keys(const json& obj, const std::set<std::string>& allowed, std::string_view where) {
    if (!obj.is_object()) throw ConfigError(fmt::format("{} must be a JSON object", where));
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key)) throw ConfigError(fmt::format("unknown {} key '{}'", where, key));
}

std::string resolve(const std::string& p, const fs::path& dir) {
    const fs::path path(p);
    if (path.is_absolute() || dir.empty()) return path.string();
    return (dir / path).lexically_normal().string();
}

/// Rewrites relative path values so they no longer depend on the config location.
json absolutize(json doc, const fs::path& dir) {
    if (!doc.is_object()) return doc;
    for (const auto& key : kTopPaths)
        if (doc.contains(key) && doc[key].is_string()) doc[key] = resolve(doc[key].get<std::string>(), dir);
    if (doc.contains("datasets") && doc["datasets"].is_array())
        for (auto& d : doc["datasets"])
            if (d.is_string()) d = resolve(d.get<std::string>(), dir);
    if (doc.contains("tasks") && doc["tasks"].is_array()) {
        for (auto& t : doc["tasks"]) {
            if (!t.is_object()) continue;
            for (const auto& key : kTaskPaths)
                if (t.contains(key) && t[key].is_string()) t[key] = resolve(t[key].get<std::string>(), dir);
        }
    }
    return doc;
}

void require_path(const fs::path& p, std::string_view what) {
    if (p.empty()) throw ConfigError(fmt::format("{} path is required", what));
    std::error_code ec;
    if (!fs::exists(p, ec)) throw ConfigError(fmt::format("{} path '{}' does not exist", what, p.string()));
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    f << text;
    f.close();
    if (!f) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

toy::LocationDataset load_task_dataset(const fs::path& path, std::string_view what) {
    require_path(path, what);
    return toy::load_dataset(path);
}

} // namespace

MergeConfig RunConfig::merge_config() const {
    MergeConfig mc;
    for (const auto& t : tasks) mc.tasks.push_back({t.name, t.ratio.value_or(ratio), t.lambda.value_or(lambda)});
    mc.election = election;
    mc.location = location;
    mc.granularity = granularity;
    mc.exclusion_patterns = exclude;
    mc.disjoint = disjoint;
    mc.seed = seed;
    return mc;
}

BaselineConfig RunConfig::baseline_config() const {
    BaselineConfig bc;
    bc.method = parse_baseline_method(method);
    bc.lambda = lambda;
    bc.trim_keep_ratio = trim_keep_ratio;
    bc.top_mask_ratio = top_mask_ratio;
    bc.keep_ratio = keep_ratio;
    return bc;
}

RunConfig parse_config(const json& input, const fs::path& base_dir) {
    check_keys(input, kTopKeys, "config");
    if (!input.contains("schema_version"))
        throw ConfigError(fmt::format("config lacks schema_version (expected {})", kSchemaVersion));
    if (get_as<int>(input.at("schema_version"), "schema_version") != kSchemaVersion)
        throw ConfigError(fmt::format("unsupported schema_version {} (expected {})", input.at("schema_version").dump(),
                                      kSchemaVersion));
    const json doc = absolutize(input, base_dir);

    RunConfig c;
    read_path(doc, "base", c.base);
    if (auto it = doc.find("tasks"); it != doc.end()) {
        if (!it->is_array()) throw ConfigError("config key 'tasks' must be an array");
        for (std::size_t i = 0; i < it->size(); ++i) {
            const json& t = (*it)[i];
            check_keys(t, kTaskKeys, "task");
            TaskInput task;
            task.name = fmt::format("task{}", i);
            read(t, "name", task.name);
            read_path(t, "fine", task.fine);
            read_path(t, "dataset", task.dataset);
            read_path(t, "eval_dataset", task.eval_dataset);
            read_path(t, "fine_scores", task.fine_scores);
            read_path(t, "base_scores", task.base_scores);
            if (t.contains("ratio")) task.ratio = get_as<double>(t.at("ratio"), "ratio");
            if (t.contains("lambda")) task.lambda = get_as<double>(t.at("lambda"), "lambda");
            c.tasks.push_back(std::move(task));
        }
        std::set<std::string> names;
        for (const auto& t : c.tasks)
            if (!names.insert(t.name).second) throw ConfigError(fmt::format("duplicate task name '{}'", t.name));
    }
    read(doc, "method", c.method);
    if (c.method != "led") parse_baseline_method(c.method);
    std::string s;
    if (read(doc, "location", s), !s.empty()) c.location = parse_score_method(s);
    s.clear();
    if (read(doc, "election", s), !s.empty()) c.election = parse_election_mode(s);
    s.clear();
    if (read(doc, "granularity", s), !s.empty()) c.granularity = parse_granularity(s);
    read(doc, "exclude", c.exclude);
    read(doc, "disjoint", c.disjoint);
    read(doc, "ratio", c.ratio);
    read(doc, "lambda", c.lambda);
    read(doc, "trim_keep_ratio", c.trim_keep_ratio);
    read(doc, "top_mask_ratio", c.top_mask_ratio);
    read(doc, "keep_ratio", c.keep_ratio);
    if (doc.contains("max_examples") && !doc.at("max_examples").is_null())
        c.max_examples = get_as<std::size_t>(doc.at("max_examples"), "max_examples");
    read(doc, "seed", c.seed);
    read_path(doc, "out_dir", c.out_dir);
    read_path(doc, "map_a", c.map_a);
    read_path(doc, "map_b", c.map_b);
    read(doc, "jaccard_ratio", c.jaccard_ratio);
    if (auto it = doc.find("layer_kinds"); it != doc.end()) {
        if (!it->is_array()) throw ConfigError("config key 'layer_kinds' must be an array");
        for (const auto& rule : *it) {
            check_keys(rule, {"kind", "pattern"}, "layer_kinds entry");
            c.layer_kinds.push_back(
                {get_as<std::string>(rule.value("kind", json()), "kind"),
                 get_as<std::string>(rule.value("pattern", json()), "pattern")});
        }
    }
    read(doc, "csv", c.csv);
    read_path(doc, "model", c.model);
    std::vector<std::string> datasets;
    read(doc, "datasets", datasets);
    for (auto& d : datasets) c.datasets.emplace_back(d);
    read(doc, "epochs", c.epochs);
    read(doc, "lr", c.lr);
    read_path(doc, "output", c.output);
    read(doc, "overlap", c.overlap);
    read(doc, "features_per_task", c.features_per_task);
    read(doc, "hidden_per_task", c.hidden_per_task);
    read(doc, "train_examples", c.train_examples);
    read(doc, "test_examples", c.test_examples);
    if (auto it = doc.find("grid"); it != doc.end()) {
        if (!it->is_object()) throw ConfigError("config key 'grid' must be an object of value lists");
        c.grid = *it;
    }
    return c;
}

RunConfig load_config(const fs::path& path) {
    require_path(path, "config");
    std::ifstream f(path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
    }
    return parse_config(doc, path.parent_path());
}

std::vector<TaskScores> build_scores(const RunConfig& config, const Checkpoint& base,
                                     const std::vector<Checkpoint>& fines) {
    std::vector<TaskScores> out;
    for (std::size_t i = 0; i < config.tasks.size(); ++i) {
        const auto& task = config.tasks[i];
        if (!task.fine_scores.empty() || !task.base_scores.empty()) {
            require_path(task.fine_scores, fmt::format("fine_scores of task '{}'", task.name));
            require_path(task.base_scores, fmt::format("base_scores of task '{}'", task.name));
            out.push_back({import_scores(task.fine_scores, base), import_scores(task.base_scores, base)});
            continue;
        }
        switch (config.location) {
        case ScoreMethod::Magnitude: out.push_back({magnitude_scores(fines[i]), magnitude_scores(base)}); break;
        case ScoreMethod::Random:
            out.push_back({random_scores(fines[i], derive_seed(config.seed, 2 * i)),
                           random_scores(base, derive_seed(config.seed, 2 * i + 1))});
            break;
        case ScoreMethod::Snip:
        case ScoreMethod::Wanda: {
            const auto data = load_task_dataset(task.dataset, fmt::format("dataset of task '{}'", task.name));
            const auto fine_model = toy::ToyModel::from_checkpoint(fines[i]);
            const auto base_model = toy::ToyModel::from_checkpoint(base);
            if (config.location == ScoreMethod::Snip) {
                SnipOptions opt{config.max_examples};
                out.push_back({snip_scores(fine_model, data, opt), snip_scores(base_model, data, opt)});
            } else {
                out.push_back({wanda_scores(fine_model, data), wanda_scores(base_model, data)});
            }
            break;
        }
        case ScoreMethod::Imported:
            throw ConfigError(fmt::format("task '{}' uses imported scores but gives no score files", task.name));
        }
    }
    return out;
}

namespace {

struct LoadedModels {
    Checkpoint base;
    std::vector<Checkpoint> fines;
    std::vector<std::string> names;
};

LoadedModels load_models(const RunConfig& config) {
    require_path(config.base, "base model");
    if (config.tasks.empty()) throw ConfigError("at least one task is required");
    LoadedModels m;
    for (const auto& t : config.tasks) require_path(t.fine, fmt::format("fine-tuned model of task '{}'", t.name));
    m.base = Checkpoint::load(config.base);
    for (const auto& t : config.tasks) {
        m.fines.push_back(Checkpoint::load(t.fine));
        m.names.push_back(t.name);
    }
    return m;
}

} // namespace

MergeReport run_merge(const RunConfig& config, const ChunkSink& sink) {
    LoadedModels m = load_models(config);
    if (config.method != "led")
        return baseline_merge_into(config.baseline_config(), m.base, m.fines, m.names,
                                   [&sink](const TensorMeta& meta, Tensor tensor) { sink(meta, 0, std::move(tensor)); });

    MergeConfig mc = config.merge_config();
    mc.validate();
    const auto scores = build_scores(config, m.base, m.fines);
    LedStages stages = led_stages(mc, m.base.manifest(), scores, false);
    std::vector<TaskVector> taus;
    std::vector<double> lambdas;
    for (std::size_t i = 0; i < m.fines.size(); ++i) {
        taus.push_back(TaskVector::between(m.fines[i], m.base));
        lambdas.push_back(mc.tasks[i].lambda);
    }
    merge_chunks(m.base, taus, stages.masks, lambdas, sink);
    json sources = json::array();
    for (const auto& s : scores) sources.push_back(std::string(score_method_name(s.fine.method())));
    stages.report.parameters["score_sources"] = std::move(sources);
    return std::move(stages.report);
}

std::size_t worker_threads() {
    if (const char* env = std::getenv("LEDMERGE_THREADS"); env && *env) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (*end != '\0' || n < 1) throw ConfigError(fmt::format("LEDMERGE_THREADS='{}' is not a positive integer", env));
        return static_cast<std::size_t>(n);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

const std::set<std::string> kGridScalarAxes = {"ratio",          "lambda",     "trim_keep_ratio",
                                               "top_mask_ratio", "keep_ratio", "election",
                                               "granularity",    "location",   "disjoint",
                                               "method"};

/// Applies one axis value to a raw config document.
void apply_axis(json& doc, const std::string& axis, const json& value) {
    const auto dot = axis.find('.');
    if (dot != std::string::npos) {
        const std::string field = axis.substr(0, dot);
        const std::string task = axis.substr(dot + 1);
        if (field != "ratio" && field != "lambda") throw ConfigError(fmt::format("unknown grid axis '{}'", axis));
        for (auto& t : doc["tasks"]) {
            if (t.value("name", std::string()) == task) {
                t[field] = value;
                return;
            }
        }
        throw ConfigError(fmt::format("grid axis '{}' names no configured task", axis));
    }
    if (!kGridScalarAxes.count(axis)) throw ConfigError(fmt::format("unknown grid axis '{}'", axis));
    doc[axis] = value;
    if ((axis == "ratio" || axis == "lambda") && doc.contains("tasks"))
        for (auto& t : doc["tasks"]) t[axis] = value;
}

double evaluate(const toy::ToyModel& model, const fs::path& path) {
    return toy::eval_accuracy(model, toy::load_dataset(path));
}

} // namespace

std::vector<GridRow> run_grid_cells(const RunConfig& config, const json& raw, std::size_t threads) {
    if (config.grid.empty()) throw ConfigError("grid needs at least one axis");
    std::vector<std::pair<std::string, std::vector<json>>> axes;
    for (const auto& [name, values] : config.grid.items()) {
        if (!values.is_array() || values.empty())
            throw ConfigError(fmt::format("grid axis '{}' needs a non-empty value list", name));
        axes.emplace_back(name, std::vector<json>(values.begin(), values.end()));
    }
    json doc = raw;
    doc.erase("grid");
    // Task names must exist before axes address them; parse once up front.
    for (const auto& t : config.tasks) {
        const auto& eval = t.eval_dataset.empty() ? t.dataset : t.eval_dataset;
        require_path(eval, fmt::format("evaluation dataset of task '{}'", t.name));
    }

    std::size_t cells = 1;
    for (const auto& a : axes) cells *= a.second.size();
    std::vector<GridRow> rows(cells);
    for (std::size_t c = 0; c < cells; ++c) {
        std::size_t rest = c;
        json axis_values = json::object();
        for (auto a = axes.rbegin(); a != axes.rend(); ++a) {
            axis_values[a->first] = a->second[rest % a->second.size()];
            rest /= a->second.size();
        }
        rows[c].config = std::move(axis_values);
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t c = next++; c < cells; c = next++) {
            GridRow& row = rows[c];
            try {
                json cell = doc;
                for (const auto& [axis, value] : row.config.items()) apply_axis(cell, axis, value);
                const RunConfig cc = parse_config(cell);
                CheckpointCollector collector;
                run_merge(cc, assemble_tensors(collector.sink()));
                const auto model = toy::ToyModel::from_checkpoint(collector.finish());
                for (const auto& t : cc.tasks)
                    row.metrics["accuracy." + t.name] =
                        evaluate(model, t.eval_dataset.empty() ? t.dataset : t.eval_dataset);
            } catch (const std::exception& e) {
                row.metrics.clear();
                row.error = e.what();
            }
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(threads, cells));
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return rows;
}

namespace {

/// Registers flags that patch the config document when given.
class Overrides {
public:
    explicit Overrides(CLI::App* app) : app_(app) {}

    template <class T>
    void value(const std::string& flag, const std::string& key, const std::string& help) {
        auto v = std::make_shared<T>();
        auto* opt = app_->add_option(flag, *v, help);
        patches_.push_back([opt, v, key](json& doc) {
            if (opt->count()) doc[key] = *v;
        });
    }

    void path(const std::string& flag, const std::string& key, const std::string& help) {
        auto v = std::make_shared<std::string>();
        auto* opt = app_->add_option(flag, *v, help);
        patches_.push_back([opt, v, key](json& doc) {
            if (opt->count()) doc[key] = fs::absolute(*v).lexically_normal().string();
        });
    }

    void paths(const std::string& flag, const std::string& key, const std::string& help) {
        auto v = std::make_shared<std::vector<std::string>>();
        auto* opt = app_->add_option(flag, *v, help);
        patches_.push_back([opt, v, key](json& doc) {
            if (!opt->count()) return;
            json list = json::array();
            for (const auto& p : *v) list.push_back(fs::absolute(p).lexically_normal().string());
            doc[key] = std::move(list);
        });
    }

    void flag(const std::string& flag, const std::string& key, bool set_to, const std::string& help) {
        auto* opt = app_->add_flag(flag, help);
        patches_.push_back([opt, key, set_to](json& doc) {
            if (opt->count()) doc[key] = set_to;
        });
    }

    void tasks() {
        auto names = std::make_shared<std::vector<std::string>>();
        auto fines = std::make_shared<std::vector<std::string>>();
        auto data = std::make_shared<std::vector<std::string>>();
        auto evals = std::make_shared<std::vector<std::string>>();
        auto fine_scores = std::make_shared<std::vector<std::string>>();
        auto base_scores = std::make_shared<std::vector<std::string>>();
        auto ratios = std::make_shared<std::vector<double>>();
        auto lambdas = std::make_shared<std::vector<double>>();
        app_->add_option("--name", *names, "Task name (repeat per task)");
        app_->add_option("--fine", *fines, "Fine-tuned checkpoint (repeat per task)");
        app_->add_option("--dataset", *data, "Location dataset, JSONL (repeat per task)");
        app_->add_option("--eval-dataset", *evals, "Evaluation dataset, JSONL (repeat per task)");
        app_->add_option("--fine-scores", *fine_scores, "Imported fine-model score map (repeat per task)");
        app_->add_option("--base-scores", *base_scores, "Imported base-model score map (repeat per task)");
        app_->add_option("--ratio", *ratios, "Mask ratio: one value for all tasks or one per task");
        app_->add_option("--lambda", *lambdas, "Scaling factor: one value for all tasks or one per task");
        patches_.push_back([=](json& doc) {
            const std::size_t k = std::max({fines->size(), fine_scores->size(), data->size()});
            if (k > 0) {
                auto column = [&](const std::vector<std::string>& v, const char* what) {
                    if (!v.empty() && v.size() != k)
                        throw ConfigError(fmt::format("{} given {} times for {} tasks", what, v.size(), k));
                };
                column(*names, "--name");
                column(*fines, "--fine");
                column(*data, "--dataset");
                column(*evals, "--eval-dataset");
                column(*fine_scores, "--fine-scores");
                column(*base_scores, "--base-scores");
                json tasks = json::array();
                auto abs = [](const std::string& p) { return fs::absolute(p).lexically_normal().string(); };
                for (std::size_t i = 0; i < k; ++i) {
                    json t = {{"name", names->empty() ? fmt::format("task{}", i) : (*names)[i]}};
                    if (!fines->empty()) t["fine"] = abs((*fines)[i]);
                    if (!data->empty()) t["dataset"] = abs((*data)[i]);
                    if (!evals->empty()) t["eval_dataset"] = abs((*evals)[i]);
                    if (!fine_scores->empty()) t["fine_scores"] = abs((*fine_scores)[i]);
                    if (!base_scores->empty()) t["base_scores"] = abs((*base_scores)[i]);
                    tasks.push_back(std::move(t));
                }
                doc["tasks"] = std::move(tasks);
            } else if (!names->empty()) {
                throw ConfigError("--name needs --fine, --dataset or --fine-scores");
            }
            auto spread = [&](const std::vector<double>& v, const char* key) {
                if (v.empty()) return;
                json& tasks = doc["tasks"];
                if (!tasks.is_array()) tasks = json::array();
                if (v.size() == 1) {
                    doc[key] = v[0];
                    for (auto& t : tasks) t[key] = v[0];
                } else if (v.size() == tasks.size()) {
                    for (std::size_t i = 0; i < v.size(); ++i) tasks[i][key] = v[i];
                } else {
                    throw ConfigError(fmt::format("--{} given {} values for {} tasks", key, v.size(), tasks.size()));
                }
            };
            spread(*ratios, "ratio");
            spread(*lambdas, "lambda");
            if (doc["tasks"].empty()) doc.erase("tasks");
        });
    }

    void apply(json& doc) const {
        for (const auto& p : patches_) p(doc);
    }

private:
    CLI::App* app_;
    std::vector<std::function<void(json&)>> patches_;
};

struct Command {
    CLI::App* app = nullptr;
    std::unique_ptr<Overrides> overrides;
    std::shared_ptr<std::string> config_path = std::make_shared<std::string>();
};

Command add_command(CLI::App& root, const std::string& name, const std::string& help) {
    Command c;
    c.app = root.add_subcommand(name, help);
    c.app->add_option("--config", *c.config_path, "JSON run config; flags override its values");
    c.overrides = std::make_unique<Overrides>(c.app);
    c.overrides->path("--out-dir", "out_dir", "Output directory");
    c.overrides->value<std::uint64_t>("--seed", "seed", "Seed (default 0)");
    return c;
}

/// Config file (or an empty document) with flag overrides applied.
std::pair<RunConfig, json> resolve_config(const Command& c) {
    json doc = {{"schema_version", kSchemaVersion}};
    fs::path dir;
    if (!c.config_path->empty()) {
        const fs::path path(*c.config_path);
        require_path(path, "config");
        std::ifstream f(path);
        try {
            doc = json::parse(f);
        } catch (const json::parse_error& e) {
            throw ConfigError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
        }
        if (!doc.is_object()) throw ConfigError("config must be a JSON object");
        dir = fs::absolute(path).parent_path();
    }
    doc = absolutize(std::move(doc), dir);
    c.overrides->apply(doc);
    RunConfig config = parse_config(doc);
    return {std::move(config), std::move(doc)};
}

void add_merge_flags(Overrides& o) {
    o.path("--base", "base", "Base checkpoint");
    o.tasks();
    o.value<std::string>("--location", "location", "snip | wanda | magnitude | random");
    o.value<std::string>("--election", "election", "both | base_only | fine_only (or 11 | 10 | 01)");
    o.value<std::string>("--granularity", "granularity", "per_tensor | global");
    o.value<std::vector<std::string>>("--exclude", "exclude", "Tensor-name glob kept at base values");
    o.flag("--no-disjoint", "disjoint", false, "Skip the disjoint stage");
    o.value<std::size_t>("--max-examples", "max_examples", "Cap on location examples for SNIP");
}

int cmd_score(const RunConfig& config, std::ostream& out) {
    require_path(config.base, "base model");
    if (config.tasks.empty()) throw ConfigError("score needs at least one task");
    const Checkpoint base = Checkpoint::load(config.base);
    std::vector<Checkpoint> fines;
    for (const auto& t : config.tasks) {
        require_path(t.fine, fmt::format("fine-tuned model of task '{}'", t.name));
        fines.push_back(Checkpoint::load(t.fine));
        validate_compat(base, fines.back());
    }
    RunConfig scoring = config;
    for (auto& t : scoring.tasks) t.fine_scores.clear(), t.base_scores.clear();
    const auto maps = build_scores(scoring, base, fines);
    make_dir(config.out_dir);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const auto& name = config.tasks[i].name;
        const fs::path fine_path = config.out_dir / (name + ".fine.scores.safetensors");
        const fs::path base_path = config.out_dir / (name + ".base.scores.safetensors");
        export_scores(maps[i].fine, fine_path);
        export_scores(maps[i].base, base_path);
        out << fmt::format("wrote {}\nwrote {}\n", fine_path.string(), base_path.string());
    }
    return kExitOk;
}

int cmd_merge(const RunConfig& config, std::ostream& out) {
    require_path(config.base, "base model");
    const Checkpoint layout = Checkpoint::load(config.base);
    make_dir(config.out_dir);
    const fs::path merged = config.out_dir / "merged.safetensors";
    CheckpointWriter writer(merged, layout.manifest(), layout.metadata());
    const MergeReport report = run_merge(config, [&writer](const TensorMeta& meta, std::uint64_t, Tensor chunk) {
        writer.write_chunk(meta.name, chunk);
    });
    writer.finish();
    write_text(config.out_dir / "report.json", dump(report.to_json()));
    out << fmt::format("wrote {}\nwrote {}\n", merged.string(), (config.out_dir / "report.json").string());
    return kExitOk;
}

int cmd_analyze(const RunConfig& config, std::ostream& out) {
    require_path(config.map_a, "map_a");
    require_path(config.map_b, "map_b");
    const auto reference = Checkpoint::load(config.map_a).manifest();
    const ImportanceMap a = import_scores(config.map_a, reference);
    const ImportanceMap b = import_scores(config.map_b, reference);
    const LayerKindTagger tagger = config.layer_kinds.empty() ? LayerKindTagger() : LayerKindTagger(config.layer_kinds);
    const JaccardReport report = layerwise_jaccard(a, b, config.jaccard_ratio, tagger);
    make_dir(config.out_dir);
    write_text(config.out_dir / "jaccard.json", dump(report.to_json()));
    write_text(config.out_dir / "jaccard.txt", report.to_text());
    if (config.csv) write_text(config.out_dir / "jaccard.csv", report.to_csv());
    out << report.to_text();
    return kExitOk;
}

int cmd_toy_train(const RunConfig& config, std::ostream& out) {
    require_path(config.model, "model");
    if (config.datasets.size() != 1) throw ConfigError("toy-train needs exactly one dataset");
    const auto data = load_task_dataset(config.datasets[0], "dataset");
    if (config.epochs < 0) throw ConfigError("epochs must be non-negative");
    if (!(config.lr > 0.0)) throw ConfigError("lr must be positive");
    const auto model = toy::ToyModel::from_checkpoint(Checkpoint::load(config.model));
    const auto trained = toy::train_toy(model, data, config.epochs, config.lr, config.seed);
    fs::path path = config.output;
    if (path.empty()) {
        make_dir(config.out_dir);
        path = config.out_dir / "model.safetensors";
    }
    save_checkpoint(trained.to_checkpoint(), path);
    out << fmt::format("wrote {} (train accuracy {:.4f})\n", path.string(), toy::eval_accuracy(trained, data));
    return kExitOk;
}

int cmd_toy_eval(const RunConfig& config, std::ostream& out) {
    require_path(config.model, "model");
    if (config.datasets.empty()) throw ConfigError("toy-eval needs at least one dataset");
    const auto model = toy::ToyModel::from_checkpoint(Checkpoint::load(config.model));
    json result = json::object();
    for (const auto& p : config.datasets) {
        const auto data = load_task_dataset(p, "dataset");
        result[data.name] = toy::eval_accuracy(model, data);
    }
    make_dir(config.out_dir);
    write_text(config.out_dir / "eval.json", dump(result));
    out << dump(result);
    return kExitOk;
}

int cmd_toy_scenario(const RunConfig& config, std::ostream& out) {
    toy::ConflictOptions opt;
    opt.overlap = config.overlap;
    opt.features_per_task = config.features_per_task;
    opt.hidden_per_task = config.hidden_per_task;
    opt.train_examples = config.train_examples;
    opt.test_examples = config.test_examples;
    const auto s = toy::synth_conflict_scenario(config.seed, opt);
    make_dir(config.out_dir);
    const fs::path& dir = config.out_dir;
    save_checkpoint(s.base.to_checkpoint(), dir / "base.safetensors");
    toy::save_dataset(s.task_a, dir / "task_a.jsonl");
    toy::save_dataset(s.task_b, dir / "task_b.jsonl");
    toy::save_dataset(s.test_a, dir / "task_a_test.jsonl");
    toy::save_dataset(s.test_b, dir / "task_b_test.jsonl");
    json tasks = json::array();
    for (const auto& [name, data] : {std::pair{"task_a", &s.task_a}, std::pair{"task_b", &s.task_b}}) {
        json t = {{"name", name},
                  {"dataset", fmt::format("{}.jsonl", name)},
                  {"eval_dataset", fmt::format("{}_test.jsonl", name)}};
        if (config.epochs > 0) {
            const auto fine = toy::train_toy(s.base, *data, config.epochs, config.lr, config.seed);
            save_checkpoint(fine.to_checkpoint(), dir / fmt::format("{}.safetensors", name));
            t["fine"] = fmt::format("{}.safetensors", name);
        }
        tasks.push_back(std::move(t));
    }
    const json scenario = {{"schema_version", kSchemaVersion}, {"base", "base.safetensors"}, {"tasks", tasks}};
    write_text(dir / "config.json", dump(scenario));
    out << fmt::format("wrote scenario (seed {}, overlap {}) to {}\n", config.seed, config.overlap, dir.string());
    return kExitOk;
}

int cmd_grid(const RunConfig& config, const json& raw, std::ostream& out) {
    const GridReport report = grid_report(run_grid_cells(config, raw, worker_threads()));
    make_dir(config.out_dir);
    write_text(config.out_dir / "grid.json", dump(report.to_json()));
    out << report.to_text();
    return kExitOk;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"ledmerge: model merging over safetensors checkpoints", "ledmerge"};
    app.require_subcommand(1);

    Command score = add_command(app, "score", "Compute importance maps for fine and base models");
    add_merge_flags(*score.overrides);

    Command merge = add_command(app, "merge", "Merge fine-tuned checkpoints into a base");
    add_merge_flags(*merge.overrides);
    merge.overrides->value<std::string>("--method", "method",
                                        "led | task_arithmetic | ties | breadcrumbs | uniform_average");
    merge.overrides->value<double>("--trim-keep-ratio", "trim_keep_ratio", "ties: kept fraction per tensor");
    merge.overrides->value<double>("--top-mask-ratio", "top_mask_ratio", "breadcrumbs: dropped top fraction");
    merge.overrides->value<double>("--keep-ratio", "keep_ratio", "breadcrumbs: kept fraction before top masking");

    Command analyze = add_command(app, "analyze", "Layer-wise Jaccard overlap of two score maps");
    analyze.overrides->path("--map-a", "map_a", "First score map");
    analyze.overrides->path("--map-b", "map_b", "Second score map");
    analyze.overrides->value<double>("--ratio", "jaccard_ratio", "Top fraction per tensor (default 0.2)");
    analyze.overrides->flag("--csv", "csv", true, "Also write jaccard.csv");

    Command train = add_command(app, "toy-train", "Train a toy model on a dataset");
    train.overrides->path("--model", "model", "Initial toy model checkpoint");
    train.overrides->paths("--dataset", "datasets", "Training dataset (JSONL)");
    train.overrides->value<int>("--epochs", "epochs", "Gradient steps");
    train.overrides->value<double>("--lr", "lr", "Learning rate");
    train.overrides->path("--output", "output", "Output checkpoint (default <out-dir>/model.safetensors)");

    Command eval = add_command(app, "toy-eval", "Accuracy of a toy model on datasets");
    eval.overrides->path("--model", "model", "Toy model checkpoint");
    eval.overrides->paths("--dataset", "datasets", "Dataset (JSONL), repeatable");

    Command scenario = add_command(app, "toy-scenario", "Write a two-task conflict scenario");
    scenario.overrides->value<double>("--overlap", "overlap", "Shared fraction of features");
    scenario.overrides->value<std::size_t>("--features", "features_per_task", "Features per task");
    scenario.overrides->value<std::size_t>("--hidden", "hidden_per_task", "Hidden units per task");
    scenario.overrides->value<std::size_t>("--train-examples", "train_examples", "Training examples per task");
    scenario.overrides->value<std::size_t>("--test-examples", "test_examples", "Test examples per task");
    scenario.overrides->value<int>("--epochs", "epochs", "Also train specialists for this many steps (0: skip)");
    scenario.overrides->value<double>("--lr", "lr", "Specialist learning rate");

    Command grid = add_command(app, "grid", "Sweep merge settings on toy fixtures");
    add_merge_flags(*grid.overrides);
    grid.overrides->value<std::string>("--method", "method", "Merge method");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        std::ostringstream o, r;
        const int code = app.exit(e, o, r);
        out << o.str();
        err << r.str();
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        auto dispatch = [&](const Command& c, auto&& fn) {
            auto [config, raw] = resolve_config(c);
            return fn(config, raw);
        };
        if (score.app->parsed()) return dispatch(score, [&](auto& c, auto&) { return cmd_score(c, out); });
        if (merge.app->parsed()) return dispatch(merge, [&](auto& c, auto&) { return cmd_merge(c, out); });
        if (analyze.app->parsed()) return dispatch(analyze, [&](auto& c, auto&) { return cmd_analyze(c, out); });
        if (train.app->parsed()) return dispatch(train, [&](auto& c, auto&) { return cmd_toy_train(c, out); });
        if (eval.app->parsed()) return dispatch(eval, [&](auto& c, auto&) { return cmd_toy_eval(c, out); });
        if (scenario.app->parsed())
            return dispatch(scenario, [&](auto& c, auto&) { return cmd_toy_scenario(c, out); });
        if (grid.app->parsed()) return dispatch(grid, [&](auto& c, auto& raw) { return cmd_grid(c, raw, out); });
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitInternal;
}

} // namespace ledmerge::cli
