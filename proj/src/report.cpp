#include "ledmerge/report.hpp"

namespace ledmerge {

namespace {

template <class T>
nlohmann::json opt(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

} // namespace

nlohmann::json MergeReport::to_json() const {
    nlohmann::json tasks_json = nlohmann::json::array();
    for (const auto& task : tasks) {
        nlohmann::json tensors_json = nlohmann::json::array();
        std::uint64_t numel = 0;
        double applied = 0.0;
        std::optional<std::uint64_t> sf, sb, el, dj;
        auto add = [](std::optional<std::uint64_t>& total, const std::optional<std::uint64_t>& v) {
            if (v) total = total.value_or(0) + *v;
        };
        for (const auto& t : task.tensors) {
            tensors_json.push_back({{"name", t.name},
                                    {"numel", t.numel},
                                    {"selected_fine", opt(t.selected_fine)},
                                    {"selected_base", opt(t.selected_base)},
                                    {"elected", opt(t.elected)},
                                    {"disjoint", opt(t.disjoint)},
                                    {"mask_density", t.mask_density},
                                    {"excluded", t.excluded}});
            numel += t.numel;
            applied += t.mask_density * static_cast<double>(t.numel);
            add(sf, t.selected_fine);
            add(sb, t.selected_base);
            add(el, t.elected);
            add(dj, t.disjoint);
        }
        tasks_json.push_back({{"name", task.name},
                              {"ratio", opt(task.ratio)},
                              {"lambda", opt(task.lambda)},
                              {"totals",
                               {{"numel", numel},
                                {"selected_fine", opt(sf)},
                                {"selected_base", opt(sb)},
                                {"elected", opt(el)},
                                {"disjoint", opt(dj)},
                                {"mask_density", numel == 0 ? 0.0 : applied / static_cast<double>(numel)}}},
                              {"tensors", std::move(tensors_json)}});
    }
    return {{"method", method}, {"parameters", parameters}, {"tasks", std::move(tasks_json)}, {"notes", notes}};
}

} // namespace ledmerge
