#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include <fmt/core.h>

#include "ledmerge/checkpoint.hpp"
#include "ledmerge/random.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static int counter = 0;
        path_ = fs::temp_directory_path() / fmt::format("ledmerge-{}-{}-{}", tag, ::getpid(), counter++);
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::vector<double> normals(std::mt19937_64& gen, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * ledmerge::standard_normal(gen);
    return v;
}

inline std::vector<float> normals_f(std::mt19937_64& gen, std::size_t n, double scale = 1.0) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(scale * ledmerge::standard_normal(gen));
    return v;
}

/// Random f64 checkpoint over the given shapes, tensors named t0, t1, ...
inline ledmerge::Checkpoint random_f64(std::mt19937_64& gen, const std::vector<ledmerge::Shape>& shapes,
                                       double scale = 1.0) {
    std::vector<std::pair<std::string, ledmerge::Tensor>> ts;
    for (std::size_t i = 0; i < shapes.size(); ++i)
        ts.emplace_back(fmt::format("t{}", i),
                        ledmerge::Tensor(shapes[i], normals(gen, ledmerge::shape_numel(shapes[i]), scale)));
    return ledmerge::Checkpoint::from_tensors(std::move(ts));
}

inline ledmerge::Checkpoint random_f32(std::mt19937_64& gen, const std::vector<ledmerge::Shape>& shapes,
                                       double scale = 1.0) {
    std::vector<std::pair<std::string, ledmerge::Tensor>> ts;
    for (std::size_t i = 0; i < shapes.size(); ++i)
        ts.emplace_back(fmt::format("t{}", i),
                        ledmerge::Tensor(shapes[i], normals_f(gen, ledmerge::shape_numel(shapes[i]), scale)));
    return ledmerge::Checkpoint::from_tensors(std::move(ts));
}

/// Same layout as `like`, values perturbed by N(0, scale).
inline ledmerge::Checkpoint perturbed(std::mt19937_64& gen, const ledmerge::Checkpoint& like, double scale) {
    std::vector<std::pair<std::string, ledmerge::Tensor>> ts;
    for (const auto& m : like.manifest()) {
        ledmerge::Tensor t = like.read(m.name);
        t.visit([&](auto& v) {
            for (auto& x : v) x += static_cast<std::decay_t<decltype(x)>>(scale * ledmerge::standard_normal(gen));
        });
        ts.emplace_back(m.name, std::move(t).reshaped(m.shape));
    }
    return ledmerge::Checkpoint::from_tensors(std::move(ts));
}

/// Flat values of every tensor in manifest order, widened to double.
inline std::vector<double> flat(const ledmerge::Checkpoint& ckpt) {
    std::vector<double> out;
    for (const auto& m : ckpt.manifest()) {
        const auto t = ckpt.read(m.name);
        for (std::size_t i = 0; i < t.numel(); ++i) out.push_back(t.at(i));
    }
    return out;
}

/// Stored bytes of every tensor in manifest order.
inline std::vector<std::byte> payload(const ledmerge::Checkpoint& ckpt) {
    std::vector<std::byte> out;
    for (const auto& m : ckpt.manifest()) {
        const auto b = ckpt.read_bytes(m.name);
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

} // namespace testing_support
