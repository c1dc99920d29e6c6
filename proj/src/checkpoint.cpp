#include "ledmerge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstring>
#include <set>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <fmt/core.h>
#include <fmt/ranges.h>
#include <json.hpp>

#include "ledmerge/compensated.hpp"
#include "ledmerge/errors.hpp"

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes a little-endian host");

namespace ledmerge {

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100ull * 1024 * 1024;

std::string errno_text() { return std::strerror(errno); }

} // namespace

class Checkpoint::Storage {
public:
    virtual ~Storage() = default;
    /// Copies `length` payload bytes at `offset` into `dst`.
    virtual void read_into(std::uint64_t offset, std::uint64_t length, void* dst) const = 0;
    virtual bool file_backed() const = 0;
};

namespace {

class MemoryStorage final : public Checkpoint::Storage {
public:
    explicit MemoryStorage(std::vector<std::byte> payload) : payload_(std::move(payload)) {}

    void read_into(std::uint64_t offset, std::uint64_t length, void* dst) const override {
        if (offset + length > payload_.size()) throw TruncationError("read past end of in-memory payload");
        if (length != 0) std::memcpy(dst, payload_.data() + offset, length);
    }
    bool file_backed() const override { return false; }

private:
    std::vector<std::byte> payload_;
};

class FileStorage final : public Checkpoint::Storage {
public:
    FileStorage(int fd, std::filesystem::path path, std::uint64_t payload_start)
        : fd_(fd), path_(std::move(path)), payload_start_(payload_start) {}
    ~FileStorage() override { ::close(fd_); }

    FileStorage(const FileStorage&) = delete;
    FileStorage& operator=(const FileStorage&) = delete;

    void read_into(std::uint64_t offset, std::uint64_t length, void* dst) const override {
        auto* out = static_cast<char*>(dst);
        std::uint64_t done = 0;
        while (done < length) {
            const auto n = ::pread(fd_, out + done, length - done,
                                   static_cast<off_t>(payload_start_ + offset + done));
            if (n < 0) {
                if (errno == EINTR) continue;
                throw IoError(fmt::format("read failed on '{}': {}", path_.string(), errno_text()));
            }
            if (n == 0) throw TruncationError(fmt::format("unexpected end of file in '{}'", path_.string()));
            done += static_cast<std::uint64_t>(n);
        }
    }
    bool file_backed() const override { return true; }

private:
    int fd_;
    std::filesystem::path path_;
    std::uint64_t payload_start_;
};

void read_exact(int fd, void* dst, std::uint64_t length, std::uint64_t offset, const std::filesystem::path& path) {
    auto* out = static_cast<char*>(dst);
    std::uint64_t done = 0;
    while (done < length) {
        const auto n = ::pread(fd, out + done, length - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw IoError(fmt::format("read failed on '{}': {}", path.string(), errno_text()));
        }
        if (n == 0) throw TruncationError(fmt::format("'{}' ends inside its header", path.string()));
        done += static_cast<std::uint64_t>(n);
    }
}

void write_all(int fd, const void* src, std::size_t length, const std::filesystem::path& path) {
    const auto* in = static_cast<const char*>(src);
    std::size_t done = 0;
    while (done < length) {
        const auto n = ::write(fd, in + done, length - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw IoError(fmt::format("write failed on '{}': {}", path.string(), errno_text()));
        }
        done += static_cast<std::size_t>(n);
    }
}

std::uint64_t as_u64(const nlohmann::json& value, const std::string& what) {
    if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<std::int64_t>() >= 0))
        throw FormatError(what + " must be a non-negative integer");
    return value.get<std::uint64_t>();
}

struct ParsedHeader {
    std::vector<TensorMeta> manifest;
    Metadata metadata;
};

ParsedHeader parse_header(std::string_view text, const std::filesystem::path& path) {
    // nlohmann keeps the last of duplicated keys; catch them while parsing.
    std::set<std::string> top_keys;
    std::string duplicate;
    auto callback = [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
        if (event == nlohmann::json::parse_event_t::key && depth == 1) {
            auto key = parsed.get<std::string>();
            if (!top_keys.insert(key).second && duplicate.empty()) duplicate = key;
        }
        return true;
    };

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text.begin(), text.end(), callback);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("'{}': header is not valid JSON ({})", path.string(), e.what()));
    }
    if (!duplicate.empty())
        throw FormatError(fmt::format("'{}': duplicated tensor name '{}'", path.string(), duplicate));
    if (!header.is_object()) throw FormatError(fmt::format("'{}': header is not a JSON object", path.string()));

    ParsedHeader out;
    for (const auto& [key, entry] : header.items()) {
        if (key == "__metadata__") {
            if (!entry.is_object()) throw FormatError("__metadata__ must be an object");
            for (const auto& [mk, mv] : entry.items()) {
                if (!mv.is_string()) throw FormatError(fmt::format("__metadata__ value '{}' is not a string", mk));
                out.metadata.emplace(mk, mv.get<std::string>());
            }
            continue;
        }
        if (!entry.is_object()) throw FormatError(fmt::format("entry '{}' is not an object", key));
        if (!entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets"))
            throw FormatError(fmt::format("entry '{}' lacks dtype, shape or data_offsets", key));
        const auto& dtype = entry.at("dtype");
        const auto& shape = entry.at("shape");
        const auto& offsets = entry.at("data_offsets");
        if (!dtype.is_string()) throw FormatError(fmt::format("entry '{}': dtype is not a string", key));
        if (!shape.is_array()) throw FormatError(fmt::format("entry '{}': shape is not an array", key));
        if (!offsets.is_array() || offsets.size() != 2)
            throw FormatError(fmt::format("entry '{}': data_offsets must be [begin, end]", key));

        TensorMeta meta;
        meta.name = key;
        meta.dtype = parse_dtype(dtype.get<std::string>());
        for (const auto& extent : shape) {
            const auto e = as_u64(extent, "shape extent of '" + key + "'");
            if (e == 0) throw FormatError(fmt::format("entry '{}': zero extent", key));
            meta.shape.push_back(e);
        }
        const auto begin = as_u64(offsets[0], "data_offsets of '" + key + "'");
        const auto end = as_u64(offsets[1], "data_offsets of '" + key + "'");
        if (end < begin) throw FormatError(fmt::format("entry '{}': end offset before begin", key));
        meta.byte_offset = begin;
        meta.byte_length = end - begin;
        if (meta.byte_length != meta.numel() * dtype_width(meta.dtype))
            throw FormatError(fmt::format("entry '{}': {} bytes for {} elements of {}", key, meta.byte_length,
                                          meta.numel(), dtype_name(meta.dtype)));
        out.manifest.push_back(std::move(meta));
    }
    return out;
}

template <class T>
std::vector<T> read_values(const Checkpoint::Storage& storage, const TensorMeta& meta) {
    std::vector<T> values(meta.numel());
    storage.read_into(meta.byte_offset, meta.byte_length, values.data());
    return values;
}

std::vector<float> widen_halves(std::span<const std::byte> bytes, DType dtype) {
    std::vector<float> out(bytes.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint16_t bits;
        std::memcpy(&bits, bytes.data() + 2 * i, 2);
        out[i] = dtype == DType::F16 ? f16_to_f32(bits) : bf16_to_f32(bits);
    }
    return out;
}

std::string shape_text(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, ", ")); }

} // namespace

Checkpoint::Checkpoint() : storage_(std::make_shared<MemoryStorage>(std::vector<std::byte>{})) {}

Checkpoint::Checkpoint(std::vector<TensorMeta> manifest, Metadata metadata, std::shared_ptr<const Storage> storage)
    : manifest_(std::move(manifest)), metadata_(std::move(metadata)), storage_(std::move(storage)) {
    std::sort(manifest_.begin(), manifest_.end(),
              [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
    for (std::size_t i = 0; i < manifest_.size(); ++i) {
        if (!index_.emplace(manifest_[i].name, i).second)
            throw FormatError(fmt::format("duplicated tensor name '{}'", manifest_[i].name));
    }
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) throw IoError(fmt::format("cannot open '{}': {}", path.string(), errno_text()));
    // FileStorage owns the descriptor from here on.
    auto guard = std::make_shared<FileStorage>(fd, path, 0);

    struct stat st {};
    if (::fstat(fd, &st) != 0) throw IoError(fmt::format("cannot stat '{}': {}", path.string(), errno_text()));
    const auto file_size = static_cast<std::uint64_t>(st.st_size);
    if (file_size < 8) throw TruncationError(fmt::format("'{}' is shorter than the 8-byte header length", path.string()));

    std::uint64_t header_len = 0;
    read_exact(fd, &header_len, 8, 0, path);
    if (header_len > kMaxHeaderBytes)
        throw FormatError(fmt::format("'{}': header length {} exceeds the {} byte limit", path.string(), header_len,
                                      kMaxHeaderBytes));
    if (8 + header_len > file_size)
        throw TruncationError(fmt::format("'{}': header of {} bytes does not fit in the file", path.string(), header_len));

    std::string text(header_len, '\0');
    read_exact(fd, text.data(), header_len, 8, path);
    auto parsed = parse_header(text, path);

    const std::uint64_t payload_size = file_size - 8 - header_len;
    std::vector<const TensorMeta*> by_offset;
    for (const auto& meta : parsed.manifest) {
        if (meta.byte_offset + meta.byte_length > payload_size)
            throw TruncationError(fmt::format("'{}': tensor '{}' extends past the end of the payload", path.string(),
                                              meta.name));
        by_offset.push_back(&meta);
    }
    std::sort(by_offset.begin(), by_offset.end(),
              [](const TensorMeta* a, const TensorMeta* b) { return a->byte_offset < b->byte_offset; });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->byte_offset < by_offset[i - 1]->byte_offset + by_offset[i - 1]->byte_length)
            throw FormatError(fmt::format("'{}': tensors '{}' and '{}' overlap", path.string(), by_offset[i - 1]->name,
                                          by_offset[i]->name));
    }

    auto file = std::make_shared<FileStorage>(::dup(fd), path, 8 + header_len);
    return Checkpoint(std::move(parsed.manifest), std::move(parsed.metadata), std::move(file));
}

Checkpoint Checkpoint::from_tensors(std::vector<std::pair<std::string, Tensor>> tensors, Metadata metadata) {
    std::sort(tensors.begin(), tensors.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<TensorMeta> manifest;
    std::vector<std::byte> payload;
    for (auto& [name, tensor] : tensors) {
        if (!manifest.empty() && manifest.back().name == name)
            throw FormatError(fmt::format("duplicated tensor name '{}'", name));
        if (shape_numel(tensor.shape()) == 0) throw FormatError(fmt::format("tensor '{}' is empty", name));
        auto bytes = encode_tensor(tensor, tensor.dtype());
        TensorMeta meta{name, tensor.shape(), tensor.dtype(), payload.size(), bytes.size()};
        payload.insert(payload.end(), bytes.begin(), bytes.end());
        manifest.push_back(std::move(meta));
    }
    return Checkpoint(std::move(manifest), std::move(metadata), std::make_shared<MemoryStorage>(std::move(payload)));
}

Checkpoint Checkpoint::with_metadata(Metadata metadata) const {
    Checkpoint out = *this;
    out.metadata_ = std::move(metadata);
    return out;
}

bool Checkpoint::contains(std::string_view name) const { return find(name) != nullptr; }

const TensorMeta* Checkpoint::find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &manifest_[it->second];
}

const TensorMeta& Checkpoint::meta(std::string_view name) const {
    const auto* m = find(name);
    if (m == nullptr) throw CompatError(fmt::format("checkpoint has no tensor named '{}'", name));
    return *m;
}

std::uint64_t Checkpoint::num_elements() const {
    std::uint64_t d = 0;
    for (const auto& m : manifest_) d += m.numel();
    return d;
}

Tensor Checkpoint::read(std::string_view name) const {
    const auto& m = meta(name);
    switch (m.dtype) {
    case DType::F32: return Tensor(m.shape, read_values<float>(*storage_, m), DType::F32);
    case DType::F64: return Tensor(m.shape, read_values<double>(*storage_, m));
    case DType::F16:
    case DType::BF16: {
        auto bytes = read_bytes(name);
        return Tensor(m.shape, widen_halves(bytes, m.dtype), m.dtype);
    }
    }
    throw DtypeError("unknown dtype tag");
}

std::vector<std::byte> Checkpoint::read_bytes(std::string_view name) const {
    const auto& m = meta(name);
    std::vector<std::byte> bytes(m.byte_length);
    storage_->read_into(m.byte_offset, m.byte_length, bytes.data());
    return bytes;
}

std::vector<std::byte> Checkpoint::read_bytes(std::string_view name, std::uint64_t first, std::uint64_t count) const {
    const auto& m = meta(name);
    if (first + count > m.numel())
        throw ShapeError(fmt::format("range [{}, {}) outside tensor '{}' of {} elements", first, first + count, name,
                                     m.numel()));
    const auto width = dtype_width(m.dtype);
    std::vector<std::byte> bytes(count * width);
    storage_->read_into(m.byte_offset + first * width, count * width, bytes.data());
    return bytes;
}

Tensor Checkpoint::read_range(std::string_view name, std::uint64_t first, std::uint64_t count) const {
    const auto& m = meta(name);
    const auto bytes = read_bytes(name, first, count);
    return decode_tensor(TensorMeta{m.name, {count}, m.dtype, 0, bytes.size()}, bytes);
}

bool Checkpoint::file_backed() const { return storage_->file_backed(); }

std::vector<std::byte> encode_tensor(const Tensor& tensor, DType storage) {
    if (computes_in_f64(storage) != tensor.is_f64())
        throw DtypeError(fmt::format("cannot store {} values as {}", tensor.is_f64() ? "double" : "float",
                                     dtype_name(storage)));
    std::vector<std::byte> out(tensor.numel() * dtype_width(storage));
    switch (storage) {
    case DType::F32: {
        auto v = tensor.values<float>();
        std::memcpy(out.data(), v.data(), out.size());
        break;
    }
    case DType::F64: {
        auto v = tensor.values<double>();
        std::memcpy(out.data(), v.data(), out.size());
        break;
    }
    case DType::F16:
    case DType::BF16: {
        auto v = tensor.values<float>();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::uint16_t bits = storage == DType::F16 ? f32_to_f16(v[i]) : f32_to_bf16(v[i]);
            std::memcpy(out.data() + 2 * i, &bits, 2);
        }
        break;
    }
    }
    return out;
}

Tensor decode_tensor(const TensorMeta& meta, std::span<const std::byte> bytes) {
    if (bytes.size() != meta.numel() * dtype_width(meta.dtype))
        throw FormatError(fmt::format("tensor '{}': {} bytes do not match its shape", meta.name, bytes.size()));
    switch (meta.dtype) {
    case DType::F32: {
        std::vector<float> v(meta.numel());
        std::memcpy(v.data(), bytes.data(), bytes.size());
        return Tensor(meta.shape, std::move(v), DType::F32);
    }
    case DType::F64: {
        std::vector<double> v(meta.numel());
        std::memcpy(v.data(), bytes.data(), bytes.size());
        return Tensor(meta.shape, std::move(v));
    }
    case DType::F16:
    case DType::BF16: return Tensor(meta.shape, widen_halves(bytes, meta.dtype), meta.dtype);
    }
    throw DtypeError("unknown dtype tag");
}

std::vector<std::byte> encode_header(std::vector<TensorMeta>& layout, const Metadata& metadata) {
    std::sort(layout.begin(), layout.end(), [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
    nlohmann::json header = nlohmann::json::object();
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::uint64_t offset = 0;
    for (auto& meta : layout) {
        if (meta.name == "__metadata__") throw FormatError("'__metadata__' is reserved");
        if (header.contains(meta.name)) throw FormatError(fmt::format("duplicated tensor name '{}'", meta.name));
        meta.byte_offset = offset;
        meta.byte_length = meta.numel() * dtype_width(meta.dtype);
        offset += meta.byte_length;
        header[meta.name] = {{"dtype", std::string(dtype_name(meta.dtype))},
                             {"shape", meta.shape},
                             {"data_offsets", {meta.byte_offset, meta.byte_offset + meta.byte_length}}};
    }
    std::string text = header.dump();
    // payload starts on an 8-byte boundary
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::byte> out(8 + text.size());
    const std::uint64_t len = text.size();
    std::memcpy(out.data(), &len, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    return out;
}

CheckpointWriter::CheckpointWriter(std::filesystem::path path, std::vector<TensorMeta> layout, Metadata metadata)
    : path_(std::move(path)), layout_(std::move(layout)) {
    auto header = encode_header(layout_, metadata);
    tmp_path_ = path_;
    tmp_path_ += ".partial";
    fd_ = ::open(tmp_path_.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError(fmt::format("cannot create '{}': {}", tmp_path_.string(), errno_text()));
    write_all(fd_, header.data(), header.size(), tmp_path_);
}

CheckpointWriter::~CheckpointWriter() {
    if (fd_ >= 0) ::close(fd_);
    if (!finished_) {
        std::error_code ec;
        std::filesystem::remove(tmp_path_, ec);
    }
}

void CheckpointWriter::write_bytes(std::string_view name, std::span<const std::byte> bytes) {
    if (next_ >= layout_.size()) throw IoError(fmt::format("unexpected extra tensor '{}'", name));
    const auto& meta = layout_[next_];
    if (meta.name != name)
        throw IoError(fmt::format("tensor '{}' written out of order, expected '{}'", name, meta.name));
    if (partial_ != 0) throw IoError(fmt::format("tensor '{}' is only partly written", meta.name));
    if (bytes.size() != meta.byte_length)
        throw IoError(fmt::format("tensor '{}': {} bytes written, layout says {}", name, bytes.size(), meta.byte_length));
    write_all(fd_, bytes.data(), bytes.size(), tmp_path_);
    ++next_;
}

void CheckpointWriter::write(std::string_view name, const Tensor& tensor) {
    if (next_ >= layout_.size()) throw IoError(fmt::format("unexpected extra tensor '{}'", name));
    const auto& meta = layout_[next_];
    if (tensor.shape() != meta.shape)
        throw ShapeError(fmt::format("tensor '{}': shape {} does not match layout {}", name, shape_text(tensor.shape()),
                                     shape_text(meta.shape)));
    write_bytes(name, encode_tensor(tensor, meta.dtype));
}

void CheckpointWriter::write_chunk(std::string_view name, const Tensor& chunk) {
    if (next_ >= layout_.size()) throw IoError(fmt::format("unexpected extra tensor '{}'", name));
    const auto& meta = layout_[next_];
    if (meta.name != name)
        throw IoError(fmt::format("tensor '{}' written out of order, expected '{}'", name, meta.name));
    const auto bytes = encode_tensor(chunk, meta.dtype);
    if (partial_ + bytes.size() > meta.byte_length)
        throw IoError(fmt::format("tensor '{}': chunk runs past the end of the tensor", name));
    write_all(fd_, bytes.data(), bytes.size(), tmp_path_);
    partial_ += bytes.size();
    if (partial_ == meta.byte_length) {
        partial_ = 0;
        ++next_;
    }
}

void CheckpointWriter::finish() {
    if (finished_) return;
    if (next_ != layout_.size())
        throw IoError(fmt::format("'{}': only {} of {} tensors written", path_.string(), next_, layout_.size()));
    if (::close(fd_) != 0) {
        fd_ = -1;
        throw IoError(fmt::format("closing '{}' failed: {}", tmp_path_.string(), errno_text()));
    }
    fd_ = -1;
    std::error_code ec;
    std::filesystem::rename(tmp_path_, path_, ec);
    if (ec) throw IoError(fmt::format("cannot move '{}' into place: {}", path_.string(), ec.message()));
    finished_ = true;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return Checkpoint::load(path); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    CheckpointWriter writer(path, ckpt.manifest(), ckpt.metadata());
    for (const auto& meta : ckpt.manifest()) writer.write_bytes(meta.name, ckpt.read_bytes(meta.name));
    writer.finish();
}

void validate_compat(const std::vector<TensorMeta>& a, const std::vector<TensorMeta>& b) {
    validate_aligned(a, b);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].dtype != b[i].dtype)
            throw CompatError(fmt::format("tensor '{}': dtype {} vs {}", a[i].name, dtype_name(a[i].dtype),
                                          dtype_name(b[i].dtype)));
    }
}

void validate_compat(const Checkpoint& a, const Checkpoint& b) { validate_compat(a.manifest(), b.manifest()); }

void validate_aligned(const std::vector<TensorMeta>& reference, const std::vector<TensorMeta>& other) {
    // Both manifests are sorted by name, so a merge walk finds the first mismatch.
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < reference.size() && j < other.size()) {
        const auto& a = reference[i];
        const auto& b = other[j];
        if (a.name < b.name) throw CompatError(fmt::format("tensor '{}' is missing from the second manifest", a.name));
        if (b.name < a.name) throw CompatError(fmt::format("tensor '{}' is missing from the first manifest", b.name));
        if (a.shape != b.shape)
            throw CompatError(fmt::format("tensor '{}': shape {} vs {}", a.name, shape_text(a.shape), shape_text(b.shape)));
        ++i;
        ++j;
    }
    if (i < reference.size())
        throw CompatError(fmt::format("tensor '{}' is missing from the second manifest", reference[i].name));
    if (j < other.size())
        throw CompatError(fmt::format("tensor '{}' is missing from the first manifest", other[j].name));
}

TaskVector TaskVector::between(Checkpoint fine, Checkpoint base) {
    validate_compat(fine, base);
    TaskVector tv;
    tv.fine_ = std::move(fine);
    tv.base_ = std::move(base);
    return tv;
}

TaskVector TaskVector::from_deltas(Checkpoint deltas, const std::vector<TensorMeta>& reference) {
    validate_aligned(reference, deltas.manifest());
    for (const auto& m : deltas.manifest()) {
        if (m.dtype != DType::F32 && m.dtype != DType::F64)
            throw DtypeError(fmt::format("delta tensor '{}' must be F32 or F64", m.name));
    }
    TaskVector tv;
    tv.fine_ = std::move(deltas);
    tv.explicit_ = true;
    return tv;
}

const std::vector<TensorMeta>& TaskVector::manifest() const { return fine_.manifest(); }

namespace {

template <class T>
DeltaParts split_delta(const Tensor& fine, const Tensor& base) {
    auto f = fine.values<T>();
    auto b = base.values<T>();
    std::vector<T> hi(f.size()), lo(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) two_sum(f[i], -b[i], hi[i], lo[i]);
    if constexpr (std::is_same_v<T, double>)
        return {Tensor(fine.shape(), std::move(hi)), Tensor(fine.shape(), std::move(lo))};
    else
        return {Tensor(fine.shape(), std::move(hi), DType::F32), Tensor(fine.shape(), std::move(lo), DType::F32)};
}

} // namespace

Tensor TaskVector::delta(std::string_view name) const {
    if (explicit_) return fine_.read(name);
    return delta_parts(name).hi;
}

DeltaParts TaskVector::delta_parts(std::string_view name, std::uint64_t first, std::uint64_t count) const {
    if (explicit_) {
        Tensor hi = fine_.read_range(name, first, count);
        Tensor lo = Tensor::zeros(hi.shape(), hi.dtype());
        return {std::move(hi), std::move(lo)};
    }
    const Tensor fine = fine_.read_range(name, first, count);
    const Tensor base = base_.read_range(name, first, count);
    return fine.is_f64() ? split_delta<double>(fine, base) : split_delta<float>(fine, base);
}

DeltaParts TaskVector::delta_parts(std::string_view name) const {
    if (explicit_) {
        Tensor hi = fine_.read(name);
        Tensor lo = Tensor::zeros(hi.shape(), hi.dtype());
        return {std::move(hi), std::move(lo)};
    }
    const Tensor fine = fine_.read(name);
    const Tensor base = base_.read(name);
    return fine.is_f64() ? split_delta<double>(fine, base) : split_delta<float>(fine, base);
}

TaskVector task_vector(const Checkpoint& fine, const Checkpoint& base) { return TaskVector::between(fine, base); }

} // namespace ledmerge
