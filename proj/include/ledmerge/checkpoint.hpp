#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ledmerge/dtype.hpp"
#include "ledmerge/tensor.hpp"

namespace ledmerge {

/// Manifest entry of one tensor. Offsets are relative to the payload start.
struct TensorMeta {
    std::string name;
    Shape shape;
    DType dtype = DType::F32;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;

    std::uint64_t numel() const { return shape_numel(shape); }
};

/// The "__metadata__" string map of a safetensors header.
using Metadata = std::map<std::string, std::string>;

/// An immutable set of named tensors.
///
/// A checkpoint is either backed by a safetensors file (tensors are read on
/// demand, one at a time) or by in-memory encoded bytes. Copies share the
/// backing store. The manifest is always sorted by name, and per-tensor passes
/// walk it in that order.
class Checkpoint {
public:
    /// Empty in-memory checkpoint.
    Checkpoint();

    /// Parses the header only; no tensor is materialized.
    static Checkpoint load(const std::filesystem::path& path);

    /// In-memory checkpoint. Values are narrowed to each tensor's storage dtype.
    /// Throws FormatError on duplicate names.
    static Checkpoint from_tensors(std::vector<std::pair<std::string, Tensor>> tensors,
                                   Metadata metadata = {});

    const std::vector<TensorMeta>& manifest() const { return manifest_; }
    const Metadata& metadata() const { return metadata_; }
    Checkpoint with_metadata(Metadata metadata) const;

    std::size_t size() const { return manifest_.size(); }
    bool contains(std::string_view name) const;
    const TensorMeta* find(std::string_view name) const;
    /// Throws CompatError for an unknown name.
    const TensorMeta& meta(std::string_view name) const;

    /// Total element count D across all tensors.
    std::uint64_t num_elements() const;

    /// Materializes one tensor, widened to compute precision.
    Tensor read(std::string_view name) const;
    /// Elements [first, first + count) of one tensor as a flat tensor of shape
    /// {count}, widened to compute precision.
    Tensor read_range(std::string_view name, std::uint64_t first, std::uint64_t count) const;
    /// Raw stored bytes of one tensor.
    std::vector<std::byte> read_bytes(std::string_view name) const;
    /// Raw stored bytes of elements [first, first + count) of one tensor.
    std::vector<std::byte> read_bytes(std::string_view name, std::uint64_t first, std::uint64_t count) const;

    bool file_backed() const;

    class Storage;

private:
    Checkpoint(std::vector<TensorMeta> manifest, Metadata metadata, std::shared_ptr<const Storage> storage);

    std::vector<TensorMeta> manifest_;
    Metadata metadata_;
    std::shared_ptr<const Storage> storage_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Writes a safetensors file tensor by tensor.
///
/// The header is fixed at construction from the layout (name, shape, dtype);
/// tensors must then be written in sorted-name order. Output goes to a
/// temporary sibling file which replaces `path` on finish().
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path path, std::vector<TensorMeta> layout, Metadata metadata = {});
    ~CheckpointWriter();

    CheckpointWriter(const CheckpointWriter&) = delete;
    CheckpointWriter& operator=(const CheckpointWriter&) = delete;

    void write_bytes(std::string_view name, std::span<const std::byte> bytes);
    /// Narrows to the layout dtype of `name`.
    void write(std::string_view name, const Tensor& tensor);
    /// Appends the next flat slice of tensor `name`; the tensor is complete
    /// once its elements are all written.
    void write_chunk(std::string_view name, const Tensor& chunk);
    void finish();

    const std::vector<TensorMeta>& layout() const { return layout_; }

private:
    std::filesystem::path path_;
    std::filesystem::path tmp_path_;
    std::vector<TensorMeta> layout_;
    std::size_t next_ = 0;
    std::uint64_t partial_ = 0;
    int fd_ = -1;
    bool finished_ = false;
};

/// Serialized header for a layout: 8-byte length prefix + padded JSON.
/// Offsets of `layout` are recomputed as contiguous in name order.
std::vector<std::byte> encode_header(std::vector<TensorMeta>& layout, const Metadata& metadata);

std::vector<std::byte> encode_tensor(const Tensor& tensor, DType storage);
Tensor decode_tensor(const TensorMeta& meta, std::span<const std::byte> bytes);

Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Succeeds iff both manifests have the same names, shapes and dtypes.
/// Throws CompatError naming the first offending tensor.
void validate_compat(const Checkpoint& a, const Checkpoint& b);
void validate_compat(const std::vector<TensorMeta>& a, const std::vector<TensorMeta>& b);

/// Name/shape alignment only, ignoring dtype (score maps vs. weights).
void validate_aligned(const std::vector<TensorMeta>& reference, const std::vector<TensorMeta>& other);

/// A delta split as hi + lo, where hi = fl(fine - base) and lo is its exact
/// rounding error.
struct DeltaParts {
    Tensor hi;
    Tensor lo;
};

/// tau = fine - base, evaluated per tensor on demand.
class TaskVector {
public:
    /// Throws CompatError if the checkpoints are not compatible.
    static TaskVector between(Checkpoint fine, Checkpoint base);
    /// Explicit deltas (F32 or F64 tensors) aligned to `reference`.
    static TaskVector from_deltas(Checkpoint deltas, const std::vector<TensorMeta>& reference);

    const std::vector<TensorMeta>& manifest() const;
    /// Delta of one tensor in compute precision (storage dtype F32 or F64).
    Tensor delta(std::string_view name) const;
    /// fine - base as an exact hi + lo pair; lo is zero for explicit deltas.
    DeltaParts delta_parts(std::string_view name) const;
    /// Flat slice [first, first + count) of delta_parts(name).
    DeltaParts delta_parts(std::string_view name, std::uint64_t first, std::uint64_t count) const;

private:
    TaskVector() = default;
    Checkpoint fine_;
    Checkpoint base_;
    bool explicit_ = false;
};

TaskVector task_vector(const Checkpoint& fine, const Checkpoint& base);

} // namespace ledmerge
