#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "repcmp/matrix.hpp"

namespace repcmp {

// On-disk layout (all integers little-endian):
//   "CLTS" | version:u8 | dtype:u8 | ndim:u8 | dims:u64[ndim] | payload
inline constexpr char kTensorMagic[4] = {'C', 'L', 'T', 'S'};
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::size_t kMaxTensorRank = 4;

enum class DType : std::uint8_t {
    Float32 = 1,
};

struct TensorFile {
    DType dtype = DType::Float32;
    std::vector<std::uint64_t> shape;
    std::vector<float> payload;

    std::uint64_t element_count() const;

    /// Throws ValidationError when shape/payload invariants do not hold.
    void validate() const;

    friend bool operator==(const TensorFile& a, const TensorFile& b);
};

std::vector<std::uint8_t> encode_tensor(const TensorFile& tensor);
TensorFile decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const std::filesystem::path& path, const TensorFile& tensor);
TensorFile read_tensor(const std::filesystem::path& path);

/// 2-D float32 tensor <-> double matrix.
TensorFile tensor_from_matrix(const Matrix& m);
Matrix matrix_from_tensor(const TensorFile& t);

struct ManifestEntry {
    std::string image_id;
    std::int64_t label_id = 0;
    std::string source_path;
    std::string split;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    DatasetManifest() = default;
    explicit DatasetManifest(std::vector<ManifestEntry> e) : entries(std::move(e)) { reindex(); }

    /// Rebuilds the id lookup; call after mutating `entries` directly.
    void reindex();

    std::size_t size() const noexcept { return entries.size(); }
    std::vector<std::string> image_ids() const;
    /// Position of `image_id`, throws ValidationError if absent.
    std::size_t index_of(const std::string& image_id) const;
    const ManifestEntry& at(const std::string& image_id) const;
    bool contains(const std::string& image_id) const;

private:
    std::unordered_map<std::string, std::size_t> index_;
};

DatasetManifest ingest_manifest(const std::filesystem::path& path);
/// Parses a manifest from JSON text; same validation as ingest_manifest.
DatasetManifest parse_manifest(const std::string& json_text);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Row i of an activation tensor describes manifest entry i. Every consumer
/// calls this before indexing activations by manifest position.
void check_alignment(const DatasetManifest& manifest, const TensorFile& activations);
void check_alignment(const DatasetManifest& manifest, const Matrix& activations);

}  // namespace repcmp
