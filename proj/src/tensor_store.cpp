#include "repcmp/tensor_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "repcmp/errors.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "tensor-store";
constexpr std::size_t kFixedHeader = 4 + 1 + 1 + 1;

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f32_le(std::vector<std::uint8_t>& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32_le(const std::uint8_t* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

}  // namespace

std::uint64_t TensorFile::element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

void TensorFile::validate() const {
    if (dtype != DType::Float32) throw ValidationError(kModule, "unsupported dtype");
    if (shape.empty() || shape.size() > kMaxTensorRank)
        throw ValidationError(kModule, "tensor rank must be in [1, 4], got " + std::to_string(shape.size()));
    std::uint64_t n = 1;
    for (auto d : shape) {
        if (d == 0) throw ValidationError(kModule, "tensor dimensions must be positive");
        if (n > std::numeric_limits<std::uint64_t>::max() / d)
            throw ValidationError(kModule, "tensor element count overflows");
        n *= d;
    }
    if (payload.size() != n)
        throw ValidationError(kModule, "payload has " + std::to_string(payload.size()) +
                                           " elements, shape requires " + std::to_string(n));
}

bool operator==(const TensorFile& a, const TensorFile& b) {
    return a.dtype == b.dtype && a.shape == b.shape && a.payload.size() == b.payload.size() &&
           std::memcmp(a.payload.data(), b.payload.data(), a.payload.size() * sizeof(float)) == 0;
}

std::vector<std::uint8_t> encode_tensor(const TensorFile& tensor) {
    tensor.validate();
    std::vector<std::uint8_t> out;
    out.reserve(kFixedHeader + 8 * tensor.shape.size() + 4 * tensor.payload.size());
    out.insert(out.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
    out.push_back(kTensorVersion);
    out.push_back(static_cast<std::uint8_t>(tensor.dtype));
    out.push_back(static_cast<std::uint8_t>(tensor.shape.size()));
    for (auto d : tensor.shape) put_u64_le(out, d);
    for (float f : tensor.payload) put_f32_le(out, f);
    return out;
}

TensorFile decode_tensor(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kFixedHeader) throw FormatError(kModule, "file shorter than header");
    if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) throw FormatError(kModule, "bad magic");
    if (bytes[4] != kTensorVersion)
        throw FormatError(kModule, "unsupported version " + std::to_string(bytes[4]));
    if (bytes[5] != static_cast<std::uint8_t>(DType::Float32))
        throw FormatError(kModule, "unsupported dtype code " + std::to_string(bytes[5]));
    const std::size_t ndim = bytes[6];
    if (ndim == 0 || ndim > kMaxTensorRank) throw FormatError(kModule, "bad rank " + std::to_string(ndim));
    if (bytes.size() < kFixedHeader + 8 * ndim) throw CorruptionError(kModule, "truncated dimension block");

    TensorFile t;
    t.shape.resize(ndim);
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        t.shape[i] = get_u64_le(bytes.data() + kFixedHeader + 8 * i);
        if (t.shape[i] == 0) throw FormatError(kModule, "zero dimension");
        if (count > std::numeric_limits<std::uint64_t>::max() / 4 / t.shape[i])
            throw CorruptionError(kModule, "dimension product overflows");
        count *= t.shape[i];
    }
    const std::size_t offset = kFixedHeader + 8 * ndim;
    const std::uint64_t expected = count * 4;
    if (bytes.size() - offset != expected)
        throw CorruptionError(kModule, "payload is " + std::to_string(bytes.size() - offset) +
                                           " bytes, expected " + std::to_string(expected));
    t.payload.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) t.payload[i] = get_f32_le(bytes.data() + offset + 4 * i);
    return t;
}

void write_tensor(const std::filesystem::path& path, const TensorFile& tensor) {
    const auto bytes = encode_tensor(tensor);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(kModule, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(kModule, "write failed for " + path.string());
}

TensorFile read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(kModule, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tensor(bytes);
}

TensorFile tensor_from_matrix(const Matrix& m) {
    TensorFile t;
    t.shape = {m.rows(), m.cols()};
    t.payload.resize(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) t.payload[i] = static_cast<float>(m.data()[i]);
    return t;
}

Matrix matrix_from_tensor(const TensorFile& t) {
    if (t.shape.size() != 2) throw DimensionError(kModule, "expected a 2-D tensor");
    std::vector<double> data(t.payload.begin(), t.payload.end());
    return Matrix(t.shape[0], t.shape[1], std::move(data));
}

std::vector<std::string> DatasetManifest::image_ids() const {
    std::vector<std::string> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) ids.push_back(e.image_id);
    return ids;
}

void DatasetManifest::reindex() {
    index_.clear();
    index_.reserve(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!index_.emplace(entries[i].image_id, i).second)
            throw ValidationError(kModule, "duplicate image_id '" + entries[i].image_id + "'");
    }
}

std::size_t DatasetManifest::index_of(const std::string& image_id) const {
    const auto it = index_.find(image_id);
    if (it == index_.end()) throw ValidationError(kModule, "unknown image_id '" + image_id + "'");
    return it->second;
}

bool DatasetManifest::contains(const std::string& image_id) const { return index_.contains(image_id); }

const ManifestEntry& DatasetManifest::at(const std::string& image_id) const {
    return entries[index_of(image_id)];
}

DatasetManifest parse_manifest(const std::string& json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(kModule, std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!doc.is_array()) throw ValidationError(kModule, "manifest must be a JSON array");

    DatasetManifest manifest;
    manifest.entries.reserve(doc.size());
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& item = doc[i];
        const auto where = "manifest entry " + std::to_string(i);
        if (!item.is_object()) throw ValidationError(kModule, where + " is not an object");
        for (const char* key : {"image_id", "label_id", "source_path", "split"})
            if (!item.contains(key)) throw ValidationError(kModule, where + " is missing '" + key + "'");
        ManifestEntry e;
        try {
            e.image_id = item.at("image_id").get<std::string>();
            e.label_id = item.at("label_id").get<std::int64_t>();
            e.source_path = item.at("source_path").get<std::string>();
            e.split = item.at("split").get<std::string>();
        } catch (const nlohmann::json::exception& ex) {
            throw ValidationError(kModule, where + ": " + ex.what());
        }
        if (e.image_id.empty()) throw ValidationError(kModule, where + " has an empty image_id");
        if (!seen.insert(e.image_id).second)
            throw ValidationError(kModule, "duplicate image_id '" + e.image_id + "'");
        manifest.entries.push_back(std::move(e));
    }
    manifest.reindex();
    return manifest;
}

DatasetManifest ingest_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(kModule, "cannot open manifest " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_manifest(text);
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& e : manifest.entries)
        doc.push_back({{"image_id", e.image_id},
                       {"label_id", e.label_id},
                       {"source_path", e.source_path},
                       {"split", e.split}});
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(kModule, "cannot open " + path.string() + " for writing");
    out << doc.dump(1) << '\n';
}

void check_alignment(const DatasetManifest& manifest, const TensorFile& activations) {
    if (activations.shape.empty() || activations.shape[0] != manifest.size())
        throw ValidationError(kModule, "activation rows (" +
                                           std::to_string(activations.shape.empty() ? 0 : activations.shape[0]) +
                                           ") do not match manifest size (" + std::to_string(manifest.size()) + ")");
}

void check_alignment(const DatasetManifest& manifest, const Matrix& activations) {
    if (activations.rows() != manifest.size())
        throw ValidationError(kModule, "activation rows (" + std::to_string(activations.rows()) +
                                           ") do not match manifest size (" + std::to_string(manifest.size()) + ")");
}

}  // namespace repcmp
