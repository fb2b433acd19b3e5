#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "repcmp/tensor_store.hpp"

namespace repcmp {

/// Single-parent label hierarchy (tree or forest). Dataset labels are leaves,
/// keyed by the decimal form of their label_id.
class Taxonomy {
public:
    /// Adds `node` with `parent`, or as a root when parent is empty.
    void add(const std::string& node, const std::string& parent = {});

    bool contains(const std::string& node) const { return parent_.contains(node); }
    /// Empty string for roots.
    const std::string& parent(const std::string& node) const;
    std::vector<std::string> roots() const;
    std::size_t size() const { return parent_.size(); }
    bool is_leaf(const std::string& node) const { return !parents_with_children_.contains(node); }

    /// Throws ValidationError on cycles or dangling parents.
    void validate() const;

    nlohmann::json to_json() const;
    static Taxonomy from_json(const nlohmann::json& j);
    static Taxonomy load(const std::filesystem::path& path);

private:
    std::map<std::string, std::string> parent_;
    std::set<std::string> parents_with_children_;
};

std::string label_node(std::int64_t label_id);

/// Ancestor `level` hops above `label`, clamped at the root.
std::string lift_label(const Taxonomy& taxonomy, const std::string& label, int level);

/// Maximum semantic level searched.
inline constexpr int kMaxSemanticLevel = 3;

struct SemanticMatch {
    int level = 0;
    /// matched_ids[i] shares its lifted label with reference_ids[i].
    std::vector<std::string> matched_ids;
    bool excluded = false;
};

/// Images from `bottom_pool` whose multiset of lifted labels equals that of
/// `reference_ids`, or nullopt. Candidates of each label are drawn uniformly
/// with `seed`.
std::optional<std::vector<std::string>> find_matched_set(std::span<const std::string> reference_ids,
                                                         std::span<const std::string> bottom_pool, int level,
                                                         const Taxonomy& taxonomy, const DatasetManifest& manifest,
                                                         std::uint64_t seed);

/// Tries levels 0..kMaxSemanticLevel in order; excluded when none matches.
SemanticMatch iterative_semantic_search(std::span<const std::string> reference_ids,
                                        std::span<const std::string> bottom_pool, const Taxonomy& taxonomy,
                                        const DatasetManifest& manifest, std::uint64_t seed);

/// Random hierarchy over leaves "0".."num_labels-1" with `levels` layers of
/// ancestors. Some internal nodes terminate early as roots so lifting also
/// exercises the root clamp.
Taxonomy synthetic_taxonomy(std::size_t num_labels, int levels, std::uint64_t seed);

}  // namespace repcmp
