#include "repcmp/semantic_control.hpp"

#include <fstream>
#include <set>

#include "repcmp/errors.hpp"
#include "repcmp/rng.hpp"

namespace repcmp {
namespace {

constexpr const char* kModule = "semantic-control";

}  // namespace

void Taxonomy::add(const std::string& node, const std::string& parent) {
    if (node.empty()) throw ValidationError(kModule, "empty taxonomy node");
    if (node == parent) throw ValidationError(kModule, "node '" + node + "' is its own parent");
    parent_[node] = parent;
    if (!parent.empty()) {
        parent_.try_emplace(parent);
        parents_with_children_.insert(parent);
    }
}

const std::string& Taxonomy::parent(const std::string& node) const {
    const auto it = parent_.find(node);
    if (it == parent_.end()) throw ValidationError(kModule, "unknown label '" + node + "'");
    return it->second;
}

std::vector<std::string> Taxonomy::roots() const {
    std::vector<std::string> out;
    for (const auto& [node, parent] : parent_)
        if (parent.empty()) out.push_back(node);
    return out;
}

void Taxonomy::validate() const {
    for (const auto& [node, parent] : parent_) {
        std::set<std::string> seen{node};
        std::string cur = parent;
        while (!cur.empty()) {
            if (!seen.insert(cur).second) throw ValidationError(kModule, "cycle through '" + node + "'");
            cur = this->parent(cur);
        }
    }
}

nlohmann::json Taxonomy::to_json() const {
    nlohmann::json parents = nlohmann::json::object();
    for (const auto& [node, parent] : parent_)
        if (!parent.empty()) parents[node] = parent;
    return {{"parent", parents}, {"roots", roots()}};
}

Taxonomy Taxonomy::from_json(const nlohmann::json& j) {
    Taxonomy t;
    try {
        for (const auto& r : j.at("roots")) t.add(r.get<std::string>());
        for (const auto& [node, parent] : j.at("parent").items()) t.add(node, parent.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(kModule, std::string("malformed taxonomy: ") + e.what());
    }
    std::set<std::string> declared;
    for (const auto& r : j.at("roots")) declared.insert(r.get<std::string>());
    for (const auto& r : t.roots())
        if (!declared.contains(r)) throw ValidationError(kModule, "node '" + r + "' has no parent and is not a root");
    for (const auto& r : declared)
        if (!t.parent(r).empty()) throw ValidationError(kModule, "root '" + r + "' has a parent");
    t.validate();
    return t;
}

Taxonomy Taxonomy::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(kModule, "cannot open taxonomy " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(kModule, std::string("taxonomy is not valid JSON: ") + e.what());
    }
    return from_json(j);
}

std::string label_node(std::int64_t label_id) { return std::to_string(label_id); }

std::string lift_label(const Taxonomy& taxonomy, const std::string& label, int level) {
    if (level < 0) throw ValidationError(kModule, "negative semantic level");
    std::string cur = label;
    taxonomy.parent(cur);  // throws on unknown labels
    for (int i = 0; i < level; ++i) {
        const auto& p = taxonomy.parent(cur);
        if (p.empty()) break;
        cur = p;
    }
    return cur;
}

std::optional<std::vector<std::string>> find_matched_set(std::span<const std::string> reference_ids,
                                                         std::span<const std::string> bottom_pool, int level,
                                                         const Taxonomy& taxonomy, const DatasetManifest& manifest,
                                                         std::uint64_t seed) {
    if (reference_ids.empty()) throw ValidationError(kModule, "no reference images");
    if (bottom_pool.size() < reference_ids.size())
        throw ValidationError(kModule, "bottom pool has " + std::to_string(bottom_pool.size()) +
                                           " images, need at least " + std::to_string(reference_ids.size()));
    auto lifted = [&](const std::string& image_id) {
        return lift_label(taxonomy, label_node(manifest.at(image_id).label_id), level);
    };

    const std::set<std::string> refs(reference_ids.begin(), reference_ids.end());
    std::map<std::string, std::vector<std::string>> candidates;
    for (const auto& id : bottom_pool)
        if (!refs.contains(id)) candidates[lifted(id)].push_back(id);

    std::vector<std::string> ref_labels;
    std::map<std::string, std::size_t> needed;
    for (const auto& id : reference_ids) {
        ref_labels.push_back(lifted(id));
        ++needed[ref_labels.back()];
    }
    for (const auto& [label, count] : needed) {
        const auto it = candidates.find(label);
        if (it == candidates.end() || it->second.size() < count) return std::nullopt;
    }

    Rng rng(seed);
    std::map<std::string, std::vector<std::string>> drawn;
    for (const auto& [label, count] : needed) {
        const auto& pool = candidates[label];
        for (auto i : rng.sample_without_replacement(pool.size(), count)) drawn[label].push_back(pool[i]);
    }
    std::map<std::string, std::size_t> cursor;
    std::vector<std::string> out;
    out.reserve(reference_ids.size());
    for (const auto& label : ref_labels) out.push_back(drawn[label][cursor[label]++]);
    return out;
}

SemanticMatch iterative_semantic_search(std::span<const std::string> reference_ids,
                                        std::span<const std::string> bottom_pool, const Taxonomy& taxonomy,
                                        const DatasetManifest& manifest, std::uint64_t seed) {
    for (int level = 0; level <= kMaxSemanticLevel; ++level) {
        if (auto ids = find_matched_set(reference_ids, bottom_pool, level, taxonomy, manifest,
                                        derive_seed(seed, static_cast<std::uint64_t>(level)))) {
            return {level, std::move(*ids), false};
        }
    }
    return {kMaxSemanticLevel, {}, true};
}

Taxonomy synthetic_taxonomy(std::size_t num_labels, int levels, std::uint64_t seed) {
    Rng rng(seed);
    Taxonomy t;
    std::vector<std::string> frontier;
    for (std::size_t i = 0; i < num_labels; ++i) frontier.push_back(label_node(static_cast<std::int64_t>(i)));
    std::vector<std::pair<std::string, std::string>> edges;
    std::vector<std::string> roots;
    for (int lv = 1; lv <= levels && !frontier.empty(); ++lv) {
        rng.shuffle(frontier);
        std::vector<std::string> next;
        std::size_t i = 0;
        while (i < frontier.size()) {
            const std::size_t group = 2 + rng.uniform_index(3);
            const std::string parent = "n" + std::to_string(lv) + "_" + std::to_string(next.size());
            for (std::size_t g = 0; g < group && i < frontier.size(); ++g, ++i) edges.emplace_back(frontier[i], parent);
            // Occasionally stop a branch early so it becomes a shallow root.
            if (lv < levels && rng.uniform01() < 0.1) {
                roots.push_back(parent);
            } else {
                next.push_back(parent);
            }
        }
        frontier = std::move(next);
    }
    roots.insert(roots.end(), frontier.begin(), frontier.end());
    for (const auto& r : roots) t.add(r);
    for (const auto& [child, parent] : edges) t.add(child, parent);
    t.validate();
    return t;
}

}  // namespace repcmp
