#include "hpnet/taxonomy.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <regex>
#include <sstream>

#include <json.hpp>

namespace hpnet {

namespace {

using nlohmann::json;

// Line number of each "name" value in textual order.
std::vector<std::pair<std::string, std::size_t>> name_lines(std::string_view text) {
  std::vector<std::pair<std::string, std::size_t>> out;
  static const std::regex kNameKey(R"re("name"\s*:\s*("(?:[^"\\]|\\.)*"))re");
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kNameKey); it != std::sregex_iterator();
       ++it) {
    const auto pos = static_cast<std::size_t>(it->position(0));
    const std::size_t line = 1 + static_cast<std::size_t>(std::count(s.begin(), s.begin() + pos, '\n'));
    std::string name;
    try {
      name = json::parse((*it)[1].str()).get<std::string>();
    } catch (const json::exception&) {
      name = (*it)[1].str();
    }
    out.emplace_back(std::move(name), line);
  }
  return out;
}

std::size_t line_of(const std::vector<std::pair<std::string, std::size_t>>& lines,
                    const std::string& name, std::size_t occurrence) {
  std::size_t seen = 0;
  for (const auto& [n, line] : lines) {
    if (n == name && seen++ == occurrence) return line;
  }
  return 0;
}

}  // namespace

Taxonomy Taxonomy::parse(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const std::size_t line =
        1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + upto, '\n'));
    throw TaxonomyError(std::string("malformed JSON: ") + e.what(), line);
  }
  const auto lines = name_lines(text);

  Taxonomy t;
  std::vector<std::size_t> occurrences;  // per name, how many times seen so far
  std::function<void(const json&, std::size_t, std::size_t)> visit = [&](const json& obj,
                                                                          std::size_t parent,
                                                                          std::size_t depth) {
    if (!obj.is_object() || !obj.contains("name") || !obj["name"].is_string()) {
      const std::size_t line =
          parent == npos ? 1 : line_of(lines, t.nodes_[parent].name, 0);
      throw TaxonomyError("every node must be an object with a string \"name\"", line);
    }
    const std::string name = obj["name"].get<std::string>();
    std::size_t occurrence = 0;
    for (const auto& n : t.nodes_) occurrence += n.name == name ? 1 : 0;
    const std::size_t line = line_of(lines, name, occurrence);
    if (name.empty()) throw TaxonomyError("node name must be non-empty", line);
    if (occurrence > 0) {
      for (std::size_t a = parent; a != npos; a = t.nodes_[a].parent) {
        if (t.nodes_[a].name == name) {
          throw TaxonomyError("cycle: node '" + name + "' appears below itself", line);
        }
      }
      throw TaxonomyError("duplicate node name '" + name + "'", line);
    }
    const std::size_t index = t.nodes_.size();
    t.nodes_.push_back(Node{name, parent, depth, {}});
    if (parent != npos) t.nodes_[parent].children.push_back(index);

    if (obj.contains("children")) {
      const json& kids = obj["children"];
      if (!kids.is_array()) throw TaxonomyError("\"children\" of '" + name + "' must be an array", line);
      if (kids.empty() && parent == npos) {
        throw TaxonomyError("root '" + name + "' declares an empty children list", line);
      }
      for (const auto& kid : kids) visit(kid, index, depth + 1);
    } else if (parent == npos) {
      throw TaxonomyError("root '" + name + "' has no children", line);
    }
  };
  visit(doc, npos, 0);
  return t;
}

Taxonomy Taxonomy::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open taxonomy file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::optional<std::size_t> Taxonomy::find(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].name == name) return i;
  return std::nullopt;
}

std::size_t Taxonomy::index_of(std::string_view name) const {
  if (auto i = find(name)) return *i;
  throw std::out_of_range("unknown taxonomy node '" + std::string(name) + "'");
}

std::size_t Taxonomy::child_index(std::size_t parent, std::size_t child) const {
  const auto& kids = nodes_.at(parent).children;
  auto it = std::find(kids.begin(), kids.end(), child);
  return it == kids.end() ? npos : static_cast<std::size_t>(it - kids.begin());
}

// Nodes are stored in depth-first pre-order, so filtering preserves that order.
std::vector<std::size_t> Taxonomy::parents() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!nodes_[i].children.empty()) out.push_back(i);
  return out;
}

std::vector<std::size_t> Taxonomy::leaves() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].children.empty()) out.push_back(i);
  return out;
}

std::vector<std::size_t> Taxonomy::path_to(std::size_t node) const {
  std::vector<std::size_t> out;
  for (std::size_t n = node; n != root() && n != npos; n = nodes_.at(n).parent) out.push_back(n);
  std::reverse(out.begin(), out.end());
  return out;
}

HierarchicalLabel Taxonomy::label_of(std::size_t leaf) const {
  HierarchicalLabel label;
  for (std::size_t n : path_to(leaf)) label.path.push_back(nodes_[n].name);
  return label;
}

std::size_t Taxonomy::ancestor_at(std::size_t node, std::size_t depth) const {
  std::size_t n = node;
  while (n != npos && nodes_.at(n).depth > depth) n = nodes_[n].parent;
  if (n == npos || nodes_[n].depth != depth) throw std::out_of_range("ancestor_at: depth out of range");
  return n;
}

std::string Taxonomy::canonical_text() const {
  std::function<json(std::size_t)> build = [&](std::size_t i) {
    json obj;
    obj["name"] = nodes_[i].name;
    if (!nodes_[i].children.empty()) {
      json kids = json::array();
      for (std::size_t c : nodes_[i].children) kids.push_back(build(c));
      obj["children"] = std::move(kids);
    }
    return obj;
  };
  return build(root()).dump();
}

LabelCheck validate_label(const Taxonomy& taxonomy, const HierarchicalLabel& label) {
  if (label.path.empty()) return {false, "empty label path", "", ""};
  std::size_t current = taxonomy.root();
  for (const auto& name : label.path) {
    auto next = taxonomy.find(name);
    if (!next || taxonomy.node(*next).parent != current) {
      return {false, "invalid edge " + taxonomy.name(current) + "->" + name, taxonomy.name(current),
              name};
    }
    current = *next;
  }
  if (!taxonomy.is_leaf(current)) {
    return {false, "path ends at internal node " + taxonomy.name(current), taxonomy.name(current), ""};
  }
  return {};
}

LabelCheck validate_coarse_label(const Taxonomy& taxonomy, const HierarchicalLabel& label) {
  if (label.path.empty()) return {false, "empty label path", "", ""};
  auto coarse = taxonomy.find(label.path.front());
  if (!coarse || taxonomy.node(*coarse).parent != taxonomy.root()) {
    return {false, "invalid edge " + taxonomy.name(taxonomy.root()) + "->" + label.path.front(),
            taxonomy.name(taxonomy.root()), label.path.front()};
  }
  return {};
}

std::vector<std::size_t> resolve_label(const Taxonomy& taxonomy, const HierarchicalLabel& label) {
  if (auto check = validate_label(taxonomy, label); !check) {
    throw std::invalid_argument("invalid label: " + check.message);
  }
  std::vector<std::size_t> out;
  for (const auto& name : label.path) out.push_back(taxonomy.index_of(name));
  return out;
}

}  // namespace hpnet
