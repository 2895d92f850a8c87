#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hpnet {

class TaxonomyError : public std::runtime_error {
 public:
  TaxonomyError(const std::string& message, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + message), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Ordered node names from a child of the root down to a leaf.
struct HierarchicalLabel {
  std::vector<std::string> path;
  friend bool operator==(const HierarchicalLabel&, const HierarchicalLabel&) = default;
};

struct LabelCheck {
  bool ok = true;
  std::string message;
  std::string edge_parent;  // first invalid edge, when one exists
  std::string edge_child;
  explicit operator bool() const { return ok; }
};

/// Rooted class tree. Child order is the file order and fixes every
/// downstream logit index.
class Taxonomy {
 public:
  struct Node {
    std::string name;
    std::size_t parent;  // npos for the root
    std::size_t depth;   // root = 0
    std::vector<std::size_t> children;
  };
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  /// Parses {"name": ..., "children": [...]} recursively. Leaves have an
  /// absent or empty "children" array; the root must have children.
  static Taxonomy parse(std::string_view text);
  static Taxonomy load(const std::filesystem::path& path);

  std::size_t size() const { return nodes_.size(); }
  std::size_t root() const { return 0; }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  const std::string& name(std::size_t i) const { return nodes_.at(i).name; }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;  // throws std::out_of_range
  bool is_leaf(std::size_t i) const { return nodes_.at(i).children.empty(); }
  std::size_t num_children(std::size_t i) const { return nodes_.at(i).children.size(); }
  /// Position of child among parent's children, or npos.
  std::size_t child_index(std::size_t parent, std::size_t child) const;

  /// Internal nodes in depth-first order, root first.
  std::vector<std::size_t> parents() const;
  /// Leaves in depth-first order.
  std::vector<std::size_t> leaves() const;
  /// Node indices from a child of the root down to node (root excluded).
  std::vector<std::size_t> path_to(std::size_t node) const;
  HierarchicalLabel label_of(std::size_t leaf) const;
  /// Ancestor of node at the given depth (depth 1 = child of root).
  std::size_t ancestor_at(std::size_t node, std::size_t depth) const;

  /// Key-sorted compact JSON; identical for files that differ only in
  /// whitespace or key order.
  std::string canonical_text() const;

 private:
  std::vector<Node> nodes_;
};

/// Accepts iff the path follows parent->child edges from the root and ends at a leaf.
LabelCheck validate_label(const Taxonomy& taxonomy, const HierarchicalLabel& label);

/// Accepts iff the first path element is a child of the root. Used for
/// novel-class items whose fine class lies outside the taxonomy.
LabelCheck validate_coarse_label(const Taxonomy& taxonomy, const HierarchicalLabel& label);

/// Node indices for a valid label; throws std::invalid_argument otherwise.
std::vector<std::size_t> resolve_label(const Taxonomy& taxonomy, const HierarchicalLabel& label);

}  // namespace hpnet
