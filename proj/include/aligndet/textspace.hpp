#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aligndet/rng.hpp"

namespace aligndet {

/// A (shape, color) category name, e.g. ("circle", "red").
struct Category {
  std::string shape;
  std::string color;

  std::string name() const { return color + " " + shape; }
  auto operator<=>(const Category&) const = default;
};

/// Frozen compositional text-embedding space standing in for a pretrained
/// text encoder. Each shape and each color owns a random unit prototype; a
/// category embeds as the normalized sum of its two prototypes.
class CategorySpace {
 public:
  CategorySpace(std::vector<std::string> shapes, std::vector<std::string> colors, int d_text,
                std::uint64_t seed);

  /// Rebuild from stored prototypes (checkpoint loading).
  CategorySpace(std::vector<std::string> shapes, std::vector<std::string> colors,
                Eigen::MatrixXd shape_prototypes, Eigen::MatrixXd color_prototypes,
                std::uint64_t seed);

  static CategorySpace default_space(std::uint64_t seed = 7, int d_text = 32);

  Eigen::VectorXd embed(const Category& c) const;
  Eigen::VectorXd embed(const std::string& shape, const std::string& color) const {
    return embed(Category{shape, color});
  }

  int d_text() const { return static_cast<int>(shape_protos_.cols()); }
  std::uint64_t seed() const { return seed_; }
  const std::vector<std::string>& shapes() const { return shapes_; }
  const std::vector<std::string>& colors() const { return colors_; }
  const Eigen::MatrixXd& shape_prototypes() const { return shape_protos_; }
  const Eigen::MatrixXd& color_prototypes() const { return color_protos_; }

  /// Every (shape, color) combination, shape-major.
  std::vector<Category> all_categories() const;

  /// 64-bit digest of the prototype bytes.
  std::uint64_t fingerprint() const;

 private:
  int shape_index(const std::string& s) const;
  int color_index(const std::string& c) const;

  std::vector<std::string> shapes_;
  std::vector<std::string> colors_;
  Eigen::MatrixXd shape_protos_;  // one unit row per shape
  Eigen::MatrixXd color_protos_;  // one unit row per color
  std::uint64_t seed_;
};

struct PromptSet {
  std::vector<Category> categories;
  Eigen::MatrixXd embeddings;  ///< num_prompts x d_text
  std::vector<bool> positive_mask;

  int size() const { return static_cast<int>(categories.size()); }
  /// Index of `c` among the prompts, or -1.
  int index_of(const Category& c) const;
};

/// Builds a prompt set from an image's ground-truth categories
/// (deduplicated, all positive) plus `num_negatives` other categories drawn
/// uniformly without replacement from `label_space`, then shuffles.
PromptSet sample_prompts(const CategorySpace& space, const std::vector<Category>& gt_categories,
                         const std::vector<Category>& label_space, int num_negatives, Rng& rng);

/// All of `categories` as prompts in the given order (evaluation).
PromptSet fixed_prompts(const CategorySpace& space, const std::vector<Category>& categories,
                        const std::vector<Category>& positives = {});

/// FNV-1a over raw bytes.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace aligndet
