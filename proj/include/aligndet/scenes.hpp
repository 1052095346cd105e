#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aligndet/geometry.hpp"
#include "aligndet/image.hpp"
#include "aligndet/rng.hpp"
#include "aligndet/textspace.hpp"

namespace aligndet {

inline constexpr int kSceneSchemaVersion = 1;

struct Annotation {
  Boxd box;
  Category category;

  bool operator==(const Annotation&) const = default;
};

struct Scene {
  Image image;
  std::vector<Annotation> annotations;
  std::uint64_t scene_id = 0;
  std::uint64_t seed = 0;

  bool operator==(const Scene&) const = default;
};

/// Category split for compositional zero-shot evaluation.
struct SplitSpec {
  std::vector<std::string> shapes;
  std::vector<std::string> colors;
  std::vector<Category> train_combos;
  std::vector<Category> heldout_combos;

  /// 4 shapes x 4 colors; the held-out diagonal pairs every shape with a
  /// color it never shows during training.
  static SplitSpec default_split();
  /// Throws ValidationError unless the split is disjoint and every shape and
  /// color occurs in some training combination.
  void validate() const;
  bool operator==(const SplitSpec&) const = default;
};

enum class SplitKind { train, heldout };

struct RenderConfig {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 5;
  int min_radius = 5;  ///< pixels; every shape's box is [c - r, c + r]
  int max_radius = 12;
  double max_pair_iou = 0.3;
  int max_placement_attempts = 200;
  double background_level = 0.45;
  double background_noise = 0.06;
};

/// Renders one scene from the combos of `kind`. Deterministic in `seed`.
Scene render_scene(const SplitSpec& spec, SplitKind kind, std::uint64_t seed,
                   std::uint64_t scene_id = 0, const RenderConfig& cfg = {});

/// Scene i uses seed derive_seed(master_seed, i).
std::vector<Scene> generate_scenes(const SplitSpec& spec, SplitKind kind, int count,
                                   std::uint64_t master_seed, const RenderConfig& cfg = {});

/// Fraction of pixel (px, py) covered by the shape, by 4x4 supersampling.
double shape_coverage(const std::string& shape, double cx, double cy, double r, int px, int py);

/// Line-delimited dataset file: a header record then one scene per line
/// (base64 pixel payload, annotations, seed).
void write_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& path,
                   const std::string& provenance = {});
std::vector<Scene> read_dataset(const std::filesystem::path& path);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace aligndet
