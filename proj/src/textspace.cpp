#include "aligndet/textspace.hpp"

#include <algorithm>
#include <set>

#include "aligndet/errors.hpp"

namespace aligndet {

namespace {

Eigen::MatrixXd random_unit_rows(int n, int d, Rng& rng) {
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
    m.row(i).normalize();
  }
  return m;
}

}  // namespace

CategorySpace::CategorySpace(std::vector<std::string> shapes, std::vector<std::string> colors,
                             int d_text, std::uint64_t seed)
    : shapes_(std::move(shapes)), colors_(std::move(colors)), seed_(seed) {
  if (d_text < 1) throw ValidationError("d_text must be positive");
  Rng rng(derive_seed(seed, 0x7e47));
  shape_protos_ = random_unit_rows(static_cast<int>(shapes_.size()), d_text, rng);
  color_protos_ = random_unit_rows(static_cast<int>(colors_.size()), d_text, rng);
}

CategorySpace::CategorySpace(std::vector<std::string> shapes, std::vector<std::string> colors,
                             Eigen::MatrixXd shape_prototypes, Eigen::MatrixXd color_prototypes,
                             std::uint64_t seed)
    : shapes_(std::move(shapes)),
      colors_(std::move(colors)),
      shape_protos_(std::move(shape_prototypes)),
      color_protos_(std::move(color_prototypes)),
      seed_(seed) {
  if (shape_protos_.rows() != static_cast<Eigen::Index>(shapes_.size()) ||
      color_protos_.rows() != static_cast<Eigen::Index>(colors_.size()) ||
      shape_protos_.cols() != color_protos_.cols())
    throw ShapeError("category prototypes do not match names");
}

CategorySpace CategorySpace::default_space(std::uint64_t seed, int d_text) {
  return CategorySpace({"circle", "square", "triangle", "cross"},
                       {"red", "green", "blue", "yellow"}, d_text, seed);
}

int CategorySpace::shape_index(const std::string& s) const {
  auto it = std::find(shapes_.begin(), shapes_.end(), s);
  if (it == shapes_.end()) throw UnknownCategory("shape '" + s + "'");
  return static_cast<int>(it - shapes_.begin());
}

int CategorySpace::color_index(const std::string& c) const {
  auto it = std::find(colors_.begin(), colors_.end(), c);
  if (it == colors_.end()) throw UnknownCategory("color '" + c + "'");
  return static_cast<int>(it - colors_.begin());
}

Eigen::VectorXd CategorySpace::embed(const Category& c) const {
  Eigen::VectorXd v =
      (shape_protos_.row(shape_index(c.shape)) + color_protos_.row(color_index(c.color)))
          .transpose();
  return v / v.norm();
}

std::vector<Category> CategorySpace::all_categories() const {
  std::vector<Category> out;
  for (const auto& s : shapes_)
    for (const auto& c : colors_) out.push_back({s, c});
  return out;
}

std::uint64_t CategorySpace::fingerprint() const {
  std::uint64_t h = fnv1a(shape_protos_.data(), sizeof(double) * shape_protos_.size());
  return fnv1a(color_protos_.data(), sizeof(double) * color_protos_.size(), h);
}

int PromptSet::index_of(const Category& c) const {
  for (int i = 0; i < size(); ++i)
    if (categories[static_cast<std::size_t>(i)] == c) return i;
  return -1;
}

PromptSet fixed_prompts(const CategorySpace& space, const std::vector<Category>& categories,
                        const std::vector<Category>& positives) {
  PromptSet ps;
  ps.categories = categories;
  ps.embeddings.resize(static_cast<Eigen::Index>(categories.size()), space.d_text());
  for (std::size_t i = 0; i < categories.size(); ++i) {
    ps.embeddings.row(static_cast<Eigen::Index>(i)) = space.embed(categories[i]).transpose();
    ps.positive_mask.push_back(std::find(positives.begin(), positives.end(), categories[i]) !=
                               positives.end());
  }
  return ps;
}

PromptSet sample_prompts(const CategorySpace& space, const std::vector<Category>& gt_categories,
                         const std::vector<Category>& label_space, int num_negatives, Rng& rng) {
  std::vector<Category> positives;
  for (const auto& c : gt_categories)
    if (std::find(positives.begin(), positives.end(), c) == positives.end())
      positives.push_back(c);

  std::vector<Category> pool;
  for (const auto& c : label_space)
    if (std::find(positives.begin(), positives.end(), c) == positives.end() &&
        std::find(pool.begin(), pool.end(), c) == pool.end())
      pool.push_back(c);
  if (num_negatives < 0 || static_cast<std::size_t>(num_negatives) > pool.size())
    throw InsufficientLabelSpace("requested " + std::to_string(num_negatives) +
                                 " negatives, only " + std::to_string(pool.size()) +
                                 " categories remain");

  // Partial Fisher-Yates draws without replacement.
  for (int i = 0; i < num_negatives; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  std::vector<Category> all = positives;
  all.insert(all.end(), pool.begin(), pool.begin() + num_negatives);
  rng.shuffle(all);
  return fixed_prompts(space, all, positives);
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace aligndet
