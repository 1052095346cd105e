#include "aligndet/scenes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <nlohmann/json.hpp>

#include "aligndet/errors.hpp"

namespace aligndet {

using json = nlohmann::json;

SplitSpec SplitSpec::default_split() {
  SplitSpec s;
  s.shapes = {"circle", "square", "triangle", "cross"};
  s.colors = {"red", "green", "blue", "yellow"};
  for (std::size_t i = 0; i < s.shapes.size(); ++i)
    for (std::size_t j = 0; j < s.colors.size(); ++j) {
      Category c{s.shapes[i], s.colors[j]};
      (i == j ? s.heldout_combos : s.train_combos).push_back(c);
    }
  return s;
}

void SplitSpec::validate() const {
  auto known = [&](const Category& c) {
    return std::find(shapes.begin(), shapes.end(), c.shape) != shapes.end() &&
           std::find(colors.begin(), colors.end(), c.color) != colors.end();
  };
  if (train_combos.empty()) throw ValidationError("split has no training combinations");
  for (const auto& c : train_combos)
    if (!known(c)) throw ValidationError("unknown training combination '" + c.name() + "'");
  for (const auto& c : heldout_combos) {
    if (!known(c)) throw ValidationError("unknown held-out combination '" + c.name() + "'");
    if (std::find(train_combos.begin(), train_combos.end(), c) != train_combos.end())
      throw ValidationError("combination '" + c.name() + "' is both trained and held out");
  }
  for (const auto& s : shapes)
    if (std::none_of(train_combos.begin(), train_combos.end(),
                     [&](const Category& c) { return c.shape == s; }))
      throw ValidationError("shape '" + s + "' never appears in training");
  for (const auto& col : colors)
    if (std::none_of(train_combos.begin(), train_combos.end(),
                     [&](const Category& c) { return c.color == col; }))
      throw ValidationError("color '" + col + "' never appears in training");
}

namespace {

const std::map<std::string, std::array<double, 3>>& palette() {
  static const std::map<std::string, std::array<double, 3>> p{
      {"red", {0.90, 0.15, 0.15}},
      {"green", {0.15, 0.80, 0.20}},
      {"blue", {0.15, 0.30, 0.95}},
      {"yellow", {0.95, 0.90, 0.15}},
  };
  return p;
}

bool inside(const std::string& shape, double x, double y, double cx, double cy, double r) {
  const double dx = x - cx, dy = y - cy;
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "square") return std::abs(dx) <= r && std::abs(dy) <= r;
  if (shape == "triangle") {
    // apex (cx, cy - r), base from (cx - r, cy + r) to (cx + r, cy + r)
    if (dy < -r || dy > r) return false;
    const double half = r * (dy + r) / (2 * r);
    return std::abs(dx) <= half;
  }
  if (shape == "cross") {
    const double t = r / 3;
    return (std::abs(dx) <= r && std::abs(dy) <= t) || (std::abs(dx) <= t && std::abs(dy) <= r);
  }
  throw UnknownCategory("shape '" + shape + "' has no renderer");
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

double shape_coverage(const std::string& shape, double cx, double cy, double r, int px, int py) {
  constexpr int kSub = 4;
  int hits = 0;
  for (int sy = 0; sy < kSub; ++sy)
    for (int sx = 0; sx < kSub; ++sx)
      hits += inside(shape, px + (sx + 0.5) / kSub, py + (sy + 0.5) / kSub, cx, cy, r) ? 1 : 0;
  return static_cast<double>(hits) / (kSub * kSub);
}

Scene render_scene(const SplitSpec& spec, SplitKind kind, std::uint64_t seed,
                   std::uint64_t scene_id, const RenderConfig& cfg) {
  const auto& combos = kind == SplitKind::train ? spec.train_combos : spec.heldout_combos;
  if (combos.empty()) throw ValidationError("split has no combinations to render");
  Rng rng(seed);
  Scene scene;
  scene.scene_id = scene_id;
  scene.seed = seed;
  const int n = cfg.image_size;
  scene.image = Image(n, n, 3);

  std::vector<std::array<double, 3>> canvas(static_cast<std::size_t>(n * n));
  for (auto& px : canvas)
    for (auto& ch : px) ch = cfg.background_level + cfg.background_noise * (2 * rng.uniform() - 1);

  const int count = cfg.min_objects +
                    static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
  struct Placed {
    int cx, cy, r;
  };
  std::vector<Placed> placed;
  for (int k = 0; k < count; ++k) {
    const Category cat = combos[rng.below(combos.size())];
    bool ok = false;
    Placed p{};
    for (int attempt = 0; attempt < cfg.max_placement_attempts && !ok; ++attempt) {
      p.r = cfg.min_radius + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_radius - cfg.min_radius + 1)));
      p.cx = p.r + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 2 * p.r + 1)));
      p.cy = p.r + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 2 * p.r + 1)));
      const Boxd b{static_cast<double>(p.cx - p.r), static_cast<double>(p.cy - p.r),
                   static_cast<double>(p.cx + p.r), static_cast<double>(p.cy + p.r)};
      ok = std::all_of(placed.begin(), placed.end(), [&](const Placed& o) {
        const Boxd ob{static_cast<double>(o.cx - o.r), static_cast<double>(o.cy - o.r),
                      static_cast<double>(o.cx + o.r), static_cast<double>(o.cy + o.r)};
        return iou(b, ob) < cfg.max_pair_iou;
      });
    }
    if (!ok)
      throw PlacementFailure("object " + std::to_string(k) + " of scene " +
                             std::to_string(scene_id) + " could not be placed");
    placed.push_back(p);

    const auto& col = palette().at(cat.color);
    for (int y = std::max(0, p.cy - p.r - 1); y < std::min(n, p.cy + p.r + 1); ++y)
      for (int x = std::max(0, p.cx - p.r - 1); x < std::min(n, p.cx + p.r + 1); ++x) {
        const double a = shape_coverage(cat.shape, p.cx, p.cy, p.r, x, y);
        if (a <= 0) continue;
        auto& px = canvas[static_cast<std::size_t>(y * n + x)];
        for (int c = 0; c < 3; ++c) px[c] = (1 - a) * px[c] + a * col[c];
      }
    const double s = 1.0 / n;
    scene.annotations.push_back({{(p.cx - p.r) * s, (p.cy - p.r) * s, (p.cx + p.r) * s, (p.cy + p.r) * s}, cat});
  }

  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c)
        scene.image.raw(y, x, c) = to_byte(canvas[static_cast<std::size_t>(y * n + x)][c]);
  return scene;
}

std::vector<Scene> generate_scenes(const SplitSpec& spec, SplitKind kind, int count,
                                   std::uint64_t master_seed, const RenderConfig& cfg) {
  spec.validate();
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(render_scene(spec, kind, derive_seed(master_seed, static_cast<std::uint64_t>(i)),
                               static_cast<std::uint64_t>(i), cfg));
  return out;
}

// --- base64 ------------------------------------------------------------------

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  namespace it = boost::archive::iterators;
  using Enc = it::base64_from_binary<it::transform_width<std::vector<std::uint8_t>::const_iterator, 6, 8>>;
  std::string out(Enc(bytes.begin()), Enc(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  namespace it = boost::archive::iterators;
  using Dec = it::transform_width<it::binary_from_base64<std::string::const_iterator>, 8, 6>;
  if (text.size() % 4 != 0) throw IoError("base64 payload length is not a multiple of 4");
  std::size_t pad = 0;
  while (pad < text.size() && pad < 2 && text[text.size() - 1 - pad] == '=') ++pad;
  std::string body = text;
  std::fill(body.end() - static_cast<std::ptrdiff_t>(pad), body.end(), 'A');
  std::vector<std::uint8_t> out;
  try {
    for (Dec d(body.cbegin()), e(body.cend()); d != e; ++d) out.push_back(static_cast<std::uint8_t>(*d));
  } catch (const std::exception& ex) {
    throw IoError(std::string("invalid base64 payload: ") + ex.what());
  }
  out.resize(out.size() - pad);
  return out;
}

// --- dataset file ----------------------------------------------------------------

void write_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& path,
                   const std::string& provenance) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  json header{{"format", "aligndet-scenes"},
              {"schema_version", kSceneSchemaVersion},
              {"count", scenes.size()}};
  if (!provenance.empty()) header["provenance"] = provenance;
  os << header.dump() << '\n';
  for (const Scene& s : scenes) {
    json anns = json::array();
    for (const auto& a : s.annotations)
      anns.push_back({{"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}},
                      {"shape", a.category.shape},
                      {"color", a.category.color}});
    json rec{{"scene_id", s.scene_id},
             {"seed", s.seed},
             {"height", s.image.height},
             {"width", s.image.width},
             {"channels", s.image.channels},
             {"pixels", base64_encode(s.image.pixels)},
             {"annotations", std::move(anns)}};
    os << rec.dump() << '\n';
  }
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<Scene> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line)) throw IoError("'" + path.string() + "' is empty (no header)");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw SchemaVersionMismatch("unreadable header: " + std::string(e.what()));
  }
  if (header.value("format", "") != "aligndet-scenes")
    throw SchemaVersionMismatch("not a scene dataset file");
  if (header.value("schema_version", -1) != kSceneSchemaVersion)
    throw SchemaVersionMismatch("schema version " + header.value("schema_version", json(-1)).dump() +
                                ", expected " + std::to_string(kSceneSchemaVersion));
  const auto count = header.at("count").get<std::size_t>();

  std::vector<Scene> scenes;
  scenes.reserve(count);
  while (scenes.size() < count) {
    if (!std::getline(is, line))
      throw IoError("truncated dataset: " + std::to_string(scenes.size()) + " of " +
                    std::to_string(count) + " records");
    try {
      const json rec = json::parse(line);
      Scene s;
      s.scene_id = rec.at("scene_id").get<std::uint64_t>();
      s.seed = rec.at("seed").get<std::uint64_t>();
      s.image = Image(rec.at("height").get<int>(), rec.at("width").get<int>(),
                      rec.at("channels").get<int>());
      auto px = base64_decode(rec.at("pixels").get<std::string>());
      if (px.size() != s.image.pixels.size())
        throw IoError("pixel payload of scene " + std::to_string(s.scene_id) + " has wrong size");
      s.image.pixels = std::move(px);
      for (const auto& a : rec.at("annotations")) {
        const auto b = a.at("box");
        s.annotations.push_back({{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                  b.at(3).get<double>()},
                                 {a.at("shape").get<std::string>(), a.at("color").get<std::string>()}});
      }
      scenes.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw IoError("malformed record " + std::to_string(scenes.size()) + ": " + e.what());
    }
  }
  if (std::getline(is, line) && !line.empty())
    throw IoError("dataset has more records than its header declares");
  return scenes;
}

}  // namespace aligndet
