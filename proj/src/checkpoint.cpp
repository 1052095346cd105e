#include "aligndet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "aligndet/errors.hpp"

namespace aligndet {

using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'A', 'L', 'D', 'T', 'C', 'K', 'P', 'T'};
static_assert(std::endian::native == std::endian::little,
              "archive payloads are written in host order, which must be little-endian");

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  os.write(b, 8);
}

std::uint64_t get_u64(std::istream& is) {
  char b[8];
  if (!is.read(b, 8)) throw IoError("truncated archive header");
  std::uint64_t v;
  std::memcpy(&v, b, 8);
  return v;
}

json read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointMismatch("'" + path.string() + "' is not a checkpoint archive");
  const std::uint64_t n = get_u64(is);
  std::string text(n, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(n))) throw IoError("truncated archive header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt archive header: ") + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointFormatVersion)
    throw SchemaVersionMismatch("checkpoint format version " +
                                header.value("format_version", json(-1)).dump());
  return header;
}

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : archive.tensors) {
    manifest.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * 8;
  }
  const json header{{"format_version", kCheckpointFormatVersion},
                    {"tensors", std::move(manifest)},
                    {"meta", archive.meta}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 8);
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, m] : archive.tensors) {
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    os.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * 8));
  }
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

json read_archive_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return read_header(is, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  const json header = read_header(is, path);
  Archive a;
  a.meta = header.at("meta");
  const auto base = is.tellg();
  for (const auto& t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    is.seekg(base + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    if (!is.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * 8)))
      throw IoError("truncated payload for tensor '" + t.at("name").get<std::string>() + "'");
    a.tensors[t.at("name").get<std::string>()] = rm;
  }
  return a;
}

json to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},     {"channels", c.channels},
          {"patch_size", c.patch_size},     {"hidden_dim", c.hidden_dim},
          {"num_heads", c.num_heads},       {"ffn_dim", c.ffn_dim},
          {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
          {"num_object_queries", c.num_object_queries}, {"max_aux_queries", c.max_aux_queries},
          {"d_text", c.d_text},             {"anchor_size", c.anchor_size},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.num_object_queries = j.value("num_object_queries", c.num_object_queries);
  c.max_aux_queries = j.value("max_aux_queries", c.max_aux_queries);
  c.d_text = j.value("d_text", c.d_text);
  c.anchor_size = j.value("anchor_size", c.anchor_size);
  c.seed = j.value("seed", c.seed);
  return c;
}

json to_json(const Category& c) { return {{"shape", c.shape}, {"color", c.color}}; }

Category category_from_json(const json& j) {
  return {j.at("shape").get<std::string>(), j.at("color").get<std::string>()};
}

json to_json(const SplitSpec& s) {
  json tr = json::array(), ho = json::array();
  for (const auto& c : s.train_combos) tr.push_back(to_json(c));
  for (const auto& c : s.heldout_combos) ho.push_back(to_json(c));
  return {{"shapes", s.shapes}, {"colors", s.colors}, {"train_combos", tr}, {"heldout_combos", ho}};
}

SplitSpec split_from_json(const json& j) {
  SplitSpec s;
  s.shapes = j.at("shapes").get<std::vector<std::string>>();
  s.colors = j.at("colors").get<std::vector<std::string>>();
  for (const auto& c : j.at("train_combos")) s.train_combos.push_back(category_from_json(c));
  for (const auto& c : j.at("heldout_combos")) s.heldout_combos.push_back(category_from_json(c));
  return s;
}

void store_space(Archive& a, const CategorySpace& space) {
  a.meta["category_space"] = {{"shapes", space.shapes()},
                              {"colors", space.colors()},
                              {"d_text", space.d_text()},
                              {"seed", space.seed()},
                              {"fingerprint", space.fingerprint()}};
  a.tensors["space/shape_prototypes"] = space.shape_prototypes();
  a.tensors["space/color_prototypes"] = space.color_prototypes();
}

CategorySpace load_space(const Archive& a) {
  const json& j = a.meta.at("category_space");
  auto find = [&](const std::string& n) -> const ad::Matrix& {
    auto it = a.tensors.find(n);
    if (it == a.tensors.end()) throw CheckpointMismatch("archive lacks tensor '" + n + "'");
    return it->second;
  };
  CategorySpace space(j.at("shapes").get<std::vector<std::string>>(),
                      j.at("colors").get<std::vector<std::string>>(),
                      find("space/shape_prototypes"), find("space/color_prototypes"),
                      j.at("seed").get<std::uint64_t>());
  if (space.fingerprint() != j.at("fingerprint").get<std::uint64_t>())
    throw CheckpointMismatch("category space fingerprint differs from the stored value");
  return space;
}

void store_params(Archive& a, const ParameterStore& params) {
  for (const auto& [name, p] : params.all()) a.tensors["param/" + name] = p.value;
}

std::vector<std::string> load_params(const Archive& a, ParameterStore& params,
                                     const std::vector<std::string>& optional_prefixes) {
  const std::string pre = "param/";
  std::vector<std::string> loaded;
  for (const auto& [key, m] : a.tensors) {
    if (key.rfind(pre, 0) != 0) continue;
    const std::string name = key.substr(pre.size());
    if (!params.contains(name)) throw CheckpointMismatch("checkpoint tensor '" + name + "' is not a model parameter");
    auto& p = params.at(name);
    if (p.value.rows() != m.rows() || p.value.cols() != m.cols())
      throw CheckpointMismatch("shape of '" + name + "' differs: archive " + std::to_string(m.rows()) +
                               "x" + std::to_string(m.cols()) + ", model " +
                               std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()));
    p.value = m;
    loaded.push_back(name);
  }
  for (const auto& [name, _] : params.all()) {
    if (a.tensors.contains(pre + name)) continue;
    const bool optional = std::any_of(optional_prefixes.begin(), optional_prefixes.end(),
                                      [&](const std::string& o) { return name.rfind(o, 0) == 0; });
    if (!optional) throw CheckpointMismatch("checkpoint is missing parameter '" + name + "'");
  }
  return loaded;
}

}  // namespace aligndet
