#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "aligndet/autograd.hpp"
#include "aligndet/detector.hpp"
#include "aligndet/scenes.hpp"
#include "aligndet/textspace.hpp"

namespace aligndet {

inline constexpr int kCheckpointFormatVersion = 1;

/// Named-tensor archive.
///
/// Layout: 8-byte magic "ALDTCKPT", u64 little-endian header length, a JSON
/// header {format_version, tensors: [{name, rows, cols, offset}], meta},
/// then the tensor payloads as contiguous little-endian IEEE-754 doubles in
/// row-major order. Offsets are in bytes from the start of the payload.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ad::Matrix> tensors;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);
/// Header only (manifest and meta), without reading payloads.
nlohmann::json read_archive_header(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SplitSpec& s);
SplitSpec split_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Category& c);
Category category_from_json(const nlohmann::json& j);

/// Stores the category space: names and seed in meta, prototypes as tensors.
void store_space(Archive& a, const CategorySpace& space);
CategorySpace load_space(const Archive& a);

/// Parameters live under "param/<name>".
void store_params(Archive& a, const ParameterStore& params);
/// Copies archived parameters into `params`. Every archived tensor must exist
/// with the same shape; every model parameter must be archived except those
/// whose names start with one of `optional_prefixes`. Returns names loaded.
std::vector<std::string> load_params(const Archive& a, ParameterStore& params,
                                     const std::vector<std::string>& optional_prefixes = {});

}  // namespace aligndet
