#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "stitchlab/tensor.hpp"

namespace stitchlab::detail {

using nlohmann::json;

json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const json& j, const std::string& field);

/// Reads a JSON document; IoError if unreadable, FormatError if malformed.
json read_json_file(const std::filesystem::path& path);
/// Writes with two-space indentation and a trailing newline.
void write_json_file(const json& doc, const std::filesystem::path& path);

/// Checks the "format" and "version" header fields.
void require_format(const json& doc, const std::string& format, int version, const std::filesystem::path& path);

/// Fetches doc[key] or throws FormatError naming the key.
const json& field(const json& doc, const std::string& key);

}  // namespace stitchlab::detail
