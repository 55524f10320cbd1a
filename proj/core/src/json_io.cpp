#include "json_io.hpp"

#include <fstream>

#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"

namespace stitchlab {

std::string to_hex(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int k = 15; k >= 0; --k) {
    out[static_cast<std::size_t>(k)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace stitchlab

namespace stitchlab::detail {

json tensor_to_json(const Tensor& t) {
  return json{{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const json& j, const std::string& name) {
  try {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != rows * cols) throw FormatError(name + ": data length does not match shape");
    return Tensor(rows, cols, std::move(data));
  } catch (const json::exception& e) {
    throw FormatError(name + ": " + e.what());
  }
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const json& doc, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

void require_format(const json& doc, const std::string& format, int version, const std::filesystem::path& path) {
  if (!doc.is_object() || doc.value("format", std::string{}) != format) {
    throw FormatError(path.string() + ": field 'format' is not '" + format + "'");
  }
  if (doc.value("version", -1) != version) {
    throw FormatError(path.string() + ": unsupported 'version' (expected " + std::to_string(version) + ")");
  }
}

const json& field(const json& doc, const std::string& key) {
  if (!doc.contains(key)) throw FormatError("missing field '" + key + "'");
  return doc.at(key);
}

}  // namespace stitchlab::detail
