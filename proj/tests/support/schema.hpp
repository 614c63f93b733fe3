#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

// A JSON Schema validator covering the keywords used by the bundled schemas.
namespace banet::testing {

/// Validates `doc` against `schema` and returns one message per violation,
/// each prefixed with the JSON pointer of the offending value. Supported:
/// type, enum, const, properties, required, additionalProperties (boolean),
/// items, prefixItems, minItems, maxItems, minimum, maximum,
/// exclusiveMinimum, exclusiveMaximum, pattern.
std::vector<std::string> validate(const nlohmann::json& doc, const nlohmann::json& schema);

nlohmann::json load_json(const std::filesystem::path& path);

// CSV text as {"header": [...], "rows": [[...], ...]}; numeric cells become
// numbers and empty cells null.
nlohmann::json csv_document(std::string_view text);

std::filesystem::path schema_path(std::string_view name);

}  // namespace banet::testing
