#pragma once

// Validator for the JSON-schema subset used by the run configuration:
// type, properties, required, additionalProperties (false), enum, minimum,
// maximum, exclusiveMinimum, exclusiveMaximum, items, minItems.

#include <json.hpp>

#include <string>

#include "stss/error.hpp"

namespace stss {

namespace detail {

inline bool json_type_matches(const nlohmann::json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

inline void validate_node(const nlohmann::json& value, const nlohmann::json& schema, const std::string& where) {
  auto fail = [&](const std::string& why) { throw InputError("config " + where + ": " + why); };
  if (schema.contains("type") && !json_type_matches(value, schema["type"].get<std::string>())) {
    fail("expected " + schema["type"].get<std::string>());
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == value;
    if (!found) fail("value " + value.dump() + " is not one of " + schema["enum"].dump());
  }
  if (value.is_number()) {
    const double x = value.get<double>();
    if (schema.contains("minimum") && x < schema["minimum"].get<double>()) fail("below minimum");
    if (schema.contains("maximum") && x > schema["maximum"].get<double>()) fail("above maximum");
    if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>()) {
      fail("must be greater than " + schema["exclusiveMinimum"].dump());
    }
    if (schema.contains("exclusiveMaximum") && x >= schema["exclusiveMaximum"].get<double>()) {
      fail("must be less than " + schema["exclusiveMaximum"].dump());
    }
  }
  if (value.is_object()) {
    const nlohmann::json props = schema.value("properties", nlohmann::json::object());
    if (schema.contains("required")) {
      for (const auto& key : schema["required"]) {
        if (!value.contains(key.get<std::string>())) fail("missing required key '" + key.get<std::string>() + "'");
      }
    }
    for (const auto& [key, child] : value.items()) {
      if (props.contains(key)) {
        validate_node(child, props[key], where + "." + key);
      } else if (schema.contains("additionalProperties") && schema["additionalProperties"] == false) {
        fail("unknown key '" + key + "'");
      }
    }
  }
  if (value.is_array()) {
    if (schema.contains("minItems") && value.size() < schema["minItems"].get<std::size_t>()) fail("too few items");
    if (schema.contains("items")) {
      for (std::size_t k = 0; k < value.size(); ++k) {
        validate_node(value[k], schema["items"], where + "[" + std::to_string(k) + "]");
      }
    }
  }
}

}  // namespace detail

/// Throws InputError naming the first offending path.
inline void validate_json(const nlohmann::json& value, const nlohmann::json& schema) {
  detail::validate_node(value, schema, "$");
}

}  // namespace stss
