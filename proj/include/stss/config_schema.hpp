#pragma once

// Declared JSON schema of the run configuration; docs/config.schema.json is a copy.

namespace stss {

inline constexpr const char* kConfigSchema = R"schema({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "stss run configuration",
  "type": "object",
  "additionalProperties": false,
  "properties": {
    "schema_version": {"type": "integer", "enum": [1]},
    "seed": {"type": "integer", "minimum": 0},
    "problem": {
      "type": "object",
      "additionalProperties": false,
      "required": ["A", "Y"],
      "properties": {
        "A": {"type": "string"},
        "Y": {"type": "string"},
        "likelihood": {"type": "string", "enum": ["gaussian", "probit"]},
        "noise_variance": {"type": "number", "exclusiveMinimum": 0},
        "truth": {"type": "string"}
      }
    },
    "synthetic": {
      "type": "object",
      "additionalProperties": false,
      "required": ["D"],
      "properties": {
        "D": {"type": "integer", "minimum": 1},
        "T": {"type": "integer", "minimum": 1},
        "N": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 0},
        "snr_db": {"type": "number"},
        "signal": {"type": "string", "enum": ["prior", "cosine_clusters"]},
        "cluster_centers": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "cluster_half_width": {"type": "integer", "minimum": 0},
        "amplitude": {"type": "number", "exclusiveMinimum": 0},
        "normalize_columns": {"type": "boolean"},
        "likelihood": {"type": "string", "enum": ["gaussian", "probit"]},
        "label_noise": {"type": "number", "minimum": 0}
      }
    },
    "prior": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "nu0": {"type": "number"},
        "slab_mean": {"type": "number"},
        "slab_variance": {"type": "number", "exclusiveMinimum": 0},
        "spatial": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "kernel": {"type": "string", "enum": ["se", "diagonal"]},
            "lengthscale": {"type": "number", "exclusiveMinimum": 0},
            "magnitude": {"type": "number", "exclusiveMinimum": 0},
            "spacing": {"type": "number", "exclusiveMinimum": 0},
            "coordinates": {"type": "string"}
          }
        },
        "temporal": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "kernel": {"type": "string", "enum": ["se", "ar1", "identity"]},
            "lengthscale": {"type": "number", "exclusiveMinimum": 0},
            "alpha": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}
          }
        }
      }
    },
    "ep": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "max_iters": {"type": "integer", "minimum": 1},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "scheme": {"type": "string"},
        "v_inf": {"type": "number", "exclusiveMinimum": 0},
        "sigma_inf": {"type": "number", "exclusiveMinimum": 0},
        "init_site_var": {"type": "number", "exclusiveMinimum": 0},
        "cp_inner_repeats": {"type": "integer", "minimum": 1},
        "cp_damping_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
      }
    },
    "gridsearch": {
      "type": "object",
      "additionalProperties": false,
      "required": ["parameter"],
      "properties": {
        "parameter": {"type": "string", "enum": ["lengthscale", "nu0", "magnitude", "temporal_lengthscale"]},
        "values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "min": {"type": "number"},
        "max": {"type": "number"},
        "count": {"type": "integer", "minimum": 1}
      }
    },
    "phase_transition": {
      "type": "object",
      "additionalProperties": false,
      "required": ["ratios"],
      "properties": {
        "ratios": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "minItems": 1},
        "trials": {"type": "integer", "minimum": 1},
        "methods": {
          "type": "array",
          "items": {
            "type": "object",
            "additionalProperties": false,
            "required": ["name"],
            "properties": {
              "name": {"type": "string"},
              "scheme": {"type": "string"},
              "prior": {"type": "string", "enum": ["structured", "spatial", "diagonal"]}
            }
          }
        },
        "baselines": {"type": "array", "items": {"type": "string", "enum": ["omp", "oracle_ridge"]}},
        "ridge_lambda": {"type": "number", "minimum": 0}
      }
    }
  }
}
)schema";

}  // namespace stss
