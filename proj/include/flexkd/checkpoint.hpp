#pragma once

#include <string>

#include "json.hpp"

#include "flexkd/param_store.hpp"

namespace flexkd {

/// Checkpoints are JSON documents listing every store entry in registration
/// order. Values are serialized as C hex-float strings ("0x1.8p+3"), which
/// round-trip 64-bit floats bit-exactly; `meta` carries arbitrary caller
/// context (the resolved model/distill sections) for later validation.
void save_checkpoint(const ParamStore& store, const std::string& path,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Meta block of a checkpoint without touching the values.
nlohmann::json checkpoint_meta(const std::string& path);

/// Loads values into an existing store built from the same architecture.
/// Shape or name mismatches raise FormatError naming the parameter.
void load_checkpoint(ParamStore& store, const std::string& path);

std::string double_to_hex(double v);
double hex_to_double(const std::string& s);

}  // namespace flexkd
