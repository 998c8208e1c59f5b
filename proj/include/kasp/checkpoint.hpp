// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Binary model checkpoints.
 *
 * Layout: the 5 magic bytes "SPDB1", a little-endian u32 format version, a
 * little-endian u64 header length, the JSON header, then the payload. The
 * header holds the encoder configuration, optional free-form metadata and a
 * tensor index sorted by name; each entry gives dtype (f64, f32 or bitmask),
 * shape, payload offset and byte length. Entries are contiguous and in index
 * order. Masks are stored as "mask/<matrix name>" with one bit per weight,
 * row-major, least significant bit first.
 */
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kasp/encoder.hpp"
#include "kasp/mask.hpp"

namespace kasp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  EncoderParams params;
  std::optional<PruneMask> mask;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

struct SaveOptions {
  bool f32 = false;  // down-convert parameters to single precision
};

std::vector<std::uint8_t> serialize_checkpoint(const EncoderParams& params, const PruneMask* mask,
                                               const nlohmann::ordered_json& meta = nlohmann::ordered_json::object(),
                                               SaveOptions options = {});
/// Throws CheckpointError (naming the byte offset) on corrupt or truncated
/// input and CheckpointVersionError on a format version mismatch.
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const EncoderParams& params, const PruneMask* mask,
                     const nlohmann::ordered_json& meta = nlohmann::ordered_json::object(), SaveOptions options = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace kasp
