// SPDX-License-Identifier: Apache-2.0
#include "kasp/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "kasp/config.hpp"
#include "kasp/error.hpp"

namespace kasp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[5] = {'S', 'P', 'D', 'B', '1'};
constexpr std::size_t kPreamble = 5 + 4 + 8;
const std::string kMaskPrefix = "mask/";

struct Entry {
  std::string name;
  std::string dtype;
  Shape shape;
  const Tensor* tensor = nullptr;
  const std::vector<std::uint8_t>* bits = nullptr;
};

std::size_t dtype_bytes(const std::string& dtype, std::size_t numel) {
  if (dtype == "f64") return numel * 8;
  if (dtype == "f32") return numel * 4;
  return (numel + 7) / 8;
}

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

template <class T>
T get(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

[[noreturn]] void corrupt(std::size_t offset, const std::string& what) {
  throw CheckpointError("checkpoint corrupt at byte " + std::to_string(offset) + ": " + what);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const EncoderParams& params, const PruneMask* mask,
                                               const nlohmann::ordered_json& meta, SaveOptions options) {
  std::vector<Entry> entries;
  const char* dtype = options.f32 ? "f32" : "f64";
  for (const auto& [name, t] : params.named_tensors()) entries.push_back({name, dtype, t->shape(), t, nullptr});
  if (mask) {
    if (mask->size() != params.num_prunable()) throw ContractError("checkpoint: mask does not cover the model");
    for (std::size_t id = 0; id < mask->size(); ++id)
      entries.push_back(
          {kMaskPrefix + EncoderParams::prunable_name(id), "bitmask", mask->shapes[id], nullptr, &mask->matrices[id]});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.name < b.name; });

  Json index = Json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    const std::size_t nbytes = dtype_bytes(e.dtype, shape_numel(e.shape));
    index.push_back({{"name", e.name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  Json header{{"config", to_json(params.config)}, {"meta", meta}, {"tensors", index}, {"payload_bytes", offset}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 5);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& e : entries) {
    if (e.tensor) {
      for (double v : e.tensor->values()) {
        if (options.f32)
          put(out, static_cast<float>(v));
        else
          put(out, v);
      }
    } else {
      const auto& m = *e.bits;
      for (std::size_t i = 0; i < m.size(); i += 8) {
        std::uint8_t byte = 0;
        for (std::size_t b = 0; b < 8 && i + b < m.size(); ++b)
          if (m[i + b]) byte |= static_cast<std::uint8_t>(1u << b);
        out.push_back(byte);
      }
    }
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kMagic, 5) != 0) corrupt(0, "bad magic (expected SPDB1)");
  if (bytes.size() < kPreamble) corrupt(bytes.size(), "truncated preamble");
  const auto version = get<std::uint32_t>(bytes.data() + 5);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  const auto header_len = get<std::uint64_t>(bytes.data() + 9);
  if (header_len > bytes.size() - kPreamble)
    corrupt(kPreamble, "header of " + std::to_string(header_len) + " bytes runs past end of file (" +
                           std::to_string(bytes.size()) + " bytes)");
  const std::size_t payload_start = kPreamble + header_len;
  const std::size_t payload_size = bytes.size() - payload_start;

  Json header;
  try {
    header = Json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    corrupt(kPreamble, std::string("malformed header: ") + e.what());
  }

  Checkpoint ck;
  try {
    if (!header.is_object() || !header.contains("config") || !header.contains("tensors") ||
        !header["tensors"].is_array())
      corrupt(kPreamble, "header lacks config or tensor index");
    try {
      ck.params = EncoderParams::zeros(parse_encoder_config(header["config"], "config"));
    } catch (const ConfigError& e) {
      corrupt(kPreamble, std::string("invalid model config: ") + e.what());
    }
    if (header.contains("meta")) ck.meta = header["meta"];

    std::map<std::string, Tensor*> slots;
    for (auto& ref : ck.params.parameters()) slots[ref.name] = ref.tensor;
    std::map<std::string, std::size_t> mask_slots;
    for (std::size_t id = 0; id < ck.params.num_prunable(); ++id)
      mask_slots[kMaskPrefix + EncoderParams::prunable_name(id)] = id;

    PruneMask mask = full_mask(ck.params);
    std::size_t masks_seen = 0, params_seen = 0, expected_offset = 0;
    std::string previous;
    for (const auto& e : header["tensors"]) {
      const std::string name = e.at("name").get<std::string>();
      const std::string dtype = e.at("dtype").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (!previous.empty() && name <= previous) corrupt(kPreamble, "tensor index not sorted or has duplicate " + name);
      previous = name;
      if (dtype != "f64" && dtype != "f32" && dtype != "bitmask") corrupt(kPreamble, name + ": unknown dtype " + dtype);
      const std::size_t numel = shape_numel(shape);
      if (nbytes != dtype_bytes(dtype, numel)) corrupt(kPreamble, name + ": byte length does not match shape");
      if (offset != expected_offset)
        corrupt(payload_start + offset, name + ": offset " + std::to_string(offset) + " overlaps or leaves a gap");
      if (nbytes > payload_size - offset)
        corrupt(payload_start + payload_size, "payload truncated inside " + name + " (needs " +
                                                  std::to_string(offset + nbytes) + " bytes, has " +
                                                  std::to_string(payload_size) + ")");
      expected_offset = offset + nbytes;
      const std::uint8_t* src = bytes.data() + payload_start + offset;

      if (dtype == "bitmask") {
        auto it = mask_slots.find(name);
        if (it == mask_slots.end()) corrupt(payload_start + offset, "unexpected mask " + name);
        if (shape != mask.shapes[it->second]) corrupt(payload_start + offset, name + ": shape mismatch");
        auto& m = mask.matrices[it->second];
        for (std::size_t i = 0; i < numel; ++i) m[i] = (src[i / 8] >> (i % 8)) & 1u;
        if (numel % 8 && (src[nbytes - 1] >> (numel % 8)) != 0)
          corrupt(payload_start + offset + nbytes - 1, name + ": nonzero padding bits");
        ++masks_seen;
        continue;
      }
      auto it = slots.find(name);
      if (it == slots.end()) corrupt(payload_start + offset, "unexpected tensor " + name);
      if (shape != it->second->shape()) corrupt(payload_start + offset, name + ": shape mismatch");
      auto dst = it->second->mutable_values();
      for (std::size_t i = 0; i < numel; ++i)
        dst[i] = dtype == "f64" ? get<double>(src + 8 * i) : static_cast<double>(get<float>(src + 4 * i));
      ++params_seen;
    }
    if (params_seen != slots.size()) corrupt(kPreamble, "tensor index is missing model parameters");
    if (masks_seen != 0 && masks_seen != mask_slots.size()) corrupt(kPreamble, "mask covers only part of the model");
    if (expected_offset != payload_size)
      corrupt(payload_start + expected_offset, "trailing bytes after the last tensor");
    if (masks_seen) ck.mask = std::move(mask);
  } catch (const nlohmann::json::exception& e) {
    corrupt(kPreamble, std::string("malformed tensor index: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::string& path, const EncoderParams& params, const PruneMask* mask,
                     const nlohmann::ordered_json& meta, SaveOptions options) {
  const auto bytes = serialize_checkpoint(params, mask, meta, options);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace kasp
