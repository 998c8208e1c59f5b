// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "kasp/checkpoint.hpp"
#include "kasp/error.hpp"
#include "kasp/pruner.hpp"
#include "support.hpp"

using namespace kasp;

namespace {

EncoderConfig toy() {
  EncoderConfig c;
  c.num_layers = 2;
  c.hidden_size = 8;
  c.num_heads = 2;
  c.intermediate_size = 12;
  c.vocab_size = 20;
  c.max_seq_len = 8;
  c.num_labels = 3;
  return c;
}

// Matrix sizes that are not multiples of 8, so bitmasks carry padding.
EncoderConfig odd() {
  EncoderConfig c = toy();
  c.hidden_size = 6;
  c.num_heads = 3;
  c.intermediate_size = 5;
  return c;
}

std::string error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.what();
  }
  return "";
}

std::size_t payload_start(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 9, 8);
  return 17 + static_cast<std::size_t>(len);
}

}  // namespace

TEST_CASE("save, load, save again is byte identical") {
  for (const auto& cfg : {toy(), odd()}) {
    const auto p = init_params(cfg, 11);
    const PruneMask m = compute_mask(p, 0.7);
    const nlohmann::ordered_json meta{{"strategy", "prune_at_distill"}, {"step", 40}};
    const auto bytes = serialize_checkpoint(p, &m, meta);
    const auto ck = deserialize_checkpoint(bytes);
    CHECK(ck.params.bitwise_equal(p));
    CHECK(ck.params.config == cfg);
    REQUIRE(ck.mask.has_value());
    CHECK(*ck.mask == m);
    CHECK(ck.meta == meta);
    CHECK(serialize_checkpoint(ck.params, &*ck.mask, ck.meta) == bytes);

    const auto plain = serialize_checkpoint(p, nullptr);
    const auto back = deserialize_checkpoint(plain);
    CHECK_FALSE(back.mask.has_value());
    CHECK(serialize_checkpoint(back.params, nullptr) == plain);
  }
}

TEST_CASE("file round trip and unreadable paths") {
  const auto dir = std::filesystem::temp_directory_path() / "kasp_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  const auto p = init_params(toy(), 3);
  save_checkpoint(path, p, nullptr);
  const auto ck = load_checkpoint(path);
  CHECK(ck.params.bitwise_equal(p));
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
  CHECK_THROWS_AS(save_checkpoint((dir / "no" / "such" / "dir.ckpt").string(), p, nullptr), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("single precision round trip") {
  Rng rng(4);
  const auto p = kasp::testing::detail::random_params(toy(), rng, 1.0);
  const auto bytes = serialize_checkpoint(p, nullptr, {}, {true});
  const auto ck = deserialize_checkpoint(bytes);
  const auto a = p.named_tensors(), b = ck.params.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].second->numel(); ++j) {
      const double x = a[i].second->values()[j], y = b[i].second->values()[j];
      CHECK(y == static_cast<double>(static_cast<float>(x)));
      CHECK(std::abs(x - y) <= std::abs(x) * 6e-8);
    }
  CHECK(serialize_checkpoint(ck.params, nullptr, {}, {true}) == bytes);
  CHECK(serialize_checkpoint(p, nullptr).size() > bytes.size());
}

TEST_CASE("version and magic errors") {
  const auto p = init_params(toy(), 1);
  auto bytes = serialize_checkpoint(p, nullptr);
  auto wrong = bytes;
  wrong[5] = 2;
  CHECK_THROWS_AS(deserialize_checkpoint(wrong), CheckpointVersionError);
  try {
    deserialize_checkpoint(wrong);
  } catch (const CheckpointVersionError& e) {
    CHECK(std::string(e.what()).find("version 2") != std::string::npos);
  }
  wrong = bytes;
  wrong[0] = 'X';
  CHECK(error_of(wrong).find("byte 0") != std::string::npos);
  CHECK_FALSE(error_of({}).empty());
}

TEST_CASE("every truncation is reported, never misread") {
  const auto p = init_params(odd(), 2);
  const PruneMask m = compute_mask(p, 0.5);
  const auto bytes = serialize_checkpoint(p, &m);
  const std::size_t start = payload_start(bytes);
  std::vector<std::size_t> cuts;
  for (std::size_t n = 0; n < start + 64 && n < bytes.size(); ++n) cuts.push_back(n);
  for (std::size_t n = start; n < bytes.size(); n += 37) cuts.push_back(n);
  cuts.push_back(bytes.size() - 1);
  for (std::size_t n : cuts) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    INFO("truncated to ", n, " of ", bytes.size());
    CHECK_FALSE(error_of(cut).empty());
  }
  // payload truncation names an offset inside the payload
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(start + 100));
  CHECK(error_of(cut).find("truncated") != std::string::npos);

  auto longer = bytes;
  longer.push_back(0);
  CHECK(error_of(longer).find("trailing") != std::string::npos);
}

TEST_CASE("corrupt header bytes raise checkpoint errors only") {
  const auto p = init_params(odd(), 5);
  const PruneMask m = compute_mask(p, 0.5);
  const auto bytes = serialize_checkpoint(p, &m);
  const std::size_t start = payload_start(bytes);
  Rng rng(6);
  std::size_t rejected = 0;
  for (int trial = 0; trial < 300; ++trial) {
    auto bad = bytes;
    const std::size_t at = 17 + rng.below(start - 17);
    bad[at] = static_cast<std::uint8_t>(bad[at] ^ (1u << rng.below(8)));
    try {
      deserialize_checkpoint(bad);
    } catch (const CheckpointError&) {
      ++rejected;
    } catch (...) {
      FAIL("unexpected exception type at byte " << at);
    }
  }
  CHECK(rejected > 150);
}

TEST_CASE("mask padding bits must be clear") {
  const auto p = init_params(odd(), 7);
  const PruneMask m = full_mask(p);
  auto bytes = serialize_checkpoint(p, &m);
  const std::size_t start = payload_start(bytes);
  const auto header = nlohmann::json::parse(bytes.begin() + 17, bytes.begin() + static_cast<std::ptrdiff_t>(start));
  bool found = false;
  for (const auto& e : header["tensors"]) {
    if (e["name"] != "mask/layer.1.ffn.out.weight") continue;
    // 5 x 6 weights: 30 bits in 4 bytes
    CHECK(e["nbytes"] == 4);
    const std::size_t last = start + e["offset"].get<std::size_t>() + 3;
    bytes[last] = static_cast<std::uint8_t>(bytes[last] | 0x80);
    found = true;
  }
  REQUIRE(found);
  CHECK(error_of(bytes).find("padding") != std::string::npos);
}
