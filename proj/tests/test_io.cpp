#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>

#include "stiefkv/config.hpp"
#include "stiefkv/errors.hpp"
#include "stiefkv/io.hpp"

using namespace stiefkv;
namespace la = stiefkv::linalg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

decoder::DecoderStack tiny_stack(decoder::MlpKind mlp = decoder::MlpKind::silu_gated) {
  decoder::DecoderConfig c;
  c.d_model = 8;
  c.n_heads_q = 2;
  c.n_heads_kv = 1;
  c.d_h = 4;
  c.d_ff = 12;
  c.n_layers = 2;
  c.mlp_kind = mlp;
  Rng rng(3);
  return decoder::init_stack(c, rng);
}

stief::BasisStore tiny_store(const std::string &provenance = "k_svd") {
  stief::BasisStore s;
  s.provenance = provenance;
  s.d_h = 4;
  s.n_heads_kv = 2;
  s.ranks_k = {2, 4};
  s.ranks_v = {3};
  Rng rng(9);
  for (int l = 0; l < 2; ++l) {
    stief::BasisStore::Layer layer;
    for (auto r : s.ranks_k)
      layer.key.push_back(la::random_orthonormal(4, r, rng));
    layer.value.push_back({la::random_orthonormal(4, 3, rng), la::random_orthonormal(4, 3, rng)});
    s.layers.push_back(layer);
  }
  return s;
}

std::string le64(std::uint64_t v) {
  std::string s;
  for (int i = 0; i < 8; ++i)
    s.push_back(char((v >> (8 * i)) & 0xff));
  return s;
}

fs::path scratch(const char *name) {
  fs::path p = fs::temp_directory_path() / ("stiefkv_io_" + std::string(name));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

} // namespace

TEST_CASE("crc32 check value") {
  CHECK(io::crc32("123456789") == 0xCBF43926u);
  CHECK(io::crc32("") == 0u);
}

TEST_CASE("config defaults and round trip") {
  config::RunConfig c;
  CHECK(c.calibration.n_sequences == 32);
  CHECK(c.calibration.seq_len == 128);
  CHECK(c.decoder.n_layers == 4);
  CHECK(c.decoder.d_h == 16);
  CHECK(c.candidate_ranks() == std::vector<std::size_t>{8, 10, 11, 13, 14});
  CHECK(c.middle_rank() == 11);
  CHECK_NOTHROW(c.validate());

  const std::string text = config::dump(c);
  auto back = config::from_json(json::parse(text));
  CHECK(config::dump(back) == text);

  c.decoder.norm_kind = decoder::NormKind::layer_norm;
  c.decoder.mlp_kind = decoder::MlpKind::gelu;
  c.allocation.policy = "weighted_pareto";
  c.allocation.weights = {1.0, 2.0, 2.0, 1.0};
  c.diagnostics.methods = {"eigen"};
  c.set_seed(42);
  auto again = config::from_json(json::parse(config::dump(c)));
  CHECK(config::dump(again) == config::dump(c));
  CHECK(again.train.seed == 42);

  // Partial documents take defaults.
  auto partial = config::from_json(json::parse(R"({"calibration": {"seed": 5}})"));
  CHECK(partial.calibration.seed == 5);
  CHECK(partial.train.seed == 5);
  CHECK(partial.decoder.d_model == 64);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"decoder": {"d_modle": 4}})")), ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"extra": 1})")), ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"decoder": {"d_model": "big"}})")),
                  ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"decoder": {"d_model": -3}})")), ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"decoder": {"d_model": 63}})")), ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"allocation": {"epsilon": 0}})")),
                  ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"allocation": {"policy": "greedy"}})")),
                  ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse(R"({"decoder": {"norm": "batch"}})")),
                  ConfigError);
  CHECK_THROWS_AS(config::from_json(json::parse("[1]")), ConfigError);
  CHECK_THROWS_AS(config::load("/nonexistent/config.json"), IoError);
}

TEST_CASE("fingerprint covers artifact fields only") {
  config::RunConfig a;
  const auto fp = config::fingerprint(a);
  CHECK(fp == config::fingerprint(a));
  CHECK(config::fingerprint_hex(fp).size() == 16);
  config::RunConfig b = a;
  b.allocation.epsilon = 0.09;
  b.diagnostics.data = "calibration";
  CHECK(config::fingerprint(b) == fp);
  b.set_seed(1);
  CHECK(config::fingerprint(b) != fp);
  config::RunConfig c = a;
  c.train.max_epochs = 3;
  CHECK(config::fingerprint(c) != fp);
  // Standard FNV-1a test vector.
  CHECK(config::fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("basis file round trip and corruption") {
  const auto store = tiny_store("eigen");
  const std::string bytes = io::encode_bases(store, 0x1234);
  std::uint64_t fp = 0;
  const auto back = io::decode_bases(bytes, fp);
  CHECK(fp == 0x1234);
  CHECK(back.provenance == "eigen");
  CHECK(back.ranks_k == store.ranks_k);
  CHECK(back.ranks_v == store.ranks_v);
  CHECK(back.layers[1].key[0] == store.layers[1].key[0]);
  CHECK(back.layers[0].value[0][1] == store.layers[0].value[0][1]);
  CHECK(io::encode_bases(back, fp) == bytes);

  // Header 16 + 5 u32 counts... + payload + CRC.
  const std::size_t payload = 2 * ((1 + 4 * 2 * 8) + (1 + 4 * 4 * 8) + (1 + 2 * 4 * 3 * 8));
  CHECK(bytes.size() == 16 + 4 * 3 + 4 + 2 * 4 + 4 + 1 * 4 + payload + 4);

  for (std::size_t i = 0; i < bytes.size(); ++i)
    for (int bit : {0, 7}) {
      std::string bad = bytes;
      bad[i] = char(bad[i] ^ (1 << bit));
      CHECK_THROWS_AS(io::decode_bases(bad, fp), FormatError);
    }
  CHECK_THROWS_AS(io::decode_bases(bytes.substr(0, bytes.size() - 1), fp), FormatError);
  CHECK_THROWS_AS(io::decode_bases("", fp), FormatError);
  CHECK_THROWS_AS(io::decode_bases(bytes + "x", fp), FormatError);

  for (const char *p : {"stief", "k_svd", "eigen", "kq_svd"})
    CHECK(io::provenance_name(io::provenance_tag(p)) == p);
  CHECK_THROWS_AS(io::encode_bases(tiny_store("bogus"), 0), UsageError);
}

TEST_CASE("activation and weight files") {
  const auto stack = tiny_stack();
  Rng rng(4);
  io::Activations a;
  a.fingerprint = 77;
  auto inputs = decoder::gaussian_inputs(3, 5, 8, rng);
  a.input = {inputs, inputs};
  const std::string bytes = io::encode_activations(a);
  CHECK(bytes.size() == 16 + 32 + 2 * 3 * 5 * 8 * 8 + 4);
  const auto back = io::decode_activations(bytes);
  CHECK(back.fingerprint == 77);
  CHECK(back.input[1][2] == inputs[2]);
  CHECK(io::encode_activations(back) == bytes);
  std::string bad = bytes;
  bad[40] ^= 1;
  CHECK_THROWS_AS(io::decode_activations(bad), FormatError);

  for (auto mlp : {decoder::MlpKind::silu_gated, decoder::MlpKind::gelu}) {
    const auto s = tiny_stack(mlp);
    std::uint64_t fp = 0;
    const std::string w = io::encode_weights(s, 99);
    const auto again = io::decode_weights(w, fp);
    CHECK(fp == 99);
    CHECK(again.config.mlp_kind == mlp);
    CHECK(again.layers.size() == 2);
    CHECK(again.layers[1].w_o == s.layers[1].w_o);
    CHECK(again.layers[0].w_gate == s.layers[0].w_gate);
    CHECK(io::encode_weights(again, fp) == w);
  }
  std::uint64_t fp = 0;
  CHECK_THROWS_AS(io::decode_weights(bytes, fp), FormatError);
}

TEST_CASE("external activation dump") {
  std::string dump = le64(6) + le64(8) + le64(2);
  for (int i = 0; i < 2 * 6 * 8; ++i) {
    const double v = 0.25 * i;
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    dump += le64(u);
  }
  auto layers = io::decode_external_dump(dump, 8, 2, 3);
  REQUIRE(layers.size() == 2);
  REQUIRE(layers[0].size() == 2);
  CHECK(layers[0][0](0, 1) == 0.25);
  CHECK(layers[1][1](2, 7) == 0.25 * (2 * 6 * 8 - 1));

  auto offset_of = [](auto fn) -> std::size_t {
    try {
      fn();
    } catch (const FormatError &e) {
      return e.offset();
    }
    return std::size_t(-1);
  };
  CHECK(offset_of([&] { io::decode_external_dump(dump, 8, 2, 4); }) == 0);
  CHECK(offset_of([&] { io::decode_external_dump(dump, 9, 2, 3); }) == 8);
  CHECK(offset_of([&] { io::decode_external_dump(dump, 8, 3, 3); }) == 16);
  CHECK(offset_of([&] { io::decode_external_dump(dump.substr(0, dump.size() - 3), 8, 2, 3); }) ==
        dump.size() - 3);
  CHECK(offset_of([&] { io::decode_external_dump(dump + "zz", 8, 2, 3); }) == dump.size());
  CHECK(offset_of([&] { io::decode_external_dump(dump.substr(0, 5), 8, 2, 3); }) == 0);
}

TEST_CASE("records from per-layer inputs match the chained capture") {
  const auto stack = tiny_stack();
  Rng rng(5);
  const auto inputs = decoder::gaussian_inputs(2, 6, 8, rng);
  const auto chained = decoder::capture_calibration(stack, inputs);
  std::vector<std::vector<Matrix>> per_layer(2);
  for (std::size_t l = 0; l < 2; ++l)
    for (const auto &r : chained[l])
      per_layer[l].push_back(r.layer_input);
  const auto records = io::records_from_inputs(stack, per_layer);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t s = 0; s < 2; ++s)
      CHECK(records[l][s].layer_output == chained[l][s].layer_output);
}

TEST_CASE("surface and allocation documents") {
  io::SurfaceFile f;
  f.fingerprint = 0xfeedULL;
  f.method = "stief";
  f.d_h = 8;
  surface::ErrorSurface s;
  s.layer = 0;
  s.d_h = 8;
  s.ranks_k = {4, 8};
  s.ranks_v = {4, 8};
  s.delta = {{0.1 / 3.0, 0.02}, {0.03, 0.0}};
  f.surfaces = {s};
  const std::string text = io::encode_surface(f);
  const auto back = io::decode_surface(text);
  CHECK(back.fingerprint == 0xfeedULL);
  CHECK(back.surfaces[0].delta == s.delta);
  CHECK(io::encode_surface(back) == text);
  CHECK_THROWS_AS(io::decode_surface("{"), FormatError);
  CHECK_THROWS_AS(io::decode_surface(R"({"format": "other"})"), FormatError);

  io::AllocationFile a;
  a.fingerprint = 0xfeedULL;
  a.method = "stief";
  a.d_h = 8;
  a.allocation = surface::allocate_pareto(f.surfaces, 0.025);
  const std::string at = io::encode_allocation(a);
  const auto ab = io::decode_allocation(at);
  CHECK(ab.allocation.layers[0].r_k == a.allocation.layers[0].r_k);
  CHECK(io::encode_allocation(ab) == at);
  CHECK(json::parse(at)["aggregate_ratio"].get<double>() ==
        surface::aggregate_ratio(a.allocation, 8));

  CHECK_NOTHROW(io::check_fingerprint(1, 1, "x"));
  CHECK_THROWS_AS(io::check_fingerprint(1, 2, "x"), StaleArtifactError);
}

TEST_CASE("atomic writes") {
  const auto dir = scratch("atomic");
  const std::string path = (dir / "a.bin").string();
  io::write_atomic(path, "hello");
  CHECK(io::read_file(path) == "hello");
  io::write_atomic(path, "bye");
  CHECK(io::read_file(path) == "bye");
  CHECK_FALSE(fs::exists(path + ".tmp"));
  CHECK_THROWS_AS(io::write_atomic((dir / "missing" / "a.bin").string(), "x"), IoError);
  CHECK_THROWS_AS(io::read_file((dir / "nope").string()), IoError);
  fs::remove_all(dir);
}
