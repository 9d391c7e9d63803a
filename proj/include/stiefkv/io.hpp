#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stiefkv/decoder.hpp"
#include "stiefkv/stief.hpp"
#include "stiefkv/surface.hpp"

namespace stiefkv::io {

/// Writes to `path.tmp` and renames over `path`. The parent directory must
/// exist; failures throw IoError naming the path.
void write_atomic(const std::string &path, std::string_view bytes);
std::string read_file(const std::string &path);

std::uint32_t crc32(std::string_view bytes);

// Binary containers. Every one starts with a four-byte magic, a u16
// version, a u8 endianness flag (1 = little) and a reserved zero byte,
// followed by the config fingerprint, and ends with a CRC-32 of all the
// preceding bytes. All integers and reals are little-endian.

inline constexpr std::uint16_t kFormatVersion = 1;

/// Per-layer layer inputs: input[l][s] is seq_len x d_model.
struct Activations {
  std::uint64_t fingerprint = 0;
  std::vector<std::vector<Matrix>> input;
};

/// "STA1": u64 L, n_sequences, seq_len, d_model, then f64 values ordered
/// layer, sequence, token, feature.
std::string encode_activations(const Activations &a);
Activations decode_activations(std::string_view bytes);

/// "STW1": u32 length + decoder config JSON, then per layer eleven
/// tensors (w_q, w_k, w_v, w_o, w_gate, w_up, w_down, norm1 gain/offset,
/// norm2 gain/offset) as u64 rows, u64 cols, row-major f64.
std::string encode_weights(const decoder::DecoderStack &stack, std::uint64_t fingerprint);
decoder::DecoderStack decode_weights(std::string_view bytes, std::uint64_t &fingerprint);

/// "STF1": u32 L, d_h, H_KV, |R_K|, R_K..., |R_V|, R_V...; then per layer,
/// per key rank a provenance tag byte and the d_h x r key basis, per value
/// rank a tag byte and H_KV value bases. Bases are column-major f64.
std::string encode_bases(const stief::BasisStore &store, std::uint64_t fingerprint);
stief::BasisStore decode_bases(std::string_view bytes, std::uint64_t &fingerprint);

std::uint8_t provenance_tag(const std::string &provenance);
std::string provenance_name(std::uint8_t tag);

/// External dump: u64 n_tokens, u64 d_model, u64 L, then L x n_tokens x
/// d_model f64 (layer-major, row-major). Tokens are cut into sequences of
/// `seq_len`. Throws FormatError with the offending byte offset.
std::vector<std::vector<Matrix>> decode_external_dump(std::string_view bytes, std::size_t d_model,
                                                      std::size_t n_layers, std::size_t seq_len);

/// Records for every layer from per-layer inputs.
std::vector<std::vector<decoder::ActivationRecord>>
records_from_inputs(const decoder::DecoderStack &stack,
                    const std::vector<std::vector<Matrix>> &inputs);

// JSON artifacts.

struct SurfaceFile {
  std::uint64_t fingerprint = 0;
  std::string method;
  std::size_t d_h = 0;
  std::vector<surface::ErrorSurface> surfaces;
};

struct AllocationFile {
  std::uint64_t fingerprint = 0;
  std::string method;
  std::size_t d_h = 0;
  std::vector<double> weights; ///< weighted policy only
  surface::RankAllocation allocation;
};

std::string encode_surface(const SurfaceFile &f);
SurfaceFile decode_surface(std::string_view text);

/// The "layers" array of an allocation document.
nlohmann::ordered_json allocation_layers_json(const surface::RankAllocation &a);
std::string encode_allocation(const AllocationFile &f);
AllocationFile decode_allocation(std::string_view text);

/// Throws StaleArtifactError when `found` differs from `expected`.
void check_fingerprint(std::uint64_t expected, std::uint64_t found, const std::string &what);

} // namespace stiefkv::io
