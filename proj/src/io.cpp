#include "stiefkv/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "stiefkv/config.hpp"
#include "stiefkv/errors.hpp"

namespace stiefkv::io {

namespace fs = std::filesystem;
using nlohmann::json;
using ojson = nlohmann::ordered_json;

void write_atomic(const std::string &path, std::string_view bytes) {
  const fs::path target(path);
  const fs::path parent = target.has_parent_path() ? target.parent_path() : fs::path(".");
  std::error_code ec;
  if (!fs::is_directory(parent, ec))
    throw IoError("output directory '" + parent.string() + "' does not exist");
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw IoError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out)
      throw IoError("short write to '" + tmp + "'");
  }
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
  }
}

std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint32_t crc32(std::string_view bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  const auto *p = reinterpret_cast<const Bytef *>(bytes.data());
  std::size_t left = bytes.size();
  while (left > 0) {
    const uInt n = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    c = ::crc32(c, p, n);
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(c);
}

namespace {

class Writer {
public:
  void raw(std::string_view s) { buf_.append(s); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }

  void header(const char *magic, std::uint64_t fingerprint) {
    raw(std::string_view(magic, 4));
    u16(kFormatVersion);
    u8(1);
    u8(0);
    u64(fingerprint);
  }

  std::string finish() {
    u32(crc32(buf_));
    return std::move(buf_);
  }

private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i)
      buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
public:
  explicit Reader(std::string_view b, std::size_t end) : b_(b), end_(end) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

  void need(std::size_t n, const char *what) {
    if (n > remaining())
      throw FormatError(std::string("truncated ") + what, pos_);
  }
  std::uint64_t le(int n, const char *what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= std::uint64_t(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::uint8_t u8(const char *what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint32_t u32(const char *what) { return static_cast<std::uint32_t>(le(4, what)); }
  std::uint64_t u64(const char *what) { return le(8, what); }
  double f64(const char *what) { return std::bit_cast<double>(le(8, what)); }
  std::string_view bytes(std::size_t n, const char *what) {
    need(n, what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void expect_end() const {
    if (pos_ != end_)
      throw FormatError("unexpected trailing bytes", pos_);
  }

private:
  std::string_view b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

// Header and CRC checks shared by every container; returns a reader
// positioned after the fingerprint.
Reader open_container(std::string_view bytes, const char *magic, std::uint64_t &fingerprint) {
  constexpr std::size_t kHeader = 4 + 2 + 1 + 1 + 8;
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(magic, 4))
    throw FormatError(std::string("expected magic '") + magic + "'", 0);
  if (bytes.size() < kHeader + 4)
    throw FormatError("file too short", bytes.size());
  const std::size_t body = bytes.size() - 4;
  Reader r(bytes, bytes.size());
  r.bytes(4, "magic");
  const auto version = static_cast<std::uint16_t>(r.le(2, "version"));
  if (version != kFormatVersion)
    throw FormatError("unsupported format version " + std::to_string(version), 4);
  if (r.u8("endianness") != 1)
    throw FormatError("only little-endian payloads are supported", 6);
  r.u8("reserved");
  Reader tail(bytes, bytes.size());
  tail.bytes(body, "payload");
  const std::uint32_t stored = tail.u32("checksum");
  if (stored != crc32(bytes.substr(0, body)))
    throw FormatError("CRC-32 mismatch", body);
  Reader out(bytes, body);
  out.bytes(kHeader - 8, "header");
  fingerprint = out.u64("fingerprint");
  return out;
}

void put_matrix_rows(Writer &w, const Matrix &m) {
  w.u64(m.rows());
  w.u64(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      w.f64(m(i, j));
}

Matrix get_matrix_rows(Reader &r) {
  const std::size_t at = r.offset();
  const std::uint64_t rows = r.u64("tensor rows"), cols = r.u64("tensor cols");
  if (cols != 0 && rows > r.remaining() / 8 / cols)
    throw FormatError("tensor shape exceeds payload", at);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      m(i, j) = r.f64("tensor values");
  return m;
}

void put_basis(Writer &w, const Matrix &p) {
  for (std::size_t j = 0; j < p.cols(); ++j)
    for (std::size_t i = 0; i < p.rows(); ++i)
      w.f64(p(i, j));
}

Matrix get_basis(Reader &r, std::size_t d, std::size_t rank) {
  r.need(d * rank * 8, "basis");
  Matrix p(d, rank);
  for (std::size_t j = 0; j < rank; ++j)
    for (std::size_t i = 0; i < d; ++i)
      p(i, j) = r.f64("basis");
  return p;
}

std::uint32_t checked_u32(std::size_t v, const char *what) {
  if (v > 0xffffffffULL)
    throw DimensionError(std::string(what) + " does not fit the container");
  return static_cast<std::uint32_t>(v);
}

} // namespace

std::string encode_activations(const Activations &a) {
  const std::size_t L = a.input.size();
  const std::size_t n = L ? a.input[0].size() : 0;
  const std::size_t len = n ? a.input[0][0].rows() : 0;
  const std::size_t d = n ? a.input[0][0].cols() : 0;
  for (const auto &layer : a.input) {
    if (layer.size() != n)
      throw DimensionError("encode_activations: ragged layer");
    for (const auto &m : layer)
      if (m.rows() != len || m.cols() != d)
        throw DimensionError("encode_activations: ragged sequence");
  }
  Writer w;
  w.header("STA1", a.fingerprint);
  w.u64(L);
  w.u64(n);
  w.u64(len);
  w.u64(d);
  for (const auto &layer : a.input)
    for (const auto &m : layer)
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < d; ++j)
          w.f64(m(i, j));
  return w.finish();
}

Activations decode_activations(std::string_view bytes) {
  Activations a;
  Reader r = open_container(bytes, "STA1", a.fingerprint);
  const std::size_t at = r.offset();
  const std::uint64_t L = r.u64("layer count"), n = r.u64("sequence count"),
                      len = r.u64("sequence length"), d = r.u64("model width");
  const unsigned __int128 expect = (unsigned __int128)L * n * len * d * 8;
  if (expect != r.remaining())
    throw FormatError("declared shape needs " + std::to_string((unsigned long long)expect) +
                          " payload bytes, found " + std::to_string(r.remaining()),
                      at);
  a.input.assign(L, std::vector<Matrix>(n, Matrix(len, d)));
  for (auto &layer : a.input)
    for (auto &m : layer)
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < d; ++j)
          m(i, j) = r.f64("activations");
  r.expect_end();
  return a;
}

std::string encode_weights(const decoder::DecoderStack &stack, std::uint64_t fingerprint) {
  config::RunConfig rc;
  rc.decoder = stack.config;
  const std::string cfg = config::to_json(rc)["decoder"].dump();
  Writer w;
  w.header("STW1", fingerprint);
  w.u32(checked_u32(cfg.size(), "config"));
  w.raw(cfg);
  w.u32(checked_u32(stack.layers.size(), "layer count"));
  for (const auto &p : stack.layers)
    for (const Matrix *m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.w_gate, &p.w_up, &p.w_down,
                            &p.norm1_gain, &p.norm1_offset, &p.norm2_gain, &p.norm2_offset})
      put_matrix_rows(w, *m);
  return w.finish();
}

decoder::DecoderStack decode_weights(std::string_view bytes, std::uint64_t &fingerprint) {
  Reader r = open_container(bytes, "STW1", fingerprint);
  const std::size_t cfg_at = r.offset();
  const std::uint32_t len = r.u32("config length");
  const std::string_view text = r.bytes(len, "config");
  decoder::DecoderStack stack;
  try {
    json doc;
    doc["decoder"] = json::parse(text);
    stack.config = config::from_json(doc).decoder;
  } catch (const std::exception &e) {
    throw FormatError(std::string("embedded decoder config is invalid: ") + e.what(), cfg_at);
  }
  const std::size_t count_at = r.offset();
  const std::uint32_t layers = r.u32("layer count");
  if (layers != stack.config.n_layers)
    throw FormatError("layer count disagrees with the embedded config", count_at);
  for (std::uint32_t l = 0; l < layers; ++l) {
    decoder::DecoderLayerParams p;
    for (Matrix *m : {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.w_gate, &p.w_up, &p.w_down,
                      &p.norm1_gain, &p.norm1_offset, &p.norm2_gain, &p.norm2_offset})
      *m = get_matrix_rows(r);
    stack.layers.push_back(std::move(p));
  }
  r.expect_end();
  return stack;
}

std::uint8_t provenance_tag(const std::string &provenance) {
  if (provenance == "stief")
    return 0;
  if (provenance == "k_svd")
    return 1;
  if (provenance == "eigen")
    return 2;
  if (provenance == "kq_svd")
    return 3;
  throw UsageError("unknown basis provenance '" + provenance + "'");
}

std::string provenance_name(std::uint8_t tag) {
  switch (tag) {
  case 0:
    return "stief";
  case 1:
    return "k_svd";
  case 2:
    return "eigen";
  case 3:
    return "kq_svd";
  }
  throw UsageError("unknown provenance tag " + std::to_string(tag));
}

std::string encode_bases(const stief::BasisStore &store, std::uint64_t fingerprint) {
  const std::uint8_t tag = provenance_tag(store.provenance);
  Writer w;
  w.header("STF1", fingerprint);
  w.u32(checked_u32(store.layers.size(), "layer count"));
  w.u32(checked_u32(store.d_h, "d_h"));
  w.u32(checked_u32(store.n_heads_kv, "H_KV"));
  w.u32(checked_u32(store.ranks_k.size(), "rank count"));
  for (auto r : store.ranks_k)
    w.u32(checked_u32(r, "rank"));
  w.u32(checked_u32(store.ranks_v.size(), "rank count"));
  for (auto r : store.ranks_v)
    w.u32(checked_u32(r, "rank"));
  for (const auto &layer : store.layers) {
    if (layer.key.size() != store.ranks_k.size() || layer.value.size() != store.ranks_v.size())
      throw DimensionError("encode_bases: layer does not cover every rank");
    for (std::size_t i = 0; i < store.ranks_k.size(); ++i) {
      const Matrix &p = layer.key[i];
      if (p.rows() != store.d_h || p.cols() != store.ranks_k[i])
        throw DimensionError("encode_bases: key basis shape");
      w.u8(tag);
      put_basis(w, p);
    }
    for (std::size_t j = 0; j < store.ranks_v.size(); ++j) {
      if (layer.value[j].size() != store.n_heads_kv)
        throw DimensionError("encode_bases: value basis count");
      w.u8(tag);
      for (const Matrix &p : layer.value[j]) {
        if (p.rows() != store.d_h || p.cols() != store.ranks_v[j])
          throw DimensionError("encode_bases: value basis shape");
        put_basis(w, p);
      }
    }
  }
  return w.finish();
}

stief::BasisStore decode_bases(std::string_view bytes, std::uint64_t &fingerprint) {
  Reader r = open_container(bytes, "STF1", fingerprint);
  stief::BasisStore s;
  const std::uint32_t L = r.u32("layer count");
  s.d_h = r.u32("d_h");
  s.n_heads_kv = r.u32("H_KV");
  for (auto *ranks : {&s.ranks_k, &s.ranks_v}) {
    const std::size_t at = r.offset();
    const std::uint32_t count = r.u32("rank count");
    if (count > r.remaining() / 4)
      throw FormatError("rank count exceeds payload", at);
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::size_t rat = r.offset();
      const std::uint32_t rank = r.u32("rank");
      if (rank == 0 || rank > s.d_h)
        throw FormatError("rank " + std::to_string(rank) + " outside [1, d_h]", rat);
      ranks->push_back(rank);
    }
  }
  // Exact payload size from the declared shapes.
  unsigned __int128 need = 0;
  for (auto rk : s.ranks_k)
    need += 1 + (unsigned __int128)s.d_h * rk * 8;
  for (auto rv : s.ranks_v)
    need += 1 + (unsigned __int128)s.n_heads_kv * s.d_h * rv * 8;
  need *= L;
  if (need != r.remaining())
    throw FormatError("declared shapes need " + std::to_string((unsigned long long)need) +
                          " payload bytes, found " + std::to_string(r.remaining()),
                      r.offset());
  std::optional<std::uint8_t> tag;
  auto read_tag = [&] {
    const std::size_t at = r.offset();
    const std::uint8_t t = r.u8("provenance tag");
    if (t > 3)
      throw FormatError("unknown provenance tag " + std::to_string(t), at);
    if (tag && *tag != t)
      throw FormatError("mixed provenance tags", at);
    tag = t;
  };
  for (std::uint32_t l = 0; l < L; ++l) {
    stief::BasisStore::Layer layer;
    for (auto rk : s.ranks_k) {
      read_tag();
      layer.key.push_back(get_basis(r, s.d_h, rk));
    }
    for (auto rv : s.ranks_v) {
      read_tag();
      std::vector<Matrix> heads;
      for (std::size_t h = 0; h < s.n_heads_kv; ++h)
        heads.push_back(get_basis(r, s.d_h, rv));
      layer.value.push_back(std::move(heads));
    }
    s.layers.push_back(std::move(layer));
  }
  r.expect_end();
  s.provenance = tag ? provenance_name(*tag) : "stief";
  return s;
}

std::vector<std::vector<Matrix>> decode_external_dump(std::string_view bytes, std::size_t d_model,
                                                      std::size_t n_layers, std::size_t seq_len) {
  Reader r(bytes, bytes.size());
  const std::uint64_t n = r.u64("token count");
  if (n == 0 || seq_len == 0 || n % seq_len != 0)
    throw FormatError("token count " + std::to_string(n) + " is not a positive multiple of seq_len " +
                          std::to_string(seq_len),
                      0);
  const std::uint64_t d = r.u64("model width");
  if (d != d_model)
    throw FormatError("model width " + std::to_string(d) + " differs from the config's " +
                          std::to_string(d_model),
                      8);
  const std::uint64_t L = r.u64("layer count");
  if (L != n_layers)
    throw FormatError("layer count " + std::to_string(L) + " differs from the config's " +
                          std::to_string(n_layers),
                      16);
  const unsigned __int128 expect = (unsigned __int128)L * n * d * 8;
  if (expect > r.remaining())
    throw FormatError("truncated activation stream", bytes.size());
  if (expect < r.remaining())
    throw FormatError("unexpected trailing bytes", 24 + static_cast<std::size_t>(expect));
  std::vector<std::vector<Matrix>> out(L);
  for (auto &layer : out)
    for (std::uint64_t s = 0; s < n / seq_len; ++s) {
      Matrix m(seq_len, d);
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < d; ++j)
          m(i, j) = r.f64("activations");
      layer.push_back(std::move(m));
    }
  return out;
}

std::vector<std::vector<decoder::ActivationRecord>>
records_from_inputs(const decoder::DecoderStack &stack,
                    const std::vector<std::vector<Matrix>> &inputs) {
  if (inputs.size() != stack.layers.size())
    throw DimensionError("records_from_inputs: need inputs for every layer");
  std::vector<std::vector<decoder::ActivationRecord>> out;
  for (std::size_t l = 0; l < inputs.size(); ++l)
    out.push_back(decoder::capture_layer(stack.config, stack.layers[l], inputs[l]));
  return out;
}

namespace {

std::uint64_t parse_fingerprint(const json &doc) {
  const std::string hex = doc.at("fingerprint").get<std::string>();
  if (hex.size() != 16 || hex.find_first_not_of("0123456789abcdef") != std::string::npos)
    throw FormatError("malformed fingerprint '" + hex + "'", 0);
  return std::stoull(hex, nullptr, 16);
}

json parse_document(std::string_view text, const char *format) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error &e) {
    throw FormatError(std::string("invalid JSON: ") + e.what(), e.byte);
  }
  if (!doc.is_object() || doc.value("format", "") != format)
    throw FormatError(std::string("not a ") + format + " document", 0);
  if (doc.value("version", 0) != kFormatVersion)
    throw FormatError("unsupported document version", 0);
  return doc;
}

} // namespace

std::string encode_surface(const SurfaceFile &f) {
  ojson doc;
  doc["format"] = "stiefkv-surface";
  doc["version"] = kFormatVersion;
  doc["fingerprint"] = config::fingerprint_hex(f.fingerprint);
  doc["method"] = f.method;
  doc["d_h"] = f.d_h;
  ojson arr = ojson::array();
  for (const auto &s : f.surfaces) {
    ojson e;
    e["layer"] = s.layer;
    e["ranks_k"] = s.ranks_k;
    e["ranks_v"] = s.ranks_v;
    e["delta"] = s.delta;
    arr.push_back(e);
  }
  doc["surfaces"] = arr;
  return doc.dump(2) + "\n";
}

SurfaceFile decode_surface(std::string_view text) {
  const json doc = parse_document(text, "stiefkv-surface");
  SurfaceFile f;
  try {
    f.fingerprint = parse_fingerprint(doc);
    f.method = doc.at("method").get<std::string>();
    f.d_h = doc.at("d_h").get<std::size_t>();
    for (const auto &e : doc.at("surfaces")) {
      surface::ErrorSurface s;
      s.layer = e.at("layer").get<std::size_t>();
      s.d_h = f.d_h;
      s.ranks_k = e.at("ranks_k").get<std::vector<std::size_t>>();
      s.ranks_v = e.at("ranks_v").get<std::vector<std::size_t>>();
      s.delta = e.at("delta").get<std::vector<std::vector<double>>>();
      f.surfaces.push_back(std::move(s));
    }
  } catch (const json::exception &e) {
    throw FormatError(std::string("surface document: ") + e.what(), 0);
  }
  for (const auto &s : f.surfaces)
    s.validate();
  return f;
}

ojson allocation_layers_json(const surface::RankAllocation &a) {
  ojson arr = ojson::array();
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto &c = a.layers[l];
    ojson e;
    e["layer"] = l;
    e["r_k"] = c.r_k;
    e["r_v"] = c.r_v;
    e["delta"] = c.delta;
    e["ratio"] = c.ratio;
    e["budget"] = c.budget;
    e["fallback"] = c.fallback;
    arr.push_back(e);
  }
  return arr;
}

std::string encode_allocation(const AllocationFile &f) {
  ojson doc;
  doc["format"] = "stiefkv-allocation";
  doc["version"] = kFormatVersion;
  doc["fingerprint"] = config::fingerprint_hex(f.fingerprint);
  doc["method"] = f.method;
  doc["policy"] = surface::policy_name(f.allocation.policy);
  doc["epsilon"] = f.allocation.epsilon;
  doc["weights"] = f.weights;
  doc["d_h"] = f.d_h;
  doc["aggregate_ratio"] = f.allocation.layers.empty()
                               ? 0.0
                               : surface::aggregate_ratio(f.allocation, f.d_h);
  doc["layers"] = allocation_layers_json(f.allocation);
  return doc.dump(2) + "\n";
}

AllocationFile decode_allocation(std::string_view text) {
  const json doc = parse_document(text, "stiefkv-allocation");
  AllocationFile f;
  try {
    f.fingerprint = parse_fingerprint(doc);
    f.method = doc.at("method").get<std::string>();
    f.d_h = doc.at("d_h").get<std::size_t>();
    f.weights = doc.at("weights").get<std::vector<double>>();
    f.allocation.policy = surface::parse_policy(doc.at("policy").get<std::string>());
    f.allocation.epsilon = doc.at("epsilon").get<double>();
    for (const auto &e : doc.at("layers")) {
      surface::LayerChoice c;
      c.r_k = e.at("r_k").get<std::size_t>();
      c.r_v = e.at("r_v").get<std::size_t>();
      c.delta = e.at("delta").get<double>();
      c.ratio = e.at("ratio").get<double>();
      c.budget = e.at("budget").get<double>();
      c.fallback = e.at("fallback").get<bool>();
      f.allocation.layers.push_back(c);
    }
  } catch (const json::exception &e) {
    throw FormatError(std::string("allocation document: ") + e.what(), 0);
  }
  return f;
}

void check_fingerprint(std::uint64_t expected, std::uint64_t found, const std::string &what) {
  if (expected != found)
    throw StaleArtifactError(what + " was produced under a different configuration (fingerprint " +
                             config::fingerprint_hex(found) + ", expected " +
                             config::fingerprint_hex(expected) + ")");
}

} // namespace stiefkv::io
