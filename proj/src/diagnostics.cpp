#include "stiefkv/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "stiefkv/errors.hpp"

namespace stiefkv::diagnostics {

namespace la = linalg;

double attention_output_error(const DecoderConfig &config, const DecoderLayerParams &layer,
                              const ActivationRecord &record, const Compression &bases) {
  Matrix attn;
  decoder::forward_from_record(config, layer, record, bases, &attn);
  return la::relative_error(record.attention_output, attn);
}

double layer_output_error(const DecoderConfig &config, const DecoderLayerParams &layer,
                          const ActivationRecord &record, const Compression &bases) {
  return la::relative_error(record.layer_output,
                            decoder::forward_from_record(config, layer, record, bases));
}

double mean_token_cosine(const Matrix &y, const Matrix &y_tilde) {
  if (y.rows() != y_tilde.rows() || y.cols() != y_tilde.cols())
    throw DimensionError("mean_token_cosine: shapes differ");
  if (y.rows() == 0)
    throw DegenerateInputError("mean_token_cosine: no tokens");
  double total = 0.0;
  for (std::size_t t = 0; t < y.rows(); ++t) {
    double dot = 0.0, ny = 0.0, nt = 0.0;
    for (std::size_t c = 0; c < y.cols(); ++c) {
      dot += y(t, c) * y_tilde(t, c);
      ny += y(t, c) * y(t, c);
      nt += y_tilde(t, c) * y_tilde(t, c);
    }
    if (ny == 0.0)
      throw DegenerateInputError("mean_token_cosine: reference row " + std::to_string(t) +
                                 " is zero");
    if (nt == 0.0)
      continue;
    total += std::clamp(dot / (std::sqrt(ny) * std::sqrt(nt)), -1.0, 1.0);
  }
  return total / static_cast<double>(y.rows());
}

std::vector<LayerDiagnostics> compare_methods(const decoder::DecoderStack &stack,
                                              std::span<const Matrix> inputs,
                                              std::span<const stief::BasisStore> stores,
                                              std::size_t r_k, std::size_t r_v) {
  if (inputs.empty())
    throw DiagnosticsError("no evaluation sequences");
  return compare_methods(stack, decoder::capture_calibration(stack, inputs), stores, r_k, r_v);
}

std::vector<LayerDiagnostics>
compare_methods(const decoder::DecoderStack &stack,
                const std::vector<std::vector<ActivationRecord>> &records,
                std::span<const stief::BasisStore> stores, std::size_t r_k, std::size_t r_v) {
  if (records.size() != stack.layers.size())
    throw DiagnosticsError("need records for every layer");
  if (records.empty() || records[0].empty())
    throw DiagnosticsError("no evaluation sequences");
  if (stores.empty())
    throw DiagnosticsError("no basis stores to compare");
  for (const auto &s : stores) {
    if (s.layers.size() != stack.layers.size())
      throw DiagnosticsError("store '" + s.provenance + "' has " +
                             std::to_string(s.layers.size()) + " layers, stack has " +
                             std::to_string(stack.layers.size()));
    if (!s.has_ranks(r_k, r_v))
      throw DiagnosticsError("store '" + s.provenance + "' has no bases for ranks (" +
                             std::to_string(r_k) + ", " + std::to_string(r_v) + ")");
  }

  std::vector<LayerDiagnostics> out;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const auto &layer = stack.layers[l];
    const double n = static_cast<double>(records[l].size());
    for (const auto &s : stores) {
      const Compression comp{&s.key_basis(l, r_k), s.value_bases(l, r_v)};
      decoder::check_compression(stack.config, comp);
      LayerDiagnostics d;
      d.method = s.provenance;
      d.layer = l;
      for (const auto &rec : records[l]) {
        Matrix attn;
        const Matrix y = decoder::forward_from_record(stack.config, layer, rec, comp, &attn);
        d.attn_rel_err += la::relative_error(rec.attention_output, attn);
        d.layer_rel_err += la::relative_error(rec.layer_output, y);
        d.mean_cosine += mean_token_cosine(rec.layer_output, y);
      }
      d.attn_rel_err /= n;
      d.layer_rel_err /= n;
      d.mean_cosine /= n;
      out.push_back(std::move(d));
    }
  }
  return out;
}

std::vector<Matrix> held_out_inputs(const DecoderConfig &config, std::size_t n_sequences,
                                    std::size_t seq_len, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x686f6c646f7574ULL));
  return decoder::gaussian_inputs(n_sequences, seq_len, config.d_model, rng);
}

std::string to_csv(std::span<const LayerDiagnostics> rows) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto &r : rows) {
    out += r.method + ',' + std::to_string(r.layer) + ',' + la::format_real(r.attn_rel_err) +
           ',' + la::format_real(r.layer_rel_err) + ',' + la::format_real(r.mean_cosine) + '\n';
  }
  return out;
}

namespace {

std::string fmt(const char *f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string xml_escape(const std::string &s) {
  std::string o;
  for (char c : s) {
    switch (c) {
    case '&':
      o += "&amp;";
      break;
    case '<':
      o += "&lt;";
      break;
    case '>':
      o += "&gt;";
      break;
    case '"':
      o += "&quot;";
      break;
    default:
      o += c;
    }
  }
  return o;
}

constexpr const char *kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                   "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string line_chart(const std::string &title, std::span<const LayerDiagnostics> rows,
                       double LayerDiagnostics::*metric) {
  std::vector<std::string> methods;
  std::size_t max_layer = 0;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto &r : rows) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
      methods.push_back(r.method);
    max_layer = std::max(max_layer, r.layer);
    lo = std::min(lo, r.*metric);
    hi = std::max(hi, r.*metric);
  }
  if (rows.empty())
    lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) {
    lo -= 0.5 * std::max(std::abs(lo), 1e-3);
    hi += 0.5 * std::max(std::abs(hi), 1e-3);
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;

  const double W = 640, H = 400, left = 70, right = 160, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](std::size_t layer) {
    return left + (max_layer == 0 ? 0.5 * pw : pw * double(layer) / double(max_layer));
  };
  auto py = [&](double v) { return top + ph * (hi - v) / (hi - lo); };

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << left + pw / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       "font-size=\"15\">"
    << xml_escape(title) << "</text>\n";

  // Axes.
  s << "<g stroke=\"black\" stroke-width=\"1\">\n"
    << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\""
    << top + ph << "\"/>\n"
    << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\"/>\n</g>\n";
  s << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t l = 0; l <= max_layer; ++l)
    s << "<text x=\"" << fmt("%.2f", px(l)) << "\" y=\"" << top + ph + 16
      << "\" text-anchor=\"middle\">" << l << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << fmt("%.2f", py(v) + 4)
      << "\" text-anchor=\"end\">" << fmt("%.4g", v) << "</text>\n";
  }
  s << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12
    << "\" text-anchor=\"middle\">layer</text>\n</g>\n";

  for (std::size_t m = 0; m < methods.size(); ++m) {
    const char *color = kColors[m % std::size(kColors)];
    std::string pts;
    for (const auto &r : rows)
      if (r.method == methods[m]) {
        if (!pts.empty())
          pts += ' ';
        pts += fmt("%.2f", px(r.layer)) + ',' + fmt("%.2f", py(r.*metric));
      }
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts
      << "\"/>\n";
    const double ly = top + 10 + 20.0 * double(m);
    s << "<line x1=\"" << left + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 40
      << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << left + pw + 46 << "\" y=\"" << ly + 4
      << "\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(methods[m])
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

} // namespace

std::vector<Chart> charts(std::span<const LayerDiagnostics> rows) {
  return {
      {"attn_rel_err.svg", line_chart("attention output relative error", rows,
                                      &LayerDiagnostics::attn_rel_err)},
      {"layer_rel_err.svg", line_chart("layer output relative error", rows,
                                       &LayerDiagnostics::layer_rel_err)},
      {"mean_cosine.svg", line_chart("mean token cosine", rows, &LayerDiagnostics::mean_cosine)},
  };
}

} // namespace stiefkv::diagnostics
