#include "stiefkv/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "stiefkv/diagnostics.hpp"
#include "stiefkv/errors.hpp"
#include "stiefkv/surface.hpp"

namespace stiefkv::config {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

std::string_view norm_name(decoder::NormKind k) {
  return k == decoder::NormKind::rms_norm ? "rms_norm" : "layer_norm";
}

std::string_view mlp_name(decoder::MlpKind k) {
  return k == decoder::MlpKind::silu_gated ? "silu_gated" : "gelu";
}

// Reads the keys of one object, rejecting anything it was not asked about.
class Section {
public:
  Section(const json &doc, std::string name) : name_(std::move(name)) {
    if (!doc.is_object())
      throw ConfigError("config: '" + name_ + "' must be an object");
    doc_ = &doc;
  }

  template <class T> void read(const char *key, T &out) {
    seen_.insert(key);
    auto it = doc_->find(key);
    if (it == doc_->end())
      return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean())
          throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number())
          throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_unsigned())
          throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string())
          throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception &) {
      throw ConfigError("config: '" + name_ + "." + key + "' has the wrong type");
    }
  }

  const json *child(const char *key) {
    seen_.insert(key);
    auto it = doc_->find(key);
    return it == doc_->end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = doc_->begin(); it != doc_->end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError("config: unknown key '" + name_ + "." + it.key() + "'");
  }

private:
  const json *doc_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

ojson artifact_fields(const RunConfig &c) {
  ojson full = to_json(c);
  ojson out;
  out["decoder"] = full["decoder"];
  out["train"] = full["train"];
  out["ranks"] = full["ranks"];
  out["calibration"] = full["calibration"];
  return out;
}

} // namespace

void RunConfig::validate() const {
  decoder.validate();
  train.validate();
  if (!(ranks.lo > 0.0 && ranks.lo <= ranks.hi && ranks.hi <= 1.0) || ranks.count == 0)
    throw ConfigError("config: ranks need 0 < lo <= hi <= 1 and count >= 1");
  if (calibration.n_sequences == 0 || calibration.seq_len == 0 || calibration.eval_sequences == 0)
    throw ConfigError("config: calibration sizes must be positive");
  surface::Policy policy;
  try {
    policy = surface::parse_policy(allocation.policy);
  } catch (const UsageError &e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!(allocation.epsilon > 0.0))
    throw ConfigError("config: allocation.epsilon must be positive");
  if (policy == surface::Policy::weighted_pareto && !allocation.weights.empty() &&
      allocation.weights.size() != decoder.n_layers)
    throw ConfigError("config: allocation.weights needs one entry per layer");
  for (double w : allocation.weights)
    if (!(w > 0.0))
      throw ConfigError("config: allocation.weights must be positive");
  if (diagnostics.data != "heldout" && diagnostics.data != "calibration")
    throw ConfigError("config: diagnostics.data must be 'heldout' or 'calibration'");
  if (diagnostics.methods.empty())
    throw ConfigError("config: diagnostics.methods is empty");
  const auto cand = candidate_ranks();
  if (cand.empty())
    throw ConfigError("config: no candidate ranks");
}

std::vector<std::size_t> RunConfig::candidate_ranks() const {
  auto r = stief::candidate_ranks(decoder.d_h, ranks.lo, ranks.hi, ranks.count);
  r.erase(std::remove(r.begin(), r.end(), std::size_t{0}), r.end());
  return r;
}

std::size_t RunConfig::middle_rank() const {
  const auto r = candidate_ranks();
  return r[r.size() / 2];
}

void RunConfig::set_seed(std::uint64_t seed) {
  calibration.seed = seed;
  train.seed = seed;
}

ojson to_json(const RunConfig &c) {
  ojson d;
  d["d_model"] = c.decoder.d_model;
  d["n_heads_q"] = c.decoder.n_heads_q;
  d["n_heads_kv"] = c.decoder.n_heads_kv;
  d["d_h"] = c.decoder.d_h;
  d["d_ff"] = c.decoder.d_ff;
  d["n_layers"] = c.decoder.n_layers;
  d["norm"] = norm_name(c.decoder.norm_kind);
  d["mlp"] = mlp_name(c.decoder.mlp_kind);
  d["rope"] = c.decoder.rope_enabled;
  d["rope_base"] = c.decoder.rope_base;
  d["layer_norm_eps"] = c.decoder.layer_norm_eps;
  d["rms_norm_eps"] = c.decoder.rms_norm_eps;

  ojson t;
  t["learning_rate"] = c.train.learning_rate;
  t["weight_decay"] = c.train.weight_decay;
  t["adam_beta1"] = c.train.adam_beta1;
  t["adam_beta2"] = c.train.adam_beta2;
  t["adam_eps"] = c.train.adam_eps;
  t["max_epochs"] = c.train.max_epochs;
  t["patience"] = c.train.patience;
  t["min_delta"] = c.train.min_delta;
  t["batch_size_keys"] = c.train.batch_size_keys;
  t["batch_size_values"] = c.train.batch_size_values;
  t["hidden_width"] = c.train.hidden_width;
  t["head_init_scale"] = c.train.head_init_scale;

  ojson r;
  r["lo"] = c.ranks.lo;
  r["hi"] = c.ranks.hi;
  r["count"] = c.ranks.count;

  ojson cal;
  cal["n_sequences"] = c.calibration.n_sequences;
  cal["seq_len"] = c.calibration.seq_len;
  cal["seed"] = c.calibration.seed;
  cal["eval_sequences"] = c.calibration.eval_sequences;

  ojson a;
  a["policy"] = c.allocation.policy;
  a["epsilon"] = c.allocation.epsilon;
  a["uniform_r_k"] = c.allocation.uniform_r_k;
  a["uniform_r_v"] = c.allocation.uniform_r_v;
  a["weights"] = c.allocation.weights;

  ojson g;
  g["methods"] = c.diagnostics.methods;
  g["r_k"] = c.diagnostics.r_k;
  g["r_v"] = c.diagnostics.r_v;
  g["data"] = c.diagnostics.data;

  ojson out;
  out["decoder"] = d;
  out["train"] = t;
  out["ranks"] = r;
  out["calibration"] = cal;
  out["allocation"] = a;
  out["diagnostics"] = g;
  return out;
}

RunConfig from_json(const json &doc) {
  RunConfig c;
  Section top(doc, "config");
  if (const json *j = top.child("decoder")) {
    Section s(*j, "decoder");
    s.read("d_model", c.decoder.d_model);
    s.read("n_heads_q", c.decoder.n_heads_q);
    s.read("n_heads_kv", c.decoder.n_heads_kv);
    s.read("d_h", c.decoder.d_h);
    s.read("d_ff", c.decoder.d_ff);
    s.read("n_layers", c.decoder.n_layers);
    std::string norm(norm_name(c.decoder.norm_kind)), mlp(mlp_name(c.decoder.mlp_kind));
    s.read("norm", norm);
    s.read("mlp", mlp);
    if (norm == "rms_norm")
      c.decoder.norm_kind = decoder::NormKind::rms_norm;
    else if (norm == "layer_norm")
      c.decoder.norm_kind = decoder::NormKind::layer_norm;
    else
      throw ConfigError("config: decoder.norm must be 'rms_norm' or 'layer_norm'");
    if (mlp == "silu_gated")
      c.decoder.mlp_kind = decoder::MlpKind::silu_gated;
    else if (mlp == "gelu")
      c.decoder.mlp_kind = decoder::MlpKind::gelu;
    else
      throw ConfigError("config: decoder.mlp must be 'silu_gated' or 'gelu'");
    s.read("rope", c.decoder.rope_enabled);
    s.read("rope_base", c.decoder.rope_base);
    s.read("layer_norm_eps", c.decoder.layer_norm_eps);
    s.read("rms_norm_eps", c.decoder.rms_norm_eps);
    s.finish();
  }
  if (const json *j = top.child("train")) {
    Section s(*j, "train");
    s.read("learning_rate", c.train.learning_rate);
    s.read("weight_decay", c.train.weight_decay);
    s.read("adam_beta1", c.train.adam_beta1);
    s.read("adam_beta2", c.train.adam_beta2);
    s.read("adam_eps", c.train.adam_eps);
    s.read("max_epochs", c.train.max_epochs);
    s.read("patience", c.train.patience);
    s.read("min_delta", c.train.min_delta);
    s.read("batch_size_keys", c.train.batch_size_keys);
    s.read("batch_size_values", c.train.batch_size_values);
    s.read("hidden_width", c.train.hidden_width);
    s.read("head_init_scale", c.train.head_init_scale);
    s.finish();
  }
  if (const json *j = top.child("ranks")) {
    Section s(*j, "ranks");
    s.read("lo", c.ranks.lo);
    s.read("hi", c.ranks.hi);
    s.read("count", c.ranks.count);
    s.finish();
  }
  if (const json *j = top.child("calibration")) {
    Section s(*j, "calibration");
    s.read("n_sequences", c.calibration.n_sequences);
    s.read("seq_len", c.calibration.seq_len);
    s.read("seed", c.calibration.seed);
    s.read("eval_sequences", c.calibration.eval_sequences);
    s.finish();
  }
  if (const json *j = top.child("allocation")) {
    Section s(*j, "allocation");
    s.read("policy", c.allocation.policy);
    s.read("epsilon", c.allocation.epsilon);
    s.read("uniform_r_k", c.allocation.uniform_r_k);
    s.read("uniform_r_v", c.allocation.uniform_r_v);
    if (const json *w = s.child("weights")) {
      if (!w->is_array())
        throw ConfigError("config: 'allocation.weights' must be an array");
      c.allocation.weights.clear();
      for (const auto &x : *w) {
        if (!x.is_number())
          throw ConfigError("config: 'allocation.weights' must hold numbers");
        c.allocation.weights.push_back(x.get<double>());
      }
    }
    s.finish();
  }
  if (const json *j = top.child("diagnostics")) {
    Section s(*j, "diagnostics");
    if (const json *m = s.child("methods")) {
      if (!m->is_array())
        throw ConfigError("config: 'diagnostics.methods' must be an array");
      c.diagnostics.methods.clear();
      for (const auto &x : *m) {
        if (!x.is_string())
          throw ConfigError("config: 'diagnostics.methods' must hold strings");
        c.diagnostics.methods.push_back(x.get<std::string>());
      }
    }
    s.read("r_k", c.diagnostics.r_k);
    s.read("r_v", c.diagnostics.r_v);
    s.read("data", c.diagnostics.data);
    s.finish();
  }
  top.finish();
  c.train.seed = c.calibration.seed;
  c.validate();
  return c;
}

RunConfig load(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error &e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(doc);
}

std::string dump(const RunConfig &config) { return to_json(config).dump(2) + "\n"; }

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fingerprint(const RunConfig &config) {
  return fnv1a64(artifact_fields(config).dump());
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

decoder::DecoderStack make_stack(const RunConfig &config) {
  Rng rng(mix_seed(config.calibration.seed, 0x737461636bULL));
  return decoder::init_stack(config.decoder, rng);
}

std::vector<Matrix> make_calibration_inputs(const RunConfig &config) {
  Rng rng(mix_seed(config.calibration.seed, 0x63616c6962ULL));
  return decoder::gaussian_inputs(config.calibration.n_sequences, config.calibration.seq_len,
                                  config.decoder.d_model, rng);
}

std::vector<Matrix> make_eval_inputs(const RunConfig &config) {
  return diagnostics::held_out_inputs(config.decoder, config.calibration.eval_sequences,
                                      config.calibration.seq_len, config.calibration.seed);
}

} // namespace stiefkv::config
