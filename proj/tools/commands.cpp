#include "commands.hpp"

#include <CLI11.hpp>

#include <filesystem>

#include "stiefkv/diagnostics.hpp"
#include "stiefkv/errors.hpp"
#include "stiefkv/io.hpp"

namespace stiefkv::cli {

namespace la = linalg;

namespace {

const char *const kActivations = "activations.sta";
const char *const kWeights = "weights.stw";
const char *const kDiagnostics = "diagnostics.csv";

struct Loaded {
  config::RunConfig config;
  std::uint64_t fingerprint = 0;
  decoder::DecoderStack stack;
};

Loaded load_stack(const Globals &g) {
  Loaded out;
  out.config = resolve(g);
  out.fingerprint = config::fingerprint(out.config);
  std::uint64_t fp = 0;
  const std::string path = path_in(g, kWeights);
  out.stack = io::decode_weights(io::read_file(path), fp);
  io::check_fingerprint(out.fingerprint, fp, path);
  return out;
}

std::vector<std::vector<decoder::ActivationRecord>> load_records(const Globals &g,
                                                                 const Loaded &l) {
  const std::string path = path_in(g, kActivations);
  const io::Activations a = io::decode_activations(io::read_file(path));
  io::check_fingerprint(l.fingerprint, a.fingerprint, path);
  return io::records_from_inputs(l.stack, a.input);
}

stief::BasisStore load_bases(const std::string &path, std::uint64_t fingerprint) {
  std::uint64_t fp = 0;
  auto store = io::decode_bases(io::read_file(path), fp);
  io::check_fingerprint(fingerprint, fp, path);
  return store;
}

} // namespace

config::RunConfig resolve(const Globals &g) {
  config::RunConfig c = g.config_path.empty() ? config::RunConfig{} : config::load(g.config_path);
  if (g.seed)
    c.set_seed(*g.seed);
  c.validate();
  return c;
}

std::string path_in(const Globals &g, const std::string &name) {
  return (std::filesystem::path(g.out_dir) / name).string();
}

std::string bases_name(const std::string &method) { return "bases_" + method + ".stf"; }
std::string surface_name(const std::string &method) { return "surface_" + method + ".json"; }
std::string allocation_name(const std::string &method) { return "allocation_" + method + ".json"; }
std::string eval_name(const std::string &method) { return "eval_" + method + ".csv"; }

void check_method(const std::string &method) {
  if (method != "stief" && method != "k_svd" && method != "eigen" && method != "kq_svd")
    throw UsageError("unknown method '" + method + "' (expected stief, k_svd, eigen, kq_svd)");
}

void cmd_init_config(const Globals &g, std::ostream &log) {
  const auto c = resolve(g);
  const std::string path = path_in(g, "config.json");
  io::write_atomic(path, config::dump(c));
  log << "wrote " << path << "\n";
}

void cmd_calibrate(const Globals &g, const std::string &activations, std::ostream &log) {
  const auto c = resolve(g);
  const std::uint64_t fp = config::fingerprint(c);
  const auto stack = config::make_stack(c);
  io::Activations a;
  a.fingerprint = fp;
  if (!activations.empty()) {
    a.input = io::decode_external_dump(io::read_file(activations), c.decoder.d_model,
                                       c.decoder.n_layers, c.calibration.seq_len);
  } else {
    const auto records = decoder::capture_calibration(stack, config::make_calibration_inputs(c));
    a.input.resize(records.size());
    for (std::size_t l = 0; l < records.size(); ++l)
      for (const auto &r : records[l])
        a.input[l].push_back(r.layer_input);
  }
  const std::string wpath = path_in(g, kWeights), apath = path_in(g, kActivations);
  io::write_atomic(wpath, io::encode_weights(stack, fp));
  io::write_atomic(apath, io::encode_activations(a));
  log << "wrote " << wpath << "\nwrote " << apath << " (" << a.input.size() << " layers, "
      << (a.input.empty() ? 0 : a.input[0].size()) << " sequences)\n";
}

void cmd_train(const Globals &g, const std::string &method, std::ostream &log) {
  check_method(method);
  const Loaded l = load_stack(g);
  const auto records = load_records(g, l);
  const auto ranks = l.config.candidate_ranks();

  stief::BasisStore store;
  std::vector<surface::ErrorSurface> surfaces;
  if (method == "stief") {
    auto res = stief::run_algorithm_1(l.stack, records, ranks, ranks, l.config.train, g.threads);
    store = std::move(res.store);
    surfaces = std::move(res.surfaces);
  } else {
    store = stief::baseline_store(baselines::parse_kind(method), l.stack, records, ranks, ranks);
    surfaces = stief::build_surfaces(l.stack, records, store);
  }
  const double residual = store.max_orthonormality_residual();
  if (!(residual < 1e-8))
    throw ContractError("orthonormality audit failed: residual " + la::format_real(residual));

  const std::string bpath = path_in(g, bases_name(method));
  io::write_atomic(bpath, io::encode_bases(store, l.fingerprint));
  io::SurfaceFile sf{l.fingerprint, method, l.config.decoder.d_h, surfaces};
  const std::string spath = path_in(g, surface_name(method));
  io::write_atomic(spath, io::encode_surface(sf));
  log << "wrote " << bpath << "\nwrote " << spath << "\n";
  if (method == "stief") {
    const std::string lpath = path_in(g, "train_log_stief.csv");
    io::write_atomic(lpath, stief::log_csv(store.log));
    log << "wrote " << lpath << "\n";
  }
  log << "orthonormality residual " << la::format_real(residual) << "\n";
}

void cmd_allocate(const Globals &g, const std::string &method, const std::string &policy_name,
                  std::optional<double> epsilon, const std::string &surface_path,
                  const std::string &output_path, std::ostream &log) {
  check_method(method);
  const auto c = resolve(g);
  const std::uint64_t fp = config::fingerprint(c);
  const surface::Policy policy =
      surface::parse_policy(policy_name.empty() ? c.allocation.policy : policy_name);
  if (epsilon && !(*epsilon > 0.0))
    throw UsageError("--epsilon must be positive");
  const double eps = epsilon ? *epsilon : c.allocation.epsilon;

  const std::string spath = surface_path.empty() ? path_in(g, surface_name(method)) : surface_path;
  const io::SurfaceFile sf = io::decode_surface(io::read_file(spath));
  io::check_fingerprint(fp, sf.fingerprint, spath);

  io::AllocationFile af;
  af.fingerprint = fp;
  af.method = method;
  af.d_h = sf.d_h;
  switch (policy) {
  case surface::Policy::uniform: {
    const std::size_t rk = c.allocation.uniform_r_k ? c.allocation.uniform_r_k : c.middle_rank();
    const std::size_t rv = c.allocation.uniform_r_v ? c.allocation.uniform_r_v : c.middle_rank();
    af.allocation = surface::allocate_uniform(sf.surfaces, rk, rv);
    break;
  }
  case surface::Policy::pareto:
    af.allocation = surface::allocate_pareto(sf.surfaces, eps);
    break;
  case surface::Policy::weighted_pareto:
    af.weights = c.allocation.weights.empty() ? surface::sensitivity_weights(sf.surfaces.size())
                                              : c.allocation.weights;
    af.allocation = surface::allocate_weighted_pareto(sf.surfaces, eps, af.weights);
    break;
  }
  const std::string out = output_path.empty() ? path_in(g, allocation_name(method)) : output_path;
  io::write_atomic(out, io::encode_allocation(af));
  log << "wrote " << out << " (aggregate ratio "
      << la::format_real(surface::aggregate_ratio(af.allocation, af.d_h)) << ")\n";
}

void cmd_eval(const Globals &g, const std::string &method, const std::string &bases_path,
              const std::string &allocation_path, std::ostream &log) {
  check_method(method);
  const Loaded l = load_stack(g);
  const std::string bpath = bases_path.empty() ? path_in(g, bases_name(method)) : bases_path;
  const auto store = load_bases(bpath, l.fingerprint);
  const std::string apath =
      allocation_path.empty() ? path_in(g, allocation_name(method)) : allocation_path;
  const auto af = io::decode_allocation(io::read_file(apath));
  io::check_fingerprint(l.fingerprint, af.fingerprint, apath);
  if (af.allocation.layers.size() != l.stack.layers.size())
    throw ContractError(apath + " covers " + std::to_string(af.allocation.layers.size()) +
                        " layers, the stack has " + std::to_string(l.stack.layers.size()));

  const auto records = decoder::capture_calibration(l.stack, config::make_eval_inputs(l.config));
  std::string csv = "layer,r_k,r_v,delta,compression_ratio\n";
  double total = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto &choice = af.allocation.layers[i];
    const decoder::Compression comp{&store.key_basis(i, choice.r_k),
                                    store.value_bases(i, choice.r_v)};
    const double d = stief::layer_output_delta(l.stack.config, l.stack.layers[i], records[i], comp);
    total += d;
    csv += std::to_string(i) + ',' + std::to_string(choice.r_k) + ',' +
           std::to_string(choice.r_v) + ',' + la::format_real(d) + ',' +
           la::format_real(surface::compression_ratio(choice.r_k, choice.r_v, store.d_h)) + '\n';
  }
  const double mean = total / static_cast<double>(records.size());
  const double ratio = surface::aggregate_ratio(af.allocation, store.d_h);
  csv += "mean,,," + la::format_real(mean) + ',' + la::format_real(ratio) + '\n';
  const std::string out = path_in(g, eval_name(method));
  io::write_atomic(out, csv);
  log << "wrote " << out << " (mean delta " << la::format_real(mean) << ", ratio "
      << la::format_real(ratio) << ")\n";
}

void cmd_diagnose(const Globals &g, const std::vector<std::string> &methods_in, std::size_t r_k,
                  std::size_t r_v, const std::string &data_in, std::ostream &log) {
  const Loaded l = load_stack(g);
  const auto &dc = l.config.diagnostics;
  const auto methods = methods_in.empty() ? dc.methods : methods_in;
  const std::string data = data_in.empty() ? dc.data : data_in;
  if (data != "heldout" && data != "calibration")
    throw UsageError("--data must be 'heldout' or 'calibration'");
  const std::size_t rk = r_k ? r_k : dc.r_k ? dc.r_k : l.config.middle_rank();
  const std::size_t rv = r_v ? r_v : dc.r_v ? dc.r_v : l.config.middle_rank();

  std::vector<stief::BasisStore> stores;
  for (const auto &m : methods) {
    check_method(m);
    stores.push_back(load_bases(path_in(g, bases_name(m)), l.fingerprint));
  }
  const auto records = data == "calibration"
                           ? load_records(g, l)
                           : decoder::capture_calibration(l.stack, config::make_eval_inputs(l.config));
  const auto rows = diagnostics::compare_methods(l.stack, records, stores, rk, rv);
  const std::string cpath = path_in(g, kDiagnostics);
  io::write_atomic(cpath, diagnostics::to_csv(rows));
  log << "wrote " << cpath << "\n";
  for (const auto &chart : diagnostics::charts(rows)) {
    const std::string p = path_in(g, chart.file_name);
    io::write_atomic(p, chart.svg);
    log << "wrote " << p << "\n";
  }
}

int run(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
  CLI::App app{"Learned low-rank KV-cache projection toolkit", "stiefkv"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "JSON run configuration (defaults if omitted)");
  auto *seed_opt = app.add_option("--seed", seed, "Override the calibration seed");
  app.add_option("--threads", g.threads, "Cap on concurrently trained cells")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", g.out_dir, "Artifact directory (must exist)");

  auto *init = app.add_subcommand("init-config", "Write the full default configuration");

  auto *cal = app.add_subcommand("calibrate", "Build the stack and record layer inputs");
  std::string activations;
  cal->add_option("--activations", activations, "Ingest an external activation dump");

  std::string method = "stief";
  auto *train = app.add_subcommand("train", "Train or compute bases and error surfaces");
  train->add_option("--method", method, "stief, k_svd, eigen or kq_svd");

  auto *alloc = app.add_subcommand("allocate", "Choose per-layer ranks from a surface");
  std::string policy, surface_path, allocation_path;
  double epsilon = 0.0;
  alloc->add_option("--method", method, "Method whose surface to read");
  alloc->add_option("--policy", policy, "uniform, pareto or weighted_pareto");
  auto *eps_opt = alloc->add_option("--epsilon", epsilon, "Error budget");
  alloc->add_option("--surface", surface_path, "Surface file (default from --method)");
  alloc->add_option("--allocation", allocation_path, "Output path (default from --method)");

  auto *eval = app.add_subcommand("eval", "Per-layer error of an allocation on held-out data");
  std::string bases_path;
  eval->add_option("--method", method, "Method whose artifacts to read");
  eval->add_option("--bases", bases_path, "Basis file (default from --method)");
  eval->add_option("--allocation", allocation_path, "Allocation file (default from --method)");

  auto *diag = app.add_subcommand("diagnose", "Compare methods layer by layer");
  std::vector<std::string> methods;
  std::size_t r_k = 0, r_v = 0;
  std::string data;
  diag->add_option("--methods", methods, "Methods to compare")->delimiter(',');
  diag->add_option("--rank-k", r_k, "Key rank (default: middle candidate)");
  diag->add_option("--rank-v", r_v, "Value rank (default: middle candidate)");
  diag->add_option("--data", data, "heldout or calibration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    app.exit(e, out, err);
    return kUsage;
  }
  if (*seed_opt)
    g.seed = seed;

  try {
    if (*init)
      cmd_init_config(g, out);
    else if (*cal)
      cmd_calibrate(g, activations, out);
    else if (*train)
      cmd_train(g, method, out);
    else if (*alloc)
      cmd_allocate(g, method, policy,
                   *eps_opt ? std::optional<double>(epsilon) : std::nullopt, surface_path,
                   allocation_path, out);
    else if (*eval)
      cmd_eval(g, method, bases_path, allocation_path, out);
    else if (*diag)
      cmd_diagnose(g, methods, r_k, r_v, data, out);
  } catch (const UsageError &e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError &e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

} // namespace stiefkv::cli
