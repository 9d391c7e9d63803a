#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <sstream>

#include "commands.hpp"
#include "stiefkv/baselines.hpp"
#include "stiefkv/config.hpp"
#include "stiefkv/errors.hpp"
#include "stiefkv/stief.hpp"
#include "stiefkv/surface.hpp"

namespace py = pybind11;
using namespace stiefkv;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array &a) {
  if (a.ndim() != 2)
    throw DimensionError("expected a 2-D array, got " + std::to_string(a.ndim()) + "-D");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const Matrix &m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

config::RunConfig parse_config(const std::optional<std::string> &text,
                               std::optional<std::uint64_t> seed) {
  config::RunConfig c =
      text ? config::from_json(nlohmann::json::parse(*text)) : config::RunConfig{};
  if (seed)
    c.set_seed(*seed);
  c.validate();
  return c;
}

// Decoder stack plus its calibration records, built from a run config.
struct Model {
  config::RunConfig cfg;
  decoder::DecoderStack stack;
  std::vector<std::vector<decoder::ActivationRecord>> records;

  Model(const std::optional<std::string> &text, std::optional<std::uint64_t> seed)
      : cfg(parse_config(text, seed)), stack(config::make_stack(cfg)),
        records(decoder::capture_calibration(stack, config::make_calibration_inputs(cfg))) {}

  std::pair<stief::BasisStore, std::vector<surface::ErrorSurface>>
  train(const std::string &method, std::optional<std::vector<std::size_t>> ranks,
        std::size_t threads) const {
    cli::check_method(method);
    const auto rs = ranks ? *ranks : cfg.candidate_ranks();
    py::gil_scoped_release nogil;
    if (method == "stief") {
      auto res = stief::run_algorithm_1(stack, records, rs, rs, cfg.train, threads);
      return {std::move(res.store), std::move(res.surfaces)};
    }
    auto store = stief::baseline_store(baselines::parse_kind(method), stack, records, rs, rs);
    auto surfaces = stief::build_surfaces(stack, records, store);
    return {std::move(store), std::move(surfaces)};
  }

  double delta(const stief::BasisStore &store, std::size_t layer, std::size_t r_k,
               std::size_t r_v) const {
    if (layer >= records.size())
      throw DimensionError("layer " + std::to_string(layer) + " out of range");
    return stief::layer_output_delta(stack.config, stack.layers[layer], records[layer],
                                     {&store.key_basis(layer, r_k), store.value_bases(layer, r_v)});
  }
};

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Learned low-rank KV-cache projections";

  m.def("candidate_ranks", &stief::candidate_ranks, py::arg("d_h"), py::arg("lo") = 0.5,
        py::arg("hi") = 0.9, py::arg("count") = 5);
  m.def("compression_ratio", &surface::compression_ratio, py::arg("r_k"), py::arg("r_v"),
        py::arg("d_h"));
  m.def(
      "pareto_front",
      [](const std::vector<std::pair<double, std::size_t>> &pts) {
        std::vector<surface::ParetoPoint> p;
        for (const auto &[d, t] : pts)
          p.push_back({d, t});
        return surface::pareto_front(p);
      },
      py::arg("points"), "Indices of non-dominated (delta, total_rank) points.");
  m.def("sensitivity_weights", &surface::sensitivity_weights, py::arg("n_layers"));

  m.def(
      "ksvd_basis", [](const Array &k, std::size_t r) { return to_array(baselines::ksvd_basis(to_matrix(k), r)); },
      py::arg("keys"), py::arg("rank"));
  m.def(
      "eigen_value_basis",
      [](const Array &v, std::size_t r) {
        return to_array(baselines::eigen_value_basis(to_matrix(v), r));
      },
      py::arg("values"), py::arg("rank"));
  m.def(
      "reconstruction_error_sq",
      [](const Array &k, const Array &p) {
        return baselines::reconstruction_error_sq(to_matrix(k), to_matrix(p));
      },
      py::arg("keys"), py::arg("basis"));

  m.def("default_config", [] { return config::dump(config::RunConfig{}); });
  m.def(
      "fingerprint",
      [](const std::string &text) {
        return config::fingerprint_hex(config::fingerprint(parse_config(text, std::nullopt)));
      },
      py::arg("config_json"));

  py::class_<surface::ErrorSurface>(m, "Surface")
      .def(py::init<>())
      .def_readwrite("layer", &surface::ErrorSurface::layer)
      .def_readwrite("d_h", &surface::ErrorSurface::d_h)
      .def_readwrite("ranks_k", &surface::ErrorSurface::ranks_k)
      .def_readwrite("ranks_v", &surface::ErrorSurface::ranks_v)
      .def_readwrite("delta", &surface::ErrorSurface::delta);

  m.def(
      "allocate",
      [](const std::vector<surface::ErrorSurface> &surfaces, const std::string &policy,
         double epsilon, std::optional<std::pair<std::size_t, std::size_t>> uniform,
         std::optional<std::vector<double>> weights) {
        surface::RankAllocation a;
        switch (surface::parse_policy(policy)) {
        case surface::Policy::uniform:
          if (!uniform)
            throw UsageError("uniform policy needs ranks=(r_k, r_v)");
          a = surface::allocate_uniform(surfaces, uniform->first, uniform->second);
          break;
        case surface::Policy::pareto:
          a = surface::allocate_pareto(surfaces, epsilon);
          break;
        case surface::Policy::weighted_pareto:
          a = surface::allocate_weighted_pareto(
              surfaces, epsilon,
              weights ? *weights : surface::sensitivity_weights(surfaces.size()));
          break;
        }
        py::list out;
        for (const auto &c : a.layers) {
          py::dict d;
          d["r_k"] = c.r_k;
          d["r_v"] = c.r_v;
          d["delta"] = c.delta;
          d["ratio"] = c.ratio;
          d["fallback"] = c.fallback;
          out.append(d);
        }
        return out;
      },
      py::arg("surfaces"), py::arg("policy") = "pareto", py::arg("epsilon") = 0.03,
      py::arg("ranks") = py::none(), py::arg("weights") = py::none(),
      "Per-layer rank choices as a list of dicts.");

  py::class_<stief::BasisStore>(m, "Bases")
      .def_readonly("method", &stief::BasisStore::provenance)
      .def_readonly("d_h", &stief::BasisStore::d_h)
      .def_readonly("ranks_k", &stief::BasisStore::ranks_k)
      .def_readonly("ranks_v", &stief::BasisStore::ranks_v)
      .def_property_readonly("n_layers", [](const stief::BasisStore &s) { return s.layers.size(); })
      .def("key_basis",
           [](const stief::BasisStore &s, std::size_t l, std::size_t r) {
             return to_array(s.key_basis(l, r));
           })
      .def("value_bases",
           [](const stief::BasisStore &s, std::size_t l, std::size_t r) {
             py::list out;
             for (const auto &p : s.value_bases(l, r))
               out.append(to_array(p));
             return out;
           })
      .def("orthonormality_residual", &stief::BasisStore::max_orthonormality_residual);

  py::class_<Model>(m, "Model")
      .def(py::init<std::optional<std::string>, std::optional<std::uint64_t>>(),
           py::arg("config_json") = py::none(), py::arg("seed") = py::none())
      .def_property_readonly("n_layers", [](const Model &md) { return md.stack.layers.size(); })
      .def_property_readonly("d_h", [](const Model &md) { return md.stack.config.d_h; })
      .def_property_readonly("candidate_ranks", [](const Model &md) { return md.cfg.candidate_ranks(); })
      .def("config_json", [](const Model &md) { return config::dump(md.cfg); })
      .def("train", &Model::train, py::arg("method") = "stief", py::arg("ranks") = py::none(),
           py::arg("threads") = 1,
           "Bases and per-layer error surfaces for one method (stief, k_svd, eigen, kq_svd).")
      .def("delta", &Model::delta, py::arg("bases"), py::arg("layer"), py::arg("r_k"),
           py::arg("r_v"), "Mean relative layer-output error on the calibration set.");

  m.def(
      "run_cli",
      [](const std::vector<std::string> &args) {
        std::vector<const char *> argv{"stiefkv"};
        for (const auto &a : args)
          argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release nogil;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool in-process; returns (code, stdout, stderr).");
}
