// Python bindings. Matrices cross the boundary as float64 numpy arrays.

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fvit/bench.hpp"
#include "fvit/error.hpp"
#include "fvit/explain.hpp"
#include "fvit/pipeline.hpp"
#include "fvit/trainer.hpp"

namespace py = pybind11;
using namespace fvit;

namespace {

FaceRecord make_record(const Matrix& patches, int identity, const std::string& occlusion) {
  FaceRecord r;
  r.identity = identity;
  r.occlusion = occlusion_from_string(occlusion);
  r.patches = patches;
  r.image_vec = mean_patch(patches);
  validate_record(r);
  return r;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["p_at_1"] = r.p_at_1;
  d["rp"] = r.rp;
  d["m_at_r"] = r.m_at_r;
  d["evaluated"] = r.evaluated;
  d["excluded"] = r.excluded;
  return d;
}

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json py_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_fvit, m) {
  m.doc() = "Two-stage occlusion-robust face retrieval over patch embeddings";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  // ---- records and galleries ------------------------------------------------
  py::class_<FaceRecord>(m, "FaceRecord")
      .def(py::init(&make_record), py::arg("patches"), py::arg("identity") = 0, py::arg("occlusion") = "none")
      .def_readonly("identity", &FaceRecord::identity)
      .def_property_readonly("occlusion", [](const FaceRecord& r) { return to_string(r.occlusion); })
      .def_readonly("patches", &FaceRecord::patches)
      .def_property_readonly("image_vec", [](const FaceRecord& r) { return RowVector(r.image_vec.row(0)); })
      .def_property_readonly("grid", &FaceRecord::grid)
      .def_property_readonly("dim", &FaceRecord::dim)
      .def("__eq__", &FaceRecord::operator==)
      .def("__repr__", [](const FaceRecord& r) {
        return "FaceRecord(identity=" + std::to_string(r.identity) + ", occlusion=" + to_string(r.occlusion) +
               ", patches=" + std::to_string(r.num_patches()) + "x" + std::to_string(r.dim()) + ")";
      });

  py::class_<Gallery>(m, "Gallery")
      .def(py::init<>())
      .def(py::init<std::vector<FaceRecord>>(), py::arg("records"))
      .def("add", &Gallery::add)
      .def("__len__", &Gallery::size)
      .def("__getitem__",
           [](const Gallery& g, std::ptrdiff_t i) {
             const auto n = static_cast<std::ptrdiff_t>(g.size());
             if (i < 0) i += n;
             if (i < 0 || i >= n) throw py::index_error("gallery index out of range");
             return g[static_cast<std::size_t>(i)];
           })
      .def_property_readonly("id_counts", &Gallery::id_counts)
      .def("__eq__", &Gallery::operator==)
      .def("save", [](const Gallery& g, const std::filesystem::path& p) { save_gallery(g, p); })
      .def_static("load", &load_gallery)
      .def("to_bytes", [](const Gallery& g) {
        const auto b = encode_gallery(g);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      })
      .def_static("from_bytes", [](const py::bytes& b) {
        const std::string s = b;
        return decode_gallery(std::vector<std::uint8_t>(s.begin(), s.end()));
      });

  m.def(
      "generate_synthetic",
      [](int identities, int per_id, int queries_per_id, double sigma, double occluded_fraction,
         const std::string& occlusion, int grid, int dim, std::uint64_t seed) {
        SynthConfig c;
        c.n_identities = identities;
        c.records_per_identity = per_id;
        c.queries_per_identity = queries_per_id;
        c.sigma = sigma;
        c.occluded_fraction = occluded_fraction;
        c.occlusion_kind = occlusion_from_string(occlusion);
        c.grid = grid;
        c.dim = dim;
        c.seed = seed;
        SyntheticSet s = generate_synthetic(c);
        return py::make_tuple(std::move(s.gallery), std::move(s.queries));
      },
      py::arg("identities") = 20, py::arg("per_id") = 10, py::arg("queries_per_id") = 1, py::arg("sigma") = 0.7,
      py::arg("occluded_fraction") = 0.5, py::arg("occlusion") = "mask", py::arg("grid") = kDefaultGrid,
      py::arg("dim") = kDefaultDim, py::arg("seed") = 0, "Returns (gallery, queries).");

  // ---- transport ------------------------------------------------------------
  m.def("exact_assignment_oracle", &exact_assignment_oracle, py::arg("cost"));
  m.def(
      "sinkhorn",
      [](const Matrix& cost, std::optional<Eigen::VectorXd> u, std::optional<Eigen::VectorXd> v, double epsilon,
         int max_iters, double tol, bool fixed_iterations) {
        FlowProblem fp;
        fp.cost = cost;
        fp.u = u ? *u : Eigen::VectorXd::Constant(cost.rows(), 1.0 / static_cast<double>(cost.rows()));
        fp.v = v ? *v : Eigen::VectorXd::Constant(cost.cols(), 1.0 / static_cast<double>(cost.cols()));
        SinkhornOptions o;
        o.epsilon = epsilon;
        o.max_iters = max_iters;
        o.tol = tol;
        o.fixed_iterations = fixed_iterations;
        const SinkhornResult r = sinkhorn(fp, o);
        py::dict d;
        d["flow"] = r.flow;
        d["distance"] = r.distance;
        d["iterations"] = r.iterations;
        d["converged"] = r.converged;
        return d;
      },
      py::arg("cost"), py::arg("u") = py::none(), py::arg("v") = py::none(), py::arg("epsilon") = 0.01,
      py::arg("max_iters") = 500, py::arg("tol") = 1e-6, py::arg("fixed_iterations") = false,
      "Entropic transport; marginals default to uniform.");
  m.def(
      "emd_similarity",
      [](const FaceRecord& a, const FaceRecord& b, const std::string& scheme) {
        EmdOptions o;
        o.scheme = scheme == "uniform" ? WeightScheme::Uniform : WeightScheme::CrossCorrelation;
        if (scheme != "uniform" && scheme != "cc") throw ConfigError("scheme must be uniform or cc");
        return emd_similarity(a, b, o);
      },
      py::arg("a"), py::arg("b"), py::arg("scheme") = "cc");

  // ---- models ---------------------------------------------------------------
  py::class_<ModelWeights>(m, "ModelWeights")
      .def_property_readonly("config", [](const ModelWeights& w) { return json_to_py(to_json(w.config)); })
      .def_property_readonly("parameter_count", [](const ModelWeights& w) { return parameter_count(w); })
      .def("save", [](const ModelWeights& w, const std::filesystem::path& p) { save_weights(w, p); })
      .def_static("load", [](const std::filesystem::path& p) { return load_weights(p); })
      .def("flat", [](const ModelWeights& w) { return flatten_params(w); });

  m.def(
      "init_model",
      [](const py::object& config, std::uint64_t seed) {
        return init_random(model_config_from_json(py_to_json(config)), seed);
      },
      py::arg("config"), py::arg("seed") = 0, "config: dict of variant, depth, heads, dim, grid, out_dim, use_pos.");
  m.def(
      "score_pair_h2l",
      [](const FaceRecord& a, const FaceRecord& b, const ModelWeights& w) { return score_pair_h2l(a, b, w).score; },
      py::arg("a"), py::arg("b"), py::arg("weights"));
  m.def("pair_score", &pair_score, py::arg("weights"), py::arg("a"), py::arg("b"));

  m.def(
      "arcface_loss",
      [](const Matrix& features, const std::vector<int>& labels, const Matrix& class_weights, double margin,
         double scale) {
        ArcFaceParams p;
        p.margin = margin;
        p.scale = scale;
        p.class_weights = class_weights;
        const ArcFaceResult r = arcface_loss(features, labels, p);
        return py::make_tuple(r.loss, r.d_features, r.d_class_weights);
      },
      py::arg("features"), py::arg("labels"), py::arg("class_weights"), py::arg("margin") = 0.5,
      py::arg("scale") = 30.0, "Returns (loss, d_features, d_class_weights).");

  m.def(
      "train",
      [](const ModelWeights& init, const Gallery& data, const py::object& config) {
        const TrainConfig tc = train_config_from_json(py_to_json(config));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(init, data, tc);
        }
        return py::make_tuple(std::move(r.weights), json_to_py(to_json(r.history)));
      },
      py::arg("init"), py::arg("data"), py::arg("config") = py::dict(), "Returns (weights, history dict).");

  // ---- pipeline -------------------------------------------------------------
  m.def(
      "stage1_rank",
      [](const FaceRecord& q, const Gallery& g) {
        std::vector<std::pair<int, double>> out;
        for (const ScoredIndex& s : stage1_rank(q, g)) out.emplace_back(s.index, s.score);
        return out;
      },
      py::arg("query"), py::arg("gallery"), "List of (gallery index, cosine), best first.");

  py::class_<RankingResult>(m, "RankingResult")
      .def_readonly("query_index", &RankingResult::query_index)
      .def_readonly("query_identity", &RankingResult::query_identity)
      .def_readonly("predicted_identity", &RankingResult::predicted_identity)
      .def_readonly("flagged", &RankingResult::flagged)
      .def_readonly("unconverged", &RankingResult::unconverged)
      .def_property_readonly("order",
                             [](const RankingResult& r) {
                               std::vector<int> o;
                               for (const Candidate& c : r.ranking) o.push_back(c.gallery_index);
                               return o;
                             })
      .def_property_readonly("blended", [](const RankingResult& r) {
        std::vector<double> o;
        for (const Candidate& c : r.ranking) o.push_back(c.blended);
        return o;
      });

  m.def(
      "run_pipeline",
      [](const Gallery& queries, const Gallery& gallery, const std::string& reranker, int k, double alpha,
         bool normalize, const ModelWeights* weights, int workers) {
        PipelineConfig pc;
        pc.reranker = reranker_from_string(reranker);
        pc.k = k;
        pc.alpha = alpha;
        pc.normalize = normalize;
        pc.weights = weights;
        pc.workers = workers;
        py::gil_scoped_release release;
        return run_pipeline(queries, gallery, pc);
      },
      py::arg("queries"), py::arg("gallery"), py::arg("reranker") = "none", py::arg("k") = 100, py::arg("alpha") = 0.7,
      py::arg("normalize") = true, py::arg("weights") = nullptr, py::arg("workers") = 1);
  m.def(
      "evaluate", [](const std::vector<RankingResult>& r, const Gallery& g) { return report_dict(evaluate(r, g)); },
      py::arg("results"), py::arg("gallery"));
  m.def(
      "retrieval_metrics",
      [](const std::vector<bool>& relevance, int r) {
        const RetrievalMetrics x = retrieval_metrics(relevance, r);
        return py::make_tuple(x.p_at_1, x.rp, x.m_at_r);
      },
      py::arg("relevance"), py::arg("r"), "Returns (P@1, RP, M@R).");

  // ---- explain / bench ------------------------------------------------------
  m.def(
      "cc_heatmap",
      [](const FaceRecord& a, const FaceRecord& b) {
        const HeatmapPair h = cc_heatmap(a, b);
        return py::make_tuple(h.a_to_b.raw, h.b_to_a.raw);
      },
      py::arg("a"), py::arg("b"), "Returns (a-to-b, b-to-a) raw grid x grid maps.");
  m.def("normalize_map", &normalize_map);
  m.def("fit_loglog_slope", &fit_loglog_slope, py::arg("x"), py::arg("y"));
  m.def(
      "time_reranker",
      [](const std::string& kind, int n_patches, int d, int n_queries, int k, int reps) {
        TimingStats t;
        {
          py::gil_scoped_release release;
          t = time_reranker(reranker_from_string(kind), n_patches, d, n_queries, k, reps);
        }
        py::dict out;
        out["median"] = t.median;
        out["iqr"] = t.iqr;
        out["seconds"] = t.seconds;
        out["unstable"] = t.unstable;
        return out;
      },
      py::arg("kind"), py::arg("n_patches"), py::arg("d"), py::arg("n_queries") = 2, py::arg("k") = 10,
      py::arg("reps") = 5);
}
