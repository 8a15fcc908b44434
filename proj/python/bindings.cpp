#include <sstream>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ebr/pipeline.hpp"

namespace py = pybind11;
using namespace ebr;

namespace {

EmbeddingMatrix to_embeddings(const MatrixF& m) { return EmbeddingMatrix{m}; }

ClusterAssignment to_assignment(const std::vector<ClusterId>& assign) {
    ClusterId k = 0;
    for (auto c : assign) k = std::max(k, static_cast<ClusterId>(c + 1));
    return ClusterAssignment(k, assign);
}

py::dict result_dict(const RetrievalResult& r) {
    py::dict d;
    std::vector<ItemIndex> items;
    std::vector<double> scores;
    for (const auto& s : r.merged) {
        items.push_back(s.item);
        scores.push_back(s.score);
    }
    d["items"] = items;
    d["scores"] = scores;
    d["quotas"] = r.plan.quotas;
    return d;
}

py::object json_to_py(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Divide-and-conquer embedding-based retrieval core";

    // Translators run newest first, so base classes go in first.
    auto base = py::register_exception<Error>(m, "Error");
    auto pipeline = py::register_exception<PipelineError>(m, "PipelineError", base.ptr());
    py::register_exception<StaleArtifactError>(m, "StaleArtifactError", pipeline.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<InputError>(m, "InputError", base.ptr());
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<EmptyDatasetError>(m, "EmptyDatasetError", base.ptr());
    py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
    py::register_exception<DivergedError>(m, "DivergedError", base.ptr());
    py::register_exception<IndexError>(m, "IndexError", PyExc_IndexError);
    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("num_users", &Dataset::num_users)
        .def_readonly("num_items", &Dataset::num_items)
        .def_readonly("sequences", &Dataset::sequences)
        .def_property_readonly("num_interactions", &Dataset::num_interactions)
        .def("user_id", [](const Dataset& d, std::uint32_t u) { return d.users.external(u); })
        .def("item_id", [](const Dataset& d, std::uint32_t i) { return d.items.external(i); })
        .def_static("from_sequences", &Dataset::from_sequences, py::arg("sequences"), py::arg("num_items"));

    py::class_<Split>(m, "Split")
        .def_readonly("train", &Split::train)
        .def_readonly("valid_target", &Split::valid_target)
        .def_readonly("test_target", &Split::test_target)
        .def_readonly("eligible_users", &Split::eligible_users);

    m.def("parse_movielens", [](const std::filesystem::path& p) { return parse_movielens(p); });
    m.def("load_dataset", &load_dataset);
    m.def("save_dataset", &save_dataset);
    m.def("filter_by_frequency", &filter_by_frequency, py::arg("dataset"), py::arg("min_item_freq"),
          py::arg("min_user_freq"));
    m.def("leave_last_out_split", &leave_last_out_split);

    m.def(
        "skipgram_pairs", [](const std::vector<ItemIndex>& seq, std::size_t window) { return skipgram_pairs(seq, window); },
        py::arg("sequence"), py::arg("window"));
    m.def("load_embeddings", [](const std::filesystem::path& p) { return load_embeddings(p).values; });
    m.def("save_embeddings", [](const MatrixF& v, const std::filesystem::path& p) { save_embeddings(to_embeddings(v), p); });

    m.def(
        "kmeans",
        [](const MatrixF& emb, std::size_t k, std::uint64_t seed, std::size_t max_iters) {
            KMeansConfig cfg;
            cfg.k = k;
            cfg.seed = seed;
            cfg.max_iters = max_iters;
            return kmeans(to_embeddings(emb), cfg).assign();
        },
        py::arg("embeddings"), py::arg("k"), py::arg("seed") = 1, py::arg("max_iters") = 100);
    m.def("load_clusters", [](const std::filesystem::path& p) { return load_clusters(p).assign(); });

    m.def("score", [](const VectorF& u, const VectorF& i) { return score(u, i); });
    m.def(
        "bce_loss", [](double r_pos, const std::vector<double>& r_negs) { return bce_loss(r_pos, r_negs); },
        py::arg("r_pos"), py::arg("r_negs"));

    py::class_<QuotaPlan>(m, "QuotaPlan")
        .def_readonly("quotas", &QuotaPlan::quotas)
        .def_readonly("total", &QuotaPlan::total)
        .def_readonly("alpha", &QuotaPlan::alpha)
        .def_readonly("capacities", &QuotaPlan::capacities);
    m.def(
        "compute_quotas",
        [](const std::vector<double>& p, double alpha, std::size_t m, const std::vector<std::size_t>& caps) {
            return compute_quotas(p, alpha, m, caps);
        },
        py::arg("p"), py::arg("alpha"), py::arg("m"), py::arg("capacities"));

    py::class_<PartitionedIndex>(m, "PartitionedIndex")
        .def(py::init([](const MatrixF& emb, const std::vector<ClusterId>& assign) {
                 return PartitionedIndex::build(to_embeddings(emb), to_assignment(assign));
             }),
             py::arg("embeddings"), py::arg("assignment"))
        .def_property_readonly("k", &PartitionedIndex::k)
        .def_property_readonly("dim", &PartitionedIndex::dim)
        .def_property_readonly("num_items", &PartitionedIndex::num_items)
        .def("ids", &PartitionedIndex::ids)
        .def(
            "topk",
            [](const PartitionedIndex& idx, ClusterId c, const VectorF& u, std::size_t k,
               const std::vector<ItemIndex>& exclude) {
                std::vector<std::pair<ItemIndex, double>> out;
                for (const auto& s : topk_in_cluster(idx, c, {u.data(), static_cast<std::size_t>(u.size())}, k,
                                                     ItemSet(exclude)))
                    out.emplace_back(s.item, s.score);
                return out;
            },
            py::arg("cluster"), py::arg("user"), py::arg("k"), py::arg("exclude") = std::vector<ItemIndex>{})
        .def(
            "retrieve",
            [](const PartitionedIndex& idx, const MatrixF& users, const std::vector<double>& p, double alpha,
               std::size_t m, const std::vector<ItemIndex>& exclude, bool parallel) {
                return result_dict(retrieve_merged(idx, users, p, alpha, m, ItemSet(exclude),
                                                   parallel ? Schedule::parallel : Schedule::serial));
            },
            py::arg("users"), py::arg("p"), py::arg("alpha"), py::arg("m"),
            py::arg("exclude") = std::vector<ItemIndex>{}, py::arg("parallel") = false);

    py::class_<TrainedModel, std::shared_ptr<TrainedModel>>(m, "SeqRecModel")
        .def_readonly("num_items", &TrainedModel::num_items)
        .def_readonly("num_clusters", &TrainedModel::num_clusters)
        .def_property_readonly("prompt", [](const TrainedModel& t) { return to_string(t.mode.prompt); })
        .def_property_readonly("negatives", [](const TrainedModel& t) { return to_string(t.mode.kind); })
        .def(
            "encode",
            [](const TrainedModel& t, const std::vector<ItemIndex>& hist, std::optional<ClusterId> task) {
                return t.encode_user(hist, task);
            },
            py::arg("history"), py::arg("task") = std::nullopt)
        .def("item_embeddings", &TrainedModel::item_embeddings);
    m.def("load_model", [](const std::filesystem::path& p) { return std::make_shared<TrainedModel>(load_model(p)); });

    py::class_<IntentHead>(m, "IntentHead")
        .def_property_readonly("k", &IntentHead::k)
        .def("predict", [](const IntentHead& h, const std::vector<ItemIndex>& hist) { return predict_intent(h, hist); });
    m.def("load_intent", [](const std::filesystem::path& p) { return load_intent(p); });

    m.def(
        "run_pipeline",
        [](const std::filesystem::path& config, const std::string& stage, const std::vector<std::string>& overrides,
           std::optional<std::uint64_t> seed, bool strict) {
            auto cfg = PipelineConfig::from_file(config);
            for (const auto& o : overrides) cfg.apply_override(o);
            if (seed) cfg.set_seed(*seed);
            std::ostringstream log;
            Pipeline p(cfg, strict, log);
            py::dict out;
            if (stage == "all") {
                out["report"] = json_to_py(p.run_all().to_json());
            } else {
                std::vector<std::string> paths;
                for (const auto& f : p.run_stage(stage)) paths.push_back(f.string());
                out["artifacts"] = paths;
            }
            out["log"] = log.str();
            out["cache_hits"] = p.cache_hits();
            out["computed"] = p.computed();
            return out;
        },
        py::arg("config"), py::arg("stage") = "all", py::arg("overrides") = std::vector<std::string>{},
        py::arg("seed") = std::nullopt, py::arg("strict") = false);
}
