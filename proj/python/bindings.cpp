#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ctxsens/aggregation.hpp"
#include "ctxsens/analysis.hpp"
#include "ctxsens/augmentation.hpp"
#include "ctxsens/corpus.hpp"
#include "ctxsens/evaluation.hpp"
#include "ctxsens/models.hpp"

namespace py = pybind11;
using namespace ctxsens;

namespace {

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

py::dict record_dict(const SensitivityRecord& r) {
  py::dict d;
  d["post_id"] = r.post_id;
  d["s_oc"] = r.s_oc.value;
  d["s_ic"] = r.s_ic.value;
  d["n_oc"] = r.s_oc.n_raters;
  d["n_ic"] = r.s_ic.n_raters;
  d["sem_oc"] = r.s_oc.sem;
  d["sem_ic"] = r.s_ic.sem;
  d["delta"] = r.delta;
  d["threshold"] = r.threshold;
  d["is_sensitive"] = r.is_sensitive;
  return d;
}

TrainConfig config_from(std::uint64_t seed, double lambda, std::size_t n_trees) {
  TrainConfig c;
  c.seed = seed;
  c.ridge.lambda = lambda;
  c.forest.n_trees = n_trees;
  return c;
}

Example example_from(const py::handle& h) {
  const py::dict d = py::reinterpret_borrow<py::dict>(h);
  Example e;
  e.id = d["id"].cast<std::string>();
  e.text = d["text"].cast<std::string>();
  e.target = d.contains("target") ? d["target"].cast<double>() : 0.0;
  if (d.contains("sensitive") && !d["sensitive"].is_none()) e.sensitive = d["sensitive"].cast<bool>();
  return e;
}

std::vector<Example> examples_from(const py::iterable& items) {
  std::vector<Example> out;
  for (const auto& h : items) out.push_back(example_from(h));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Context-sensitivity estimation core";
  m.attr("__version__") = std::string(kToolVersion);

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);

  py::class_<DatasetBundle>(m, "Bundle")
      .def_property_readonly("n_posts", [](const DatasetBundle& b) { return b.posts().size(); })
      .def("post_ids",
           [](const DatasetBundle& b) {
             std::vector<std::string> ids;
             for (const auto& p : b.posts()) ids.push_back(p.post_id);
             return ids;
           })
      .def("sensitivities",
           [](const DatasetBundle& b) {
             py::list out;
             for (const auto& r : compute_sensitivities(b).records) out.append(record_dict(r));
             return out;
           })
      .def("examples",
           [](const DatasetBundle& b, const std::string& label_rule) {
             py::list out;
             for (const auto& e : make_examples(b, compute_sensitivities(b), parse_label_rule(label_rule))) {
               py::dict d;
               d["id"] = e.id;
               d["text"] = e.text;
               d["target"] = e.target;
               d["sensitive"] = e.sensitive ? py::object(py::bool_(*e.sensitive)) : py::object(py::none());
               out.append(d);
             }
             return out;
           },
           py::arg("label_rule") = "absolute")
      .def("agreement",
           [](const DatasetBundle& b, const std::string& scheme) {
             const auto r = agreement(b.ic_annotations(),
                                      scheme == "binary" ? CategoryScheme::Binary : CategoryScheme::FourLabel);
             py::dict d;
             d["kappa"] = r.free_marginal_kappa;
             d["pairwise_agreement"] = r.mean_pairwise_agreement;
             d["n_items"] = r.n_items;
             return d;
           },
           py::arg("scheme") = "four_label");

  m.def(
      "load_bundle",
      [](const std::filesystem::path& posts, const std::filesystem::path& ic, const std::filesystem::path& oc,
         const std::string& format) { return load_bundle(BundlePaths{posts, ic, oc}, parse_format(format)); },
      py::arg("posts"), py::arg("ic"), py::arg("oc"), py::arg("format") = "jsonl");
  m.def(
      "load_combined", [](const std::filesystem::path& path) { return load_bundle(path); }, py::arg("path"));

  m.def("mse", [](const std::vector<double>& p, const std::vector<double>& g) { return mse(p, g); });
  m.def("mae", [](const std::vector<double>& p, const std::vector<double>& g) { return mae(p, g); });
  m.def("roc_auc", [](const std::vector<double>& s, const std::vector<bool>& y) { return roc_auc(s, y); });
  m.def("aupr", [](const std::vector<double>& s, const std::vector<bool>& y) { return aupr(s, y); });

  m.def(
      "paired_bootstrap",
      [](const std::vector<bool>& a, const std::vector<bool>& b, std::size_t resample_size, std::size_t n_resamples,
         std::uint64_t seed, const std::string& direction, bool with_replacement) {
        BootstrapOptions o;
        o.resample_size = resample_size;
        o.n_resamples = n_resamples;
        o.seed = seed;
        o.direction = parse_direction(direction);
        o.with_replacement = with_replacement;
        return to_python(paired_bootstrap(a, b, o).to_json());
      },
      py::arg("a"), py::arg("b"), py::arg("resample_size") = 100, py::arg("n_resamples") = 1000,
      py::arg("seed") = 0, py::arg("direction") = "a_greater", py::arg("with_replacement") = true);

  py::class_<RegressorModel>(m, "Model")
      .def_property_readonly("family", [](const RegressorModel& r) { return std::string(to_string(r.family())); })
      .def("predict",
           [](const RegressorModel& r, const std::vector<std::string>& texts) {
             std::vector<Example> ex(texts.size());
             for (std::size_t i = 0; i < texts.size(); ++i) {
               ex[i].id = std::to_string(i);
               ex[i].text = texts[i];
             }
             py::gil_scoped_release release;
             return r.predict_examples(ex);
           })
      .def("save", [](const RegressorModel& r, const std::filesystem::path& p) { save_model(r, p); })
      .def("metadata", [](const RegressorModel& r) {
        nlohmann::json j = {{"seed", r.metadata().seed},
                            {"hyperparameters", r.metadata().hyperparameters},
                            {"n_train", r.metadata().n_train},
                            {"training_fingerprint", r.metadata().training_fingerprint}};
        return to_python(j);
      });

  m.def("load_model", [](const std::filesystem::path& p) { return load_model(p); });

  m.def(
      "train",
      [](const std::string& family, const py::iterable& train_set, const py::iterable& validation, std::uint64_t seed,
         double lambda, std::size_t n_trees) {
        const auto tr = examples_from(train_set);
        const auto va = examples_from(validation);
        const auto cfg = config_from(seed, lambda, n_trees);
        py::gil_scoped_release release;
        return train(parse_family(family), tr, va, cfg);
      },
      py::arg("family"), py::arg("train"), py::arg("validation") = py::list(), py::arg("seed") = 0,
      py::arg("ridge_lambda") = 1.0, py::arg("n_trees") = 100);

  m.def(
      "cross_validate",
      [](const py::iterable& examples, const std::string& family, std::uint64_t seed, std::size_t repeats,
         double lambda, std::size_t n_trees) {
        const auto ex = examples_from(examples);
        SplitSpec split;
        split.seed = seed;
        split.n_repeats = repeats;
        const auto cfg = config_from(seed, lambda, n_trees);
        EvalReport report;
        {
          py::gil_scoped_release release;
          report = monte_carlo_cv(ex, parse_family(family), cfg, split);
        }
        return to_python(report.to_json());
      },
      py::arg("examples"), py::arg("family") = "ridge", py::arg("seed") = 0, py::arg("repeats") = 3,
      py::arg("ridge_lambda") = 1.0, py::arg("n_trees") = 100);

  m.def(
      "augment",
      [](const py::iterable& gold, const py::iterable& pool, std::size_t k, std::size_t cycles,
         const std::string& selection, bool single_shot, std::uint64_t seed, std::size_t repeats) {
        const auto g = examples_from(gold);
        std::vector<Post> posts;
        for (const auto& h : pool) {
          const py::dict d = py::reinterpret_borrow<py::dict>(h);
          posts.push_back({d["id"].cast<std::string>(), d["text"].cast<std::string>(), std::nullopt});
        }
        AugmentationConfig cfg;
        cfg.k_per_cycle = k;
        cfg.n_cycles = cycles;
        cfg.selection = parse_selection(selection);
        cfg.single_shot = single_shot;
        cfg.seed = seed;
        cfg.train.seed = seed;
        SplitSpec split;
        split.seed = seed;
        split.n_repeats = repeats;
        AugmentationCvResult res;
        {
          py::gil_scoped_release release;
          res = run_augmentation_cv(g, posts, cfg, split);
        }
        std::vector<double> curve;
        for (const auto& r : res.per_cycle) curve.push_back(r.mse.mean.value_or(std::nan("")));
        return curve;
      },
      py::arg("gold"), py::arg("pool"), py::arg("k") = 1000, py::arg("cycles") = 5,
      py::arg("selection") = "teacher_top_k", py::arg("single_shot") = false, py::arg("seed") = 0,
      py::arg("repeats") = 3);
}
