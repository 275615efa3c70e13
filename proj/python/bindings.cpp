// Python bindings: dataset generation, both training stages, evaluation,
// the losses and the key memory. Arrays cross the boundary as numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mqcl/config.hpp"
#include "mqcl/eval.hpp"
#include "mqcl/losses.hpp"
#include "mqcl/trainer.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace mqcl;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ConfigArg = std::variant<py::dict, std::string>;

PipelineConfig to_config(const ConfigArg& arg) {
    if (const auto* path = std::get_if<std::string>(&arg)) return load_config(*path);
    const auto text = py::module_::import("json").attr("dumps")(std::get<py::dict>(arg)).cast<std::string>();
    return pipeline_config_from_json(nlohmann::json::parse(text));
}

py::dict to_dict(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump()).cast<py::dict>();
}

torch::Tensor to_tensor(const Array& a) {
    std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

py::array_t<double> to_array(const torch::Tensor& t) {
    const auto c = t.detach().to(torch::kFloat64).contiguous();
    py::array_t<double> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
    std::copy(c.data_ptr<double>(), c.data_ptr<double>() + c.numel(), out.mutable_data());
    return out;
}

KeySnapshot snapshot(const Array& keys, const std::vector<int64_t>& index, const std::vector<int>& weather) {
    if (keys.ndim() != 2) throw std::invalid_argument("keys must be a 2-d array");
    if (static_cast<size_t>(keys.shape(0)) != index.size() || index.size() != weather.size())
        throw std::invalid_argument("keys, key_index and key_weather differ in length");
    KeySnapshot s;
    s.dim = static_cast<int>(keys.shape(1));
    s.keys.assign(keys.data(), keys.data() + keys.size());
    s.image_index = index;
    s.weather = weather;
    return s;
}

LossConfig with_tau(double tau) {
    LossConfig l;
    l.tau = tau;
    return l;
}

py::list log_rows(const std::vector<LogRecord>& log) {
    py::list out;
    for (const auto& r : log)
        out.append(py::dict(py::arg("step") = r.step, py::arg("stage") = r.stage, py::arg("contra") = r.contra,
                            py::arg("bayesian") = r.bayesian, py::arg("total") = r.total, py::arg("lr") = r.lr));
    return out;
}

py::list table_rows(const MetricsTable& t) {
    py::list out;
    for (const auto& r : t.rows)
        out.append(py::dict(py::arg("group") = r.group, py::arg("n") = r.n, py::arg("mae") = r.mae,
                            py::arg("rmse") = r.rmse));
    return out;
}

TensorDataset train_tensors(const fs::path& dir) {
    return to_tensor_dataset(load_split(dir, "train"), load_manifest(dir).num_classes);
}

py::list train_wrl_py(const ConfigArg& config, const std::string& data_dir, const std::string& out) {
    const auto cfg = to_config(config);
    const auto data = train_tensors(data_dir);
    std::vector<LogRecord> log;
    TrainHooks hooks;
    hooks.on_step = [&](const LogRecord& r) { log.push_back(r); };
    Checkpoint ckpt;
    {
        py::gil_scoped_release release;
        ckpt = train_wrl(cfg.model, cfg.loss, cfg.train, data, hooks);
    }
    ckpt.dataset = fs::absolute(data_dir).string();
    save_checkpoint(ckpt, out);
    return log_rows(log);
}

py::list train_crr_py(const ConfigArg& config, const std::string& ckpt_path, const std::string& out,
                      std::optional<std::string> data_dir) {
    const auto cfg = to_config(config);
    auto post_wrl = load_checkpoint(ckpt_path);
    post_wrl.loss = cfg.loss;
    const std::string dir = data_dir.value_or(post_wrl.dataset);
    if (dir.empty()) throw std::invalid_argument("train_crr: no dataset given and none recorded in the checkpoint");
    const auto data = train_tensors(dir);
    std::vector<LogRecord> log;
    TrainHooks hooks;
    hooks.on_step = [&](const LogRecord& r) { log.push_back(r); };
    Checkpoint ckpt;
    {
        py::gil_scoped_release release;
        ckpt = train_crr(post_wrl, cfg.train, data, hooks);
    }
    save_checkpoint(ckpt, out);
    return log_rows(log);
}

}  // namespace

PYBIND11_MODULE(mqcl, m) {
    m.doc() = "Multi-queue contrastive crowd counting under adverse weather";
    torch::set_num_threads(1);

    m.def(
        "load_config", [](const ConfigArg& config) { return to_dict(to_json(to_config(config))); }, py::arg("config"),
        "Full pipeline config with defaults filled in.");

    m.def(
        "generate_dataset",
        [](const ConfigArg& config, const std::string& out_dir) {
            const auto manifest = generate_dataset(to_config(config).data, out_dir);
            py::list entries;
            for (const auto& e : manifest.entries)
                entries.append(py::dict(py::arg("image_index") = e.image_index, py::arg("weather") = e.weather,
                                        py::arg("split") = e.split, py::arg("image") = e.image_path,
                                        py::arg("annotation") = e.annotation_path));
            return entries;
        },
        py::arg("config"), py::arg("out_dir"), "Writes a synthetic dataset; returns the manifest entries.");

    m.def("train_wrl", &train_wrl_py, py::arg("config"), py::arg("data_dir"), py::arg("out"),
          "Stage-1 training; saves a checkpoint and returns the step log.");
    m.def("train_crr", &train_crr_py, py::arg("config"), py::arg("ckpt"), py::arg("out"),
          py::arg("data_dir") = std::nullopt, "Stage-2 training from a post-WRL checkpoint; returns the step log.");

    m.def(
        "evaluate",
        [](const std::string& ckpt_path, const std::string& data_dir, const std::string& split) {
            const auto ckpt = load_checkpoint(ckpt_path);
            return table_rows(grouped_eval(density_model(ckpt), load_split(data_dir, split), ckpt.num_classes));
        },
        py::arg("ckpt"), py::arg("data_dir"), py::arg("split") = "test", "Per-weather, adverse and total MAE/RMSE rows.");

    m.def(
        "embed",
        [](const std::string& ckpt_path, const std::string& data_dir, const std::string& split, bool refined) {
            const auto vectors = embed(load_checkpoint(ckpt_path), load_split(data_dir, split), refined);
            const py::ssize_t n = static_cast<py::ssize_t>(vectors.size());
            const py::ssize_t dim = n ? static_cast<py::ssize_t>(vectors[0].values.size()) : 0;
            py::array_t<float> q({n, dim});
            py::array_t<int> weather(n);
            py::array_t<int64_t> index(n);
            for (py::ssize_t i = 0; i < n; ++i) {
                std::copy(vectors[i].values.begin(), vectors[i].values.end(), q.mutable_data(i, 0));
                weather.mutable_at(i) = vectors[i].weather;
                index.mutable_at(i) = vectors[i].image_index;
            }
            return py::make_tuple(q, weather, index);
        },
        py::arg("ckpt"), py::arg("data_dir"), py::arg("split") = "train", py::arg("refined") = false,
        "Projection vectors (N, C2) with weather labels and image indices.");

    m.def(
        "cluster_separation",
        [](const Array& vectors, const std::vector<int>& labels) {
            if (vectors.ndim() != 2) throw std::invalid_argument("vectors must be a 2-d array");
            std::vector<std::vector<float>> v(vectors.shape(0));
            for (py::ssize_t i = 0; i < vectors.shape(0); ++i)
                v[i].assign(vectors.data(i, 0), vectors.data(i, 0) + vectors.shape(1));
            return cluster_separation(v, labels);
        },
        py::arg("vectors"), py::arg("labels"), "Mean cosine silhouette.");

    m.def(
        "mae_rmse",
        [](const std::vector<double>& preds, const std::vector<double>& gts) {
            const auto e = mae_rmse(preds, gts);
            return py::make_tuple(e.mae, e.rmse);
        },
        py::arg("preds"), py::arg("gts"));
    m.def(
        "count_of", [](const Array& density) { return count_of(to_tensor(density)); }, py::arg("density"));
    m.def("lr_at", &lr_at, py::arg("step"), py::arg("total_steps"), py::arg("lr0"));

    m.def(
        "contra1",
        [](const Array& anchors, const std::vector<int64_t>& anchor_index, const Array& keys,
           const std::vector<int64_t>& key_index, const std::vector<int>& key_weather, double tau) {
            return contra1(to_tensor(anchors), anchor_index, snapshot(keys, key_index, key_weather), with_tau(tau))
                .item<double>();
        },
        py::arg("anchors"), py::arg("anchor_index"), py::arg("keys"), py::arg("key_index"), py::arg("key_weather"),
        py::arg("tau") = 0.05, "Same-image contrastive loss over the given keys.");
    m.def(
        "contra2",
        [](const Array& anchors, const Array& keys, const std::vector<int>& key_weather, int normal_class, double tau) {
            const std::vector<int64_t> index(key_weather.size(), 0);
            return contra2(to_tensor(anchors), snapshot(keys, index, key_weather), normal_class, with_tau(tau))
                .item<double>();
        },
        py::arg("anchors"), py::arg("keys"), py::arg("key_weather"), py::arg("normal_class") = 0,
        py::arg("tau") = 0.05, "Normal-class contrastive loss over the given keys.");
    m.def(
        "bayesian_loss",
        [](const Array& density, const Array& points, double sigma) {
            std::vector<Point> pts;
            if (points.size() > 0) {
                if (points.ndim() != 2 || points.shape(1) != 2) throw std::invalid_argument("points must be (N, 2)");
                for (py::ssize_t i = 0; i < points.shape(0); ++i)
                    pts.push_back({static_cast<float>(points.at(i, 0)), static_cast<float>(points.at(i, 1))});
            }
            return bayesian_loss(to_tensor(density), pts, sigma).item<double>();
        },
        py::arg("density"), py::arg("points"), py::arg("sigma") = 4.0,
        "Points are (x, y) in density-grid coordinates.");

    py::class_<MultiQueue>(m, "MultiQueue")
        .def(py::init([](int num_classes, int capacity, int dim, const std::string& layout) {
                 switch (parse_layout(layout)) {
                     case MemoryLayout::kSingleQueue: return MultiQueue::single_queue(num_classes, capacity, dim);
                     case MemoryLayout::kMemoryBank: return MultiQueue::memory_bank(num_classes, capacity, dim);
                     default: return MultiQueue(num_classes, capacity, dim);
                 }
             }),
             py::arg("num_classes"), py::arg("capacity"), py::arg("dim"), py::arg("layout") = "multi-queue")
        .def(
            "push",
            [](MultiQueue& q, const std::vector<float>& values, int64_t image_index, int weather) {
                q.push({values, image_index, weather});
            },
            py::arg("values"), py::arg("image_index"), py::arg("weather"))
        .def("fill", &MultiQueue::fill, py::arg("slot"))
        .def("__len__", &MultiQueue::size)
        .def_property_readonly("num_slots", &MultiQueue::num_slots)
        .def_property_readonly("capacity", &MultiQueue::capacity)
        .def(
            "entries",
            [](const MultiQueue& q) {
                py::list out;
                for (const auto& e : q.all()) out.append(py::make_tuple(e.values, e.image_index, e.weather));
                return out;
            },
            "(values, image_index, weather) tuples, oldest first per sub-queue.")
        .def(
            "positives",
            [](const MultiQueue& q, int64_t image_index) { return static_cast<int>(q.positives(image_index).size()); },
            py::arg("image_index"), "Number of stored keys with this image index.")
        .def(
            "of_class", [](const MultiQueue& q, int weather) { return static_cast<int>(q.of_class(weather).size()); },
            py::arg("weather"), "Number of stored keys of this weather class.");
}
