// mqcl: dataset generation, two-stage training, evaluation and reporting.
//
//   mqcl gen-data  --spec <file> --out <dir>
//   mqcl train-wrl --config <file> --data <dir> --out <ckpt> [--log <file>]
//   mqcl train-crr --config <file> --ckpt <post-wrl> --out <ckpt> [--data <dir>] [--log <file>]
//   mqcl eval      --ckpt <file> --data <dir> [--split test] --out <dir>
//   mqcl embed     --ckpt <file> --data <dir> [--split train] [--refined] --out <file>
//   mqcl report    --in <dir>... --out <dir>

#include <torch/torch.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mqcl/config.hpp"
#include "mqcl/eval.hpp"
#include "mqcl/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class StepLogger {
public:
    StepLogger(const fs::path& path, int print_every) : out_(path), print_every_(print_every) {
        if (!out_) throw std::runtime_error("cannot open log " + path.string());
    }

    void operator()(const mqcl::LogRecord& r) {
        out_ << mqcl::to_jsonl(r) << '\n';
        if (print_every_ > 0 && r.step % print_every_ == 0) {
            const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - start_).count();
            std::fprintf(stderr, "[%6lldms] %s step %5lld  contra %.4f  bayes %.4f  total %.4f  lr %.2e\n",
                         static_cast<long long>(ms), r.stage.c_str(), static_cast<long long>(r.step), r.contra,
                         r.bayesian, r.total, r.lr);
        }
    }

private:
    std::ofstream out_;
    int print_every_;
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

mqcl::DatasetSpec read_spec(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const json j = json::parse(in);
    if (j.contains("data")) return mqcl::dataset_spec_from_json(j.at("data"));
    return mqcl::dataset_spec_from_json(j);
}

mqcl::TensorDataset load_train(const fs::path& dir) {
    const auto manifest = mqcl::load_manifest(dir);
    return mqcl::to_tensor_dataset(mqcl::load_split(dir, "train"), manifest.num_classes);
}

void print_table(const mqcl::MetricsTable& t) {
    std::printf("%-10s %6s %10s %10s\n", "group", "n", "MAE", "RMSE");
    for (const auto& r : t.rows) {
        if (r.present())
            std::printf("%-10s %6lld %10.3f %10.3f\n", r.group.c_str(), static_cast<long long>(r.n), r.mae, r.rmse);
        else
            std::printf("%-10s %6lld %10s %10s\n", r.group.c_str(), static_cast<long long>(r.n), "absent", "absent");
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Multi-queue contrastive crowd counting under adverse weather"};
    app.require_subcommand(1);
    int print_every = 25;
    app.add_option("--print-every", print_every, "Print a training line every N steps (0 disables)");

    std::string spec_path, out_path, config_path, data_dir, ckpt_path, log_path;
    std::string eval_split = "test", embed_split = "train";
    std::vector<std::string> in_dirs;
    bool refined = false;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic weather-imbalanced crowd dataset");
    gen->add_option("--spec", spec_path, "Dataset spec (JSON; a full pipeline config is accepted)")->required();
    gen->add_option("--out", out_path, "Output dataset directory")->required();

    auto* wrl = app.add_subcommand("train-wrl", "Train the weather-aware representation stage");
    wrl->add_option("--config", config_path, "Pipeline config (JSON)")->required();
    wrl->add_option("--data", data_dir, "Dataset directory")->required();
    wrl->add_option("--out", out_path, "Output checkpoint")->required();
    wrl->add_option("--log", log_path, "Step log (JSON lines); default <out>.log.jsonl");

    auto* crr = app.add_subcommand("train-crr", "Train the refinement stage from a post-WRL checkpoint");
    crr->add_option("--config", config_path, "Pipeline config (JSON)")->required();
    crr->add_option("--ckpt", ckpt_path, "Post-WRL checkpoint")->required();
    crr->add_option("--out", out_path, "Output checkpoint")->required();
    crr->add_option("--data", data_dir, "Dataset directory (default: the one recorded in the checkpoint)");
    crr->add_option("--log", log_path, "Step log (JSON lines); default <out>.log.jsonl");

    auto* ev = app.add_subcommand("eval", "Per-weather MAE/RMSE of a checkpoint");
    ev->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    ev->add_option("--data", data_dir, "Dataset directory")->required();
    ev->add_option("--split", eval_split, "Split to evaluate")->capture_default_str();
    ev->add_option("--out", out_path, "Output directory")->required();

    auto* emb = app.add_subcommand("embed", "Dump projection vectors with weather labels");
    emb->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    emb->add_option("--data", data_dir, "Dataset directory")->required();
    emb->add_option("--split", embed_split, "Split to embed")->capture_default_str();
    emb->add_flag("--refined", refined, "Project refined representations (post-CRR checkpoints)");
    emb->add_option("--out", out_path, "Output CSV")->required();

    auto* rep = app.add_subcommand("report", "Summarize eval directories into a table and plots");
    rep->add_option("--in", in_dirs, "Eval output directories")->required()->expected(1, -1);
    rep->add_option("--out", out_path, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const auto spec = read_spec(spec_path);
            const auto manifest = mqcl::generate_dataset(spec, out_path);
            const auto hist = manifest.class_histogram();
            std::printf("wrote %zu images to %s (", manifest.entries.size(), out_path.c_str());
            for (size_t c = 0; c < hist.size(); ++c) std::printf("%s%s=%d", c ? " " : "", mqcl::weather_name(int(c)), hist[c]);
            std::printf(")\n");
        } else if (*wrl) {
            const auto cfg = mqcl::load_config(config_path);
            cfg.model.validate();
            cfg.loss.validate();
            cfg.train.validate(cfg.model);
            const auto data = load_train(data_dir);
            StepLogger logger(log_path.empty() ? out_path + ".log.jsonl" : log_path, print_every);
            mqcl::TrainHooks hooks;
            hooks.on_step = [&](const mqcl::LogRecord& r) { logger(r); };
            auto ckpt = mqcl::train_wrl(cfg.model, cfg.loss, cfg.train, data, hooks);
            ckpt.dataset = fs::absolute(data_dir).string();
            mqcl::save_checkpoint(ckpt, out_path);
            std::printf("saved %s checkpoint to %s\n", mqcl::stage_name(ckpt.stage), out_path.c_str());
        } else if (*crr) {
            const auto cfg = mqcl::load_config(config_path);
            auto post_wrl = mqcl::load_checkpoint(ckpt_path);
            post_wrl.loss = cfg.loss;
            if (data_dir.empty()) data_dir = post_wrl.dataset;
            if (data_dir.empty()) throw std::runtime_error("train-crr: no --data given and none recorded in the checkpoint");
            const auto data = load_train(data_dir);
            StepLogger logger(log_path.empty() ? out_path + ".log.jsonl" : log_path, print_every);
            mqcl::TrainHooks hooks;
            hooks.on_step = [&](const mqcl::LogRecord& r) { logger(r); };
            auto ckpt = mqcl::train_crr(post_wrl, cfg.train, data, hooks);
            ckpt.dataset = fs::absolute(data_dir).string();
            mqcl::save_checkpoint(ckpt, out_path);
            std::printf("saved %s checkpoint to %s\n", mqcl::stage_name(ckpt.stage), out_path.c_str());
        } else if (*ev) {
            const auto ckpt = mqcl::load_checkpoint(ckpt_path);
            const auto manifest = mqcl::load_manifest(data_dir);
            const auto samples = mqcl::load_split(data_dir, eval_split);
            auto table = mqcl::grouped_eval(mqcl::density_model(ckpt), samples, manifest.num_classes);
            fs::create_directories(out_path);
            write_text(fs::path(out_path) / "metrics.csv", table.to_csv());
            const json meta{{"checkpoint", fs::absolute(ckpt_path).string()},
                            {"stage", mqcl::stage_name(ckpt.stage)},
                            {"dataset", fs::absolute(data_dir).string()},
                            {"split", eval_split},
                            {"seed", ckpt.train.seed}};
            write_text(fs::path(out_path) / "metadata.json", meta.dump(1) + "\n");
            print_table(table);
        } else if (*emb) {
            const auto ckpt = mqcl::load_checkpoint(ckpt_path);
            const auto vectors = mqcl::embed(ckpt, mqcl::load_split(data_dir, embed_split), refined);
            std::ofstream out(out_path);
            if (!out) throw std::runtime_error("cannot open " + out_path);
            out << "image_index,weather";
            for (int j = 0; j < ckpt.model.c2; ++j) out << ",v" << j;
            out << '\n';
            for (const auto& v : vectors) {
                out << v.image_index << ',' << v.weather;
                for (float x : v.values) out << ',' << x;
                out << '\n';
            }
            std::printf("wrote %zu vectors to %s; weather silhouette (cosine) = %.4f\n", vectors.size(),
                        out_path.c_str(), mqcl::cluster_separation(vectors));
        } else if (*rep) {
            std::vector<mqcl::ReportInput> inputs;
            for (const auto& dir : in_dirs) {
                mqcl::ReportInput in;
                in.name = fs::path(dir).lexically_normal().filename().string();
                if (in.name.empty()) in.name = fs::path(dir).lexically_normal().parent_path().filename().string();
                in.table = mqcl::MetricsTable::from_csv(read_text(fs::path(dir) / "metrics.csv"));
                std::vector<fs::path> logs;
                for (const auto& e : fs::directory_iterator(dir))
                    if (e.path().string().ends_with(".jsonl")) logs.push_back(e.path());
                std::sort(logs.begin(), logs.end());
                // Otherwise fall back to the step log written next to the evaluated checkpoint.
                if (logs.empty() && fs::exists(fs::path(dir) / "metadata.json")) {
                    const auto meta = json::parse(read_text(fs::path(dir) / "metadata.json"));
                    const fs::path log = meta.value("checkpoint", std::string()) + ".log.jsonl";
                    if (meta.contains("checkpoint") && fs::exists(log)) logs.push_back(log);
                }
                for (const auto& l : logs) {
                    auto records = mqcl::read_log(l);
                    in.log.insert(in.log.end(), records.begin(), records.end());
                }
                inputs.push_back(std::move(in));
            }
            for (const auto& p : mqcl::report(inputs, out_path)) std::printf("wrote %s\n", p.string().c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
