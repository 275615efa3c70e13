#include "mqcl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mqcl {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

double count_of(const torch::Tensor& density) {
    return density.sum().item<double>();
}

ErrorStats mae_rmse(std::span<const double> preds, std::span<const double> gts) {
    if (preds.size() != gts.size()) throw std::invalid_argument("mae_rmse: length mismatch");
    if (preds.empty()) throw std::invalid_argument("mae_rmse: empty input");
    double abs_sum = 0.0, sq_sum = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const double e = preds[i] - gts[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
    }
    const auto n = static_cast<double>(preds.size());
    return {abs_sum / n, std::sqrt(sq_sum / n)};
}

// ---------------------------------------------------------------- tables

const MetricsRow& MetricsTable::row(const std::string& group) const {
    for (const auto& r : rows)
        if (r.group == group) return r;
    throw std::out_of_range("MetricsTable: no row '" + group + "'");
}

namespace {

std::string fmt_value(double v) {
    if (std::isnan(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

double parse_value(const std::string& s) {
    return s == "NA" ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
}

bool same_value(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

MetricsRow make_row(const std::string& group, const std::vector<double>& preds, const std::vector<double>& gts) {
    MetricsRow r{group, static_cast<int64_t>(preds.size()), std::numeric_limits<double>::quiet_NaN(),
                 std::numeric_limits<double>::quiet_NaN()};
    if (!preds.empty()) {
        const auto e = mae_rmse(preds, gts);
        r.mae = e.mae;
        r.rmse = e.rmse;
    }
    return r;
}

}  // namespace

std::string MetricsTable::to_csv() const {
    std::string out = "group,n,mae,rmse\n";
    for (const auto& r : rows)
        out += r.group + "," + std::to_string(r.n) + "," + fmt_value(r.mae) + "," + fmt_value(r.rmse) + "\n";
    return out;
}

MetricsTable MetricsTable::from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "group,n,mae,rmse")
        throw std::invalid_argument("metrics table: unexpected header");
    MetricsTable t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 4) throw std::invalid_argument("metrics table: malformed row '" + line + "'");
        t.rows.push_back({cells[0], std::stoll(cells[1]), parse_value(cells[2]), parse_value(cells[3])});
    }
    return t;
}

bool MetricsTable::operator==(const MetricsTable& other) const {
    if (rows.size() != other.rows.size() || checkpoint_id != other.checkpoint_id || dataset_id != other.dataset_id ||
        seed != other.seed)
        return false;
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& a = rows[i];
        const auto& b = other.rows[i];
        if (a.group != b.group || a.n != b.n || !same_value(a.mae, b.mae) || !same_value(a.rmse, b.rmse)) return false;
    }
    return true;
}

MetricsTable merge_tables(const MetricsTable& a, const MetricsTable& b) {
    if (a.rows.size() != b.rows.size()) throw std::invalid_argument("merge_tables: tables differ in groups");
    MetricsTable out = a;
    for (size_t i = 0; i < a.rows.size(); ++i) {
        const auto& ra = a.rows[i];
        const auto& rb = b.rows[i];
        if (ra.group != rb.group) throw std::invalid_argument("merge_tables: tables differ in groups");
        auto& r = out.rows[i];
        r.n = ra.n + rb.n;
        if (r.n == 0) continue;
        const double abs_sum = (ra.n ? ra.n * ra.mae : 0.0) + (rb.n ? rb.n * rb.mae : 0.0);
        const double sq_sum = (ra.n ? ra.n * ra.rmse * ra.rmse : 0.0) + (rb.n ? rb.n * rb.rmse * rb.rmse : 0.0);
        r.mae = abs_sum / static_cast<double>(r.n);
        r.rmse = std::sqrt(sq_sum / static_cast<double>(r.n));
    }
    return out;
}

// ---------------------------------------------------------------- inference

DensityModel density_model(const Checkpoint& ckpt) {
    DensityModel m;
    m.stride = ckpt.model.stride;
    m.density_stride = ckpt.model.density_stride();
    MqclNet net = ckpt.net;
    const bool refine = ckpt.stage == Stage::kPostCrr;
    m.forward = [net, refine](const torch::Tensor& batch) mutable {
        torch::NoGradGuard guard;
        auto r = encode(net->encoder_q, batch);
        if (refine) r = net->refiner(r);
        return net->head(r)[0];
    };
    return m;
}

namespace {

// (1, 3, Hp, Wp) reflect-padded to stride multiples; pads right and bottom.
torch::Tensor pad_to_stride(const Image& image, int stride) {
    auto x = image_to_tensor(image).unsqueeze(0);
    const int64_t pad_h = (stride - image.height % stride) % stride;
    const int64_t pad_w = (stride - image.width % stride) % stride;
    if (pad_h == 0 && pad_w == 0) return x;
    if (pad_h >= image.height || pad_w >= image.width)
        return F::pad(x, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReplicate));
    return F::pad(x, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReflect));
}

}  // namespace

torch::Tensor predict_full_image(const DensityModel& model, const Image& image) {
    const auto padded = pad_to_stride(image, model.stride);
    const auto density = model.forward(padded);
    const int64_t h = (image.height + model.density_stride - 1) / model.density_stride;
    const int64_t w = (image.width + model.density_stride - 1) / model.density_stride;
    return density.slice(0, 0, h).slice(1, 0, w);
}

MetricsTable grouped_eval(const DensityModel& model, const std::vector<CrowdSample>& samples, int num_classes) {
    if (samples.empty()) throw std::invalid_argument("grouped_eval: empty split");
    std::vector<std::vector<double>> preds(num_classes), gts(num_classes);
    std::vector<double> adv_p, adv_g, all_p, all_g;
    for (const auto& s : samples) {
        if (s.weather < 0 || s.weather >= num_classes) throw std::invalid_argument("grouped_eval: weather id out of range");
        const double p = count_of(predict_full_image(model, s.image));
        const auto g = static_cast<double>(s.points.size());
        preds[s.weather].push_back(p);
        gts[s.weather].push_back(g);
        if (s.weather != static_cast<int>(Weather::kNormal)) {
            adv_p.push_back(p);
            adv_g.push_back(g);
        }
        all_p.push_back(p);
        all_g.push_back(g);
    }
    MetricsTable t;
    for (int c = 0; c < num_classes; ++c) t.rows.push_back(make_row(weather_name(c), preds[c], gts[c]));
    t.rows.push_back(make_row("adverse", adv_p, adv_g));
    t.rows.push_back(make_row("total", all_p, all_g));
    return t;
}

std::vector<ProjVector> embed(const Checkpoint& ckpt, const std::vector<CrowdSample>& samples, bool refined) {
    if (refined && ckpt.stage != Stage::kPostCrr)
        throw std::invalid_argument("embed: refined vectors need a post-CRR checkpoint");
    torch::NoGradGuard guard;
    MqclNet net = ckpt.net;
    std::vector<ProjVector> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        auto r = encode(net->encoder_q, pad_to_stride(s.image, ckpt.model.stride));
        if (refined) r = net->refiner(r);
        const auto q = net->proj_q(r)[0].contiguous();
        out.push_back({std::vector<float>(q.data_ptr<float>(), q.data_ptr<float>() + q.numel()), s.image_index,
                       s.weather});
    }
    return out;
}

// ---------------------------------------------------------------- clustering

double cluster_separation(const std::vector<std::vector<float>>& vectors, const std::vector<int>& labels) {
    if (vectors.size() != labels.size()) throw std::invalid_argument("cluster_separation: one label per vector");
    std::map<int, int64_t> sizes;
    for (int l : labels) ++sizes[l];
    if (sizes.size() < 2) throw std::invalid_argument("cluster_separation: need at least two classes");
    for (const auto& [label, n] : sizes)
        if (n < 2) throw std::invalid_argument("cluster_separation: class " + std::to_string(label) + " has one member");

    const auto n = static_cast<int64_t>(vectors.size());
    const auto d = static_cast<int64_t>(vectors.front().size());
    auto x = torch::empty({n, d}, torch::kFloat64);
    for (int64_t i = 0; i < n; ++i) {
        if (static_cast<int64_t>(vectors[i].size()) != d) throw std::invalid_argument("cluster_separation: ragged input");
        for (int64_t j = 0; j < d; ++j) x[i][j] = static_cast<double>(vectors[i][j]);
    }
    x = F::normalize(x, F::NormalizeFuncOptions().p(2).dim(1).eps(1e-12));
    const auto dist = (1.0 - torch::matmul(x, x.t())).clamp_min(0.0).contiguous();
    const double* dp = dist.data_ptr<double>();

    std::vector<int> cls(labels.begin(), labels.end());
    std::vector<int> ids;
    for (const auto& [label, _] : sizes) ids.push_back(label);
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        std::map<int, double> sums;
        for (int64_t j = 0; j < n; ++j)
            if (j != i) sums[cls[j]] += dp[i * n + j];
        const double a = sums[cls[i]] / static_cast<double>(sizes[cls[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int l : ids)
            if (l != cls[i]) b = std::min(b, sums[l] / static_cast<double>(sizes[l]));
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

double cluster_separation(const std::vector<ProjVector>& vectors) {
    std::vector<std::vector<float>> v;
    std::vector<int> labels;
    for (const auto& p : vectors) {
        v.push_back(p.values);
        labels.push_back(p.weather);
    }
    return cluster_separation(v, labels);
}

double mean_cosine_to_class_centroid(const std::vector<ProjVector>& vectors, const MultiQueue& memory, int weather) {
    const auto entries = memory.of_class(weather);
    if (entries.empty()) throw std::invalid_argument("mean_cosine_to_class_centroid: no entries of that class");
    if (vectors.empty()) throw std::invalid_argument("mean_cosine_to_class_centroid: no vectors");
    std::vector<double> centroid(entries.front().values.size(), 0.0);
    for (const auto& e : entries)
        for (size_t j = 0; j < centroid.size(); ++j) centroid[j] += e.values[j];
    double cn = 0.0;
    for (double c : centroid) cn += c * c;
    cn = std::sqrt(cn);
    double total = 0.0;
    for (const auto& v : vectors) {
        double dot = 0.0, vn = 0.0;
        for (size_t j = 0; j < centroid.size(); ++j) {
            dot += centroid[j] * v.values.at(j);
            vn += static_cast<double>(v.values[j]) * v.values[j];
        }
        total += dot / std::max(cn * std::sqrt(vn), 1e-12);
    }
    return total / static_cast<double>(vectors.size());
}

// ---------------------------------------------------------------- reporting

namespace {

const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"};

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string svg_header(int w, int h, const std::string& title) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
           std::to_string(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
           "<text x=\"" + std::to_string(w / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + title + "</text>\n";
}

std::string legend(const std::vector<ReportInput>& inputs, int x, int y) {
    std::string s;
    for (size_t i = 0; i < inputs.size(); ++i) {
        const int yy = y + static_cast<int>(i) * 16;
        s += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(yy - 10) + "\" width=\"10\" height=\"10\" fill=\"" +
             kPalette[i % 8] + "\"/><text x=\"" + std::to_string(x + 14) + "\" y=\"" + std::to_string(yy) + "\">" +
             inputs[i].name + "</text>\n";
    }
    return s;
}

std::string bar_chart(const std::vector<ReportInput>& inputs) {
    const auto& groups = inputs.front().table.rows;
    const int w = 720, h = 360, left = 60, right = 160, top = 40, bottom = 40;
    double vmax = 0.0;
    for (const auto& in : inputs)
        for (const auto& r : in.table.rows)
            if (r.present()) vmax = std::max(vmax, r.mae);
    if (vmax <= 0.0) vmax = 1.0;
    const double plot_w = w - left - right, plot_h = h - top - bottom;
    const double slot = plot_w / static_cast<double>(groups.size());
    const double bar = slot * 0.8 / static_cast<double>(inputs.size());

    std::string s = svg_header(w, h, "MAE by weather group");
    s += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(h - bottom) + "\" x2=\"" +
         std::to_string(w - right) + "\" y2=\"" + std::to_string(h - bottom) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + std::to_string(left - 8) + "\" y=\"" + std::to_string(top) + "\" text-anchor=\"end\">" + num(vmax) +
         "</text>\n";
    for (size_t g = 0; g < groups.size(); ++g) {
        const double x0 = left + slot * static_cast<double>(g) + slot * 0.1;
        for (size_t i = 0; i < inputs.size(); ++i) {
            const auto& r = inputs[i].table.rows.at(g);
            if (!r.present()) continue;
            const double bh = plot_h * r.mae / vmax;
            s += "<rect x=\"" + num(x0 + bar * static_cast<double>(i)) + "\" y=\"" + num(h - bottom - bh) + "\" width=\"" +
                 num(bar) + "\" height=\"" + num(bh) + "\" fill=\"" + kPalette[i % 8] + "\"/>\n";
        }
        s += "<text x=\"" + num(x0 + slot * 0.4) + "\" y=\"" + std::to_string(h - bottom + 16) +
             "\" text-anchor=\"middle\">" + groups[g].group + "</text>\n";
    }
    s += legend(inputs, w - right + 16, top + 10);
    return s + "</svg>\n";
}

std::string loss_chart(const std::vector<ReportInput>& inputs) {
    const int w = 720, h = 360, left = 60, right = 160, top = 40, bottom = 40;
    double vmax = 0.0;
    size_t longest = 1;
    for (const auto& in : inputs) {
        longest = std::max(longest, in.log.size());
        for (const auto& r : in.log) vmax = std::max(vmax, r.total);
    }
    if (vmax <= 0.0) vmax = 1.0;
    const double plot_w = w - left - right, plot_h = h - top - bottom;
    std::string s = svg_header(w, h, "Training loss (total)");
    s += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(h - bottom) + "\" x2=\"" +
         std::to_string(w - right) + "\" y2=\"" + std::to_string(h - bottom) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + std::to_string(left - 8) + "\" y=\"" + std::to_string(top) + "\" text-anchor=\"end\">" + num(vmax) +
         "</text>\n";
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].log.empty()) continue;
        std::string pts;
        for (size_t k = 0; k < inputs[i].log.size(); ++k) {
            const double x = left + plot_w * static_cast<double>(k) / static_cast<double>(std::max<size_t>(longest - 1, 1));
            const double y = h - bottom - plot_h * std::max(0.0, inputs[i].log[k].total) / vmax;
            pts += num(x) + "," + num(y) + " ";
        }
        s += "<polyline fill=\"none\" stroke=\"" + std::string(kPalette[i % 8]) + "\" points=\"" + pts + "\"/>\n";
    }
    s += legend(inputs, w - right + 16, top + 10);
    return s + "</svg>\n";
}

}  // namespace

std::vector<fs::path> report(const std::vector<ReportInput>& inputs, const fs::path& out_dir) {
    if (inputs.empty()) throw std::invalid_argument("report: no inputs");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

    std::string csv = "run,group,n,mae,rmse\n";
    for (const auto& in : inputs)
        for (const auto& r : in.table.rows)
            csv += in.name + "," + r.group + "," + std::to_string(r.n) + "," + fmt_value(r.mae) + "," + fmt_value(r.rmse) + "\n";

    std::vector<fs::path> written{out_dir / "summary.csv", out_dir / "mae_by_weather.svg"};
    write_file(written[0], csv);
    write_file(written[1], bar_chart(inputs));
    const bool any_log = std::any_of(inputs.begin(), inputs.end(), [](const auto& in) { return !in.log.empty(); });
    if (any_log) {
        written.push_back(out_dir / "loss_curves.svg");
        write_file(written.back(), loss_chart(inputs));
    }
    return written;
}

}  // namespace mqcl
