#include "doctest_torch.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

#include "fixtures.hpp"
#include "mqcl/eval.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace mqcl;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

oracle::Mat to_mat(const std::vector<std::vector<float>>& v) {
    oracle::Mat m;
    for (const auto& row : v) m.emplace_back(row.begin(), row.end());
    return m;
}

}  // namespace

TEST_CASE("count_of") {
    CHECK(count_of(torch::zeros({4, 4})) == 0.0);
    auto one = torch::zeros({4, 4});
    one[1][2] = 3.5;
    CHECK(count_of(one) == doctest::Approx(3.5));
    auto bumps = torch::zeros({16, 16}, torch::kFloat64);
    bumps.slice(0, 0, 4).slice(1, 0, 4).fill_(1.0 / 16);
    bumps.slice(0, 10, 12).slice(1, 10, 12).fill_(0.25);
    CHECK(std::abs(count_of(bumps) - 2.0) < 1e-6);
}

TEST_CASE("mae_rmse") {
    const std::vector<double> p1{10, 20}, g1{12, 18};
    CHECK(mae_rmse(p1, g1).mae == doctest::Approx(2.0));
    CHECK(mae_rmse(p1, g1).rmse == doctest::Approx(2.0));
    CHECK(mae_rmse(p1, p1).mae == 0.0);
    CHECK(mae_rmse(p1, p1).rmse == 0.0);
    const std::vector<double> p2{0, 10}, g2{0, 0};
    CHECK(mae_rmse(p2, g2).mae == doctest::Approx(5.0));
    CHECK(mae_rmse(p2, g2).rmse == doctest::Approx(std::sqrt(50.0)).epsilon(1e-12));
    const std::vector<double> empty, one{1};
    CHECK_THROWS_AS(mae_rmse(empty, empty), std::invalid_argument);
    CHECK_THROWS_AS(mae_rmse(p1, one), std::invalid_argument);
}

TEST_CASE("grouped_eval on a stub model") {
    // Predictions 10, 25, 40 against ground truths 12, 25, 33.
    const std::vector<CrowdSample> split{fixture::constant_sample(0.10f, 12, 0), fixture::constant_sample(0.25f, 25, 1),
                                         fixture::constant_sample(0.40f, 33, 2)};
    const auto t = grouped_eval(fixture::constant_stub(), split, 4);
    REQUIRE(t.rows.size() == 6);
    CHECK(t.row("normal").n == 1);
    CHECK(t.row("normal").mae == doctest::Approx(2.0).epsilon(1e-5));
    CHECK(t.row("haze").mae == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(t.row("rain").mae == doctest::Approx(7.0).epsilon(1e-5));
    CHECK(t.row("snow").n == 0);
    CHECK(std::isnan(t.row("snow").mae));
    CHECK(t.row("adverse").n == 2);
    CHECK(t.row("adverse").mae == doctest::Approx(3.5).epsilon(1e-5));
    CHECK(t.row("adverse").rmse == doctest::Approx(std::sqrt(24.5)).epsilon(1e-5));
    CHECK(t.row("total").mae == doctest::Approx(3.0).epsilon(1e-5));
    CHECK(t.row("total").rmse == doctest::Approx(std::sqrt(53.0 / 3.0)).epsilon(1e-5));
    for (const auto& r : t.rows)
        if (r.present()) CHECK(r.mae <= r.rmse + 1e-12);

    const std::vector<CrowdSample> normal_only{fixture::constant_sample(0.1f, 10, 0)};
    const auto n = grouped_eval(fixture::constant_stub(), normal_only, 4);
    CHECK_FALSE(n.row("adverse").present());
    CHECK_THROWS_AS(grouped_eval(fixture::constant_stub(), {}, 4), std::invalid_argument);
    CHECK_THROWS_AS(n.row("fog"), std::out_of_range);
}

TEST_CASE("padding preserves the mass of a margin-ignoring stub") {
    torch::manual_seed(0);
    for (int size : {64, 72, 96, 120}) {
        CrowdSample s;
        s.image = Image(size, size);
        const auto noise = torch::rand({size * size * 3});
        std::copy(noise.data_ptr<float>(), noise.data_ptr<float>() + noise.numel(), s.image.pixels.begin());
        double mass = 0.0;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) mass += s.image.at(y, x, 0);
        const auto stub = fixture::pooling_stub();
        const auto d = predict_full_image(stub, s.image);
        CHECK(d.size(0) == size / 8);
        CHECK(count_of(d) == doctest::Approx(mass / 64.0).epsilon(1e-5));
    }
}

TEST_CASE("grouped_eval over concatenated splits equals the merged tables") {
    std::vector<CrowdSample> a, b;
    SplitMix64 rng(4);
    for (int i = 0; i < 12; ++i) {
        auto s = fixture::constant_sample(static_cast<float>(rng.uniform(0.0, 0.5)), rng.uniform_int(0, 40),
                                          rng.uniform_int(0, 3));
        (i % 3 == 0 ? b : a).push_back(std::move(s));
    }
    std::vector<CrowdSample> all = a;
    all.insert(all.end(), b.begin(), b.end());
    const auto stub = fixture::constant_stub();
    const auto whole = grouped_eval(stub, all, 4);
    const auto merged = merge_tables(grouped_eval(stub, a, 4), grouped_eval(stub, b, 4));
    REQUIRE(whole.rows.size() == merged.rows.size());
    for (size_t i = 0; i < whole.rows.size(); ++i) {
        CHECK(whole.rows[i].group == merged.rows[i].group);
        CHECK(whole.rows[i].n == merged.rows[i].n);
        if (!whole.rows[i].present()) continue;
        CHECK(whole.rows[i].mae == doctest::Approx(merged.rows[i].mae).epsilon(1e-12));
        CHECK(whole.rows[i].rmse == doctest::Approx(merged.rows[i].rmse).epsilon(1e-12));
    }
}

TEST_CASE("metrics table csv round trip") {
    const std::vector<CrowdSample> split{fixture::constant_sample(0.10f, 12, 0), fixture::constant_sample(0.25f, 20, 1)};
    const auto t = grouped_eval(fixture::constant_stub(), split, 4);
    const std::string csv = t.to_csv();
    const auto back = MetricsTable::from_csv(csv);
    CHECK(back.to_csv() == csv);
    REQUIRE(back.rows.size() == t.rows.size());
    for (size_t i = 0; i < t.rows.size(); ++i) {
        CHECK(back.rows[i].group == t.rows[i].group);
        CHECK(back.rows[i].n == t.rows[i].n);
        if (t.rows[i].present()) CHECK(std::abs(back.rows[i].mae - t.rows[i].mae) < 1e-6);
        else CHECK(std::isnan(back.rows[i].mae));
    }
    CHECK_THROWS_AS(MetricsTable::from_csv("group,n\n"), std::invalid_argument);
}

TEST_CASE("silhouette matches the brute-force oracle") {
    const auto v = fixture::six_points();
    const auto labels = fixture::six_labels();
    CHECK(cluster_separation(v, labels) == doctest::Approx(oracle::silhouette(to_mat(v), labels)).epsilon(1e-9));

    SplitMix64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = rng.uniform_int(6, 30), k = rng.uniform_int(2, 4), dim = rng.uniform_int(2, 8);
        std::vector<std::vector<float>> pts(n, std::vector<float>(dim));
        std::vector<int> lab(n);
        for (int i = 0; i < n; ++i) {
            lab[i] = i < 2 * k ? i % k : rng.uniform_int(0, k - 1);
            for (auto& x : pts[i]) x = static_cast<float>(rng.normal() + (lab[i] == 0 ? 1.0 : 0.0));
        }
        CHECK(cluster_separation(pts, lab) == doctest::Approx(oracle::silhouette(to_mat(pts), lab)).epsilon(1e-9));
    }
}

TEST_CASE("silhouette extremes") {
    SplitMix64 rng(2);
    std::vector<std::vector<float>> pts;
    std::vector<int> lab;
    for (int i = 0; i < 40; ++i) {
        const int c = i % 2;
        pts.push_back({c == 0 ? 1.f : static_cast<float>(0.01 * rng.normal()),
                       c == 1 ? 1.f : static_cast<float>(0.01 * rng.normal())});
        lab.push_back(c);
    }
    CHECK(cluster_separation(pts, lab) > 0.9);

    // Shuffled labels on structured data average out near zero.
    std::vector<std::vector<float>> cloud;
    std::vector<int> cl;
    for (int i = 0; i < 120; ++i) {
        cloud.push_back({static_cast<float>(rng.normal() + 3 * (i % 3)), static_cast<float>(rng.normal() + 2),
                         static_cast<float>(rng.normal())});
        cl.push_back(i % 3);
    }
    double mean = 0.0;
    for (int s = 0; s < 10; ++s) {
        auto perm = cl;
        for (int i = static_cast<int>(perm.size()) - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
        mean += cluster_separation(cloud, perm) / 10.0;
    }
    CHECK(std::abs(mean) < 0.1);

    const std::vector<int> single(6, 0);
    CHECK_THROWS_AS(cluster_separation(fixture::six_points(), single), std::invalid_argument);
    const std::vector<int> lonely{0, 0, 0, 0, 0, 1};
    CHECK_THROWS_AS(cluster_separation(fixture::six_points(), lonely), std::invalid_argument);
}

TEST_CASE("mean cosine to the normal centroid") {
    MultiQueue mq(2, 4, 2);
    mq.push({{1.f, 0.f}, 0, 0});
    mq.push({{0.f, 1.f}, 1, 0});
    mq.push({{-1.f, 0.f}, 2, 1});
    const float r = 1.f / std::sqrt(2.f);
    const std::vector<ProjVector> v{{{r, r}, 5, 1}, {{1.f, 0.f}, 6, 1}};
    CHECK(mean_cosine_to_class_centroid(v, mq, 0) == doctest::Approx((1.0 + r) / 2.0).epsilon(1e-6));
    CHECK_THROWS(mean_cosine_to_class_centroid(v, MultiQueue(2, 4, 2), 0));
}

TEST_CASE("report outputs") {
    TempDir dir("report");
    const std::vector<CrowdSample> split{fixture::constant_sample(0.10f, 12, 0), fixture::constant_sample(0.25f, 20, 1)};
    const auto t = grouped_eval(fixture::constant_stub(), split, 4);
    const std::vector<LogRecord> log{{0, "wrl", 6.0, 1.0, 16.0, 1e-3}, {1, "wrl", 5.0, 0.8, 13.0, 5e-4}};

    const auto one = report({{"run", t, {}}}, dir / "one");
    CHECK(one.size() >= 2);
    CHECK(std::filesystem::exists(dir / "one/summary.csv"));
    CHECK(std::filesystem::exists(dir / "one/mae_by_weather.svg"));
    report({{"run", t, {}}}, dir / "again");
    CHECK(slurp(dir / "one/summary.csv") == slurp(dir / "again/summary.csv"));

    const auto two = report({{"a", t, log}, {"b", t, log}}, dir / "two");
    CHECK(std::filesystem::exists(dir / "two/loss_curves.svg"));
    const std::string svg = slurp(dir / "two/mae_by_weather.svg");
    CHECK(svg.find(">a<") != std::string::npos);
    CHECK(svg.find(">b<") != std::string::npos);
}
