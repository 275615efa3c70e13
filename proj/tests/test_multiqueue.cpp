#include "doctest_torch.hpp"

#include <cmath>

#include "mqcl/multiqueue.hpp"
#include "oracles.hpp"

using mqcl::MemoryLayout;
using mqcl::MultiQueue;
using mqcl::ProjVector;

namespace {

ProjVector unit(int dim, int hot, int64_t idx, int weather) {
    ProjVector v;
    v.values.assign(dim, 0.f);
    v.values[hot % dim] = 1.f;
    v.image_index = idx;
    v.weather = weather;
    return v;
}

ProjVector random_unit(mqcl::SplitMix64& rng, int dim, int64_t idx, int weather) {
    ProjVector v;
    double norm = 0.0;
    for (int i = 0; i < dim; ++i) {
        v.values.push_back(static_cast<float>(rng.normal()));
        norm += double(v.values.back()) * v.values.back();
    }
    for (auto& x : v.values) x = static_cast<float>(x / std::sqrt(norm));
    v.image_index = idx;
    v.weather = weather;
    return v;
}

}  // namespace

TEST_CASE("construction") {
    MultiQueue big(4, 1024, 128);
    CHECK(big.empty());
    CHECK(big.total_capacity() == 4096);
    MultiQueue tiny(2, 1, 8);
    CHECK(tiny.total_capacity() == 2);
    CHECK_THROWS_AS(MultiQueue(1, 8, 8), std::invalid_argument);
    CHECK_THROWS_AS(MultiQueue(4, 0, 8), std::invalid_argument);
    CHECK_THROWS_AS(MultiQueue(4, 8, 0), std::invalid_argument);
    CHECK(MultiQueue::single_queue(4, 16, 8).total_capacity() == 64);
    CHECK(MultiQueue::memory_bank(4, 10, 8).num_slots() == 10);
}

TEST_CASE("fifo eviction within one sub-queue") {
    MultiQueue q(2, 2, 4);
    for (int i = 0; i < 3; ++i) q.push(unit(4, i, i, 0));
    const auto c0 = q.of_class(0);
    REQUIRE(c0.size() == 2);
    CHECK(c0[0].image_index == 1);
    CHECK(c0[1].image_index == 2);
    CHECK(q.all().size() == 2);

    q.push(unit(4, 0, 7, 1));
    CHECK(q.fill(0) == 2);
    CHECK(q.fill(1) == 1);
}

TEST_CASE("capacity clamp") {
    MultiQueue q(4, 1024, 8);
    for (int i = 0; i < 5000; ++i) q.push(unit(8, i, i, 0));
    CHECK(q.fill(0) == 1024);
    CHECK(q.pushes() == 5000);
}

TEST_CASE("lookups") {
    MultiQueue q(3, 8, 4);
    CHECK(q.all().empty());
    q.push(unit(4, 0, 5, 0));
    q.push(unit(4, 1, 5, 1));
    q.push(unit(4, 2, 9, 0));
    CHECK(q.all().size() == 3);
    CHECK(q.positives(5).size() == 2);
    CHECK(q.positives(42).empty());
    CHECK(q.of_class(0).size() == 2);
    CHECK(q.of_class(2).empty());
    for (const auto& e : q.of_class(1)) CHECK(e.weather == 1);
    CHECK_THROWS_AS(q.of_class(3), std::out_of_range);

    MultiQueue small(2, 1, 4);
    small.push(unit(4, 0, 5, 0));
    small.push(unit(4, 0, 6, 0));
    CHECK(small.positives(5).empty());
}

TEST_CASE("push validation") {
    MultiQueue q(2, 4, 4);
    CHECK_THROWS_AS(q.push(unit(4, 0, 0, 2)), std::out_of_range);
    CHECK_THROWS_AS(q.push(unit(4, 0, 0, -1)), std::out_of_range);
    CHECK_THROWS_AS(q.push(unit(3, 0, 0, 0)), std::invalid_argument);
    ProjVector not_unit = unit(4, 0, 0, 0);
    not_unit.values[0] = 2.f;
    CHECK_THROWS_AS(q.push(not_unit), std::invalid_argument);
    q.set_frozen(true);
    CHECK_THROWS_AS(q.push(unit(4, 0, 0, 0)), std::logic_error);
}

TEST_CASE("snapshot layout matches all()") {
    mqcl::SplitMix64 rng(3);
    MultiQueue q(3, 5, 6);
    for (int i = 0; i < 20; ++i) q.push(random_unit(rng, 6, i, i % 3));
    const auto snap = q.snapshot();
    const auto all = q.all();
    REQUIRE(snap.size() == all.size());
    for (size_t i = 0; i < all.size(); ++i) {
        CHECK(snap.image_index[i] == all[i].image_index);
        CHECK(snap.weather[i] == all[i].weather);
        for (int d = 0; d < 6; ++d) CHECK(snap.row(i)[d] == all[i].values[d]);
    }
}

TEST_CASE("state round trip") {
    mqcl::SplitMix64 rng(4);
    for (auto layout : {MemoryLayout::kMultiQueue, MemoryLayout::kSingleQueue, MemoryLayout::kMemoryBank}) {
        MultiQueue q = layout == MemoryLayout::kMultiQueue    ? MultiQueue(3, 4, 5)
                       : layout == MemoryLayout::kSingleQueue ? MultiQueue::single_queue(3, 4, 5)
                                                              : MultiQueue::memory_bank(3, 9, 5);
        for (int i = 0; i < 30; ++i) q.push(random_unit(rng, 5, i % 9, i % 3));
        const auto back = MultiQueue::from_state(q.state());
        CHECK(back.all() == q.all());
        CHECK(back.layout() == layout);
    }
}

// Random operation sequences against the deque-based reference model.
TEST_CASE("property: matches reference model on 1000 random sequences") {
    mqcl::SplitMix64 rng(20240601);
    for (int trial = 0; trial < 1000; ++trial) {
        const int classes = rng.uniform_int(2, 5);
        const int cap = rng.uniform_int(1, 6);
        const int dim = rng.uniform_int(1, 6);
        const int images = rng.uniform_int(1, 12);
        const auto layout = static_cast<MemoryLayout>(trial % 3);
        MultiQueue q = layout == MemoryLayout::kMultiQueue    ? MultiQueue(classes, cap, dim)
                       : layout == MemoryLayout::kSingleQueue ? MultiQueue::single_queue(classes, cap, dim)
                                                              : MultiQueue::memory_bank(classes, images, dim);
        oracle::RefMemory ref(layout, classes, layout == MemoryLayout::kMemoryBank ? images : cap);
        const int ops = rng.uniform_int(1, 60);
        for (int op = 0; op < ops; ++op) {
            const int kind = rng.uniform_int(0, 9);
            if (kind < 7) {
                const auto k = random_unit(rng, dim, rng.uniform_int(0, images - 1), rng.uniform_int(0, classes - 1));
                q.push(k);
                ref.push(k);
            } else if (kind == 7) {
                const int64_t idx = rng.uniform_int(0, images - 1);
                REQUIRE(q.positives(idx) == ref.positives(idx));
            } else {
                const int c = rng.uniform_int(0, classes - 1);
                REQUIRE(q.of_class(c) == ref.of_class(c));
            }
        }
        REQUIRE(q.all() == ref.all());
        for (int s = 0; s < q.num_slots(); ++s) REQUIRE(q.fill(s) == ref.fill(static_cast<size_t>(s)));
    }
}

TEST_CASE("property: balanced fill after L pushes per class") {
    mqcl::SplitMix64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const int classes = rng.uniform_int(2, 6);
        const int cap = rng.uniform_int(1, 16);
        MultiQueue q(classes, cap, 3);
        std::vector<int> pushed(classes, 0);
        while (*std::min_element(pushed.begin(), pushed.end()) < cap) {
            const int c = rng.uniform_int(0, classes - 1);
            q.push(random_unit(rng, 3, 0, c));
            ++pushed[c];
        }
        for (int c = 0; c < classes; ++c) CHECK(q.fill(c) == cap);
    }
}
