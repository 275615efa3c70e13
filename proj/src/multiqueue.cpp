#include "mqcl/multiqueue.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mqcl {

const char* layout_name(MemoryLayout layout) {
    switch (layout) {
        case MemoryLayout::kMultiQueue: return "multi-queue";
        case MemoryLayout::kSingleQueue: return "single-queue";
        case MemoryLayout::kMemoryBank: return "memory-bank";
    }
    return "unknown";
}

MemoryLayout parse_layout(const std::string& name) {
    if (name == "multi-queue") return MemoryLayout::kMultiQueue;
    if (name == "single-queue") return MemoryLayout::kSingleQueue;
    if (name == "memory-bank") return MemoryLayout::kMemoryBank;
    throw std::invalid_argument("unknown memory layout '" + name + "'");
}

MultiQueue::MultiQueue(int num_classes, int capacity, int dim)
    : MultiQueue(MemoryLayout::kMultiQueue, num_classes, num_classes, capacity, dim) {
    if (num_classes < 2)
        throw std::invalid_argument("MultiQueue: need at least two classes (B >= 2)");
}

MultiQueue::MultiQueue(MemoryLayout layout, int num_classes, int num_slots, int capacity, int dim)
    : layout_(layout), num_classes_(num_classes), capacity_(capacity), dim_(dim) {
    if (num_classes < 1 || num_slots < 1 || capacity < 1 || dim < 1)
        throw std::invalid_argument("MultiQueue: dimensions must be positive");
    slots_.resize(num_slots);
    for (auto& s : slots_) {
        s.data.assign(static_cast<size_t>(capacity) * dim, 0.f);
        s.image_index.assign(capacity, -1);
        s.weather.assign(capacity, -1);
    }
}

MultiQueue MultiQueue::single_queue(int num_classes, int capacity, int dim) {
    if (num_classes < 1 || capacity < 1) throw std::invalid_argument("MultiQueue: dimensions must be positive");
    return MultiQueue(MemoryLayout::kSingleQueue, num_classes, 1, num_classes * capacity, dim);
}

MultiQueue MultiQueue::memory_bank(int num_classes, int num_images, int dim) {
    return MultiQueue(MemoryLayout::kMemoryBank, num_classes, num_images, 1, dim);
}

int MultiQueue::route(const ProjVector& key) const {
    switch (layout_) {
        case MemoryLayout::kMultiQueue: return key.weather;
        case MemoryLayout::kSingleQueue: return 0;
        case MemoryLayout::kMemoryBank:
            if (key.image_index < 0 || key.image_index >= num_slots())
                throw std::out_of_range("MultiQueue: image index outside the memory bank");
            return static_cast<int>(key.image_index);
    }
    return 0;
}

void MultiQueue::push(const ProjVector& key) {
    if (frozen_) throw std::logic_error("MultiQueue: push into a frozen memory");
    if (key.weather < 0 || key.weather >= num_classes_)
        throw std::out_of_range("MultiQueue: weather tag " + std::to_string(key.weather) + " out of range");
    if (static_cast<int>(key.values.size()) != dim_)
        throw std::invalid_argument("MultiQueue: key dimension mismatch");
    double norm2 = 0.0;
    for (float v : key.values) norm2 += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-4)
        throw std::invalid_argument("MultiQueue: keys must be unit-norm");

    Slot& slot = slots_[route(key)];
    int pos;
    if (slot.fill < capacity_) {
        pos = (slot.head + slot.fill) % capacity_;
        ++slot.fill;
    } else {
        pos = slot.head;
        slot.head = (slot.head + 1) % capacity_;
    }
    std::copy(key.values.begin(), key.values.end(), slot.data.begin() + static_cast<ptrdiff_t>(pos) * dim_);
    slot.image_index[pos] = key.image_index;
    slot.weather[pos] = key.weather;
    ++pushes_;
}

ProjVector MultiQueue::entry(const Slot& slot, int k) const {
    const int pos = (slot.head + k) % capacity_;
    const auto begin = slot.data.begin() + static_cast<ptrdiff_t>(pos) * dim_;
    return {std::vector<float>(begin, begin + dim_), slot.image_index[pos], slot.weather[pos]};
}

template <typename Pred>
std::vector<ProjVector> MultiQueue::collect(Pred&& keep) const {
    std::vector<ProjVector> out;
    for (const auto& slot : slots_)
        for (int k = 0; k < slot.fill; ++k) {
            const int pos = (slot.head + k) % capacity_;
            if (keep(slot.image_index[pos], slot.weather[pos])) out.push_back(entry(slot, k));
        }
    return out;
}

std::vector<ProjVector> MultiQueue::all() const {
    return collect([](int64_t, int) { return true; });
}

std::vector<ProjVector> MultiQueue::positives(int64_t image_index) const {
    return collect([image_index](int64_t idx, int) { return idx == image_index; });
}

std::vector<ProjVector> MultiQueue::of_class(int weather) const {
    if (weather < 0 || weather >= num_classes_)
        throw std::out_of_range("MultiQueue: class id " + std::to_string(weather) + " out of range");
    return collect([weather](int64_t, int w) { return w == weather; });
}

size_t MultiQueue::size() const {
    size_t n = 0;
    for (const auto& s : slots_) n += static_cast<size_t>(s.fill);
    return n;
}

KeySnapshot MultiQueue::snapshot() const {
    KeySnapshot snap;
    snap.dim = dim_;
    const size_t n = size();
    snap.keys.reserve(n * dim_);
    snap.image_index.reserve(n);
    snap.weather.reserve(n);
    for (const auto& slot : slots_)
        for (int k = 0; k < slot.fill; ++k) {
            const int pos = (slot.head + k) % capacity_;
            const auto begin = slot.data.begin() + static_cast<ptrdiff_t>(pos) * dim_;
            snap.keys.insert(snap.keys.end(), begin, begin + dim_);
            snap.image_index.push_back(slot.image_index[pos]);
            snap.weather.push_back(slot.weather[pos]);
        }
    return snap;
}

QueueState MultiQueue::state() const {
    QueueState st{layout_, num_classes_, num_slots(), capacity_, dim_, {}};
    st.entries.resize(slots_.size());
    for (size_t s = 0; s < slots_.size(); ++s)
        for (int k = 0; k < slots_[s].fill; ++k) st.entries[s].push_back(entry(slots_[s], k));
    return st;
}

MultiQueue MultiQueue::from_state(const QueueState& st) {
    MultiQueue q = [&] {
        switch (st.layout) {
            case MemoryLayout::kMultiQueue: return MultiQueue(st.num_classes, st.capacity, st.dim);
            case MemoryLayout::kSingleQueue:
                return MultiQueue(MemoryLayout::kSingleQueue, st.num_classes, 1, st.capacity, st.dim);
            case MemoryLayout::kMemoryBank: return memory_bank(st.num_classes, st.num_slots, st.dim);
        }
        throw std::invalid_argument("MultiQueue: bad layout");
    }();
    if (q.num_slots() != st.num_slots || static_cast<int>(st.entries.size()) != st.num_slots)
        throw std::invalid_argument("MultiQueue: state slot count mismatch");
    for (int s = 0; s < st.num_slots; ++s) {
        if (static_cast<int>(st.entries[s].size()) > st.capacity)
            throw std::invalid_argument("MultiQueue: state sub-queue exceeds capacity");
        for (const auto& e : st.entries[s]) {
            if (q.route(e) != s) throw std::invalid_argument("MultiQueue: state entry in the wrong sub-queue");
            q.push(e);
        }
    }
    q.pushes_ = 0;
    return q;
}

}  // namespace mqcl
