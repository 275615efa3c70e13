#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mqcl {

// Unit-norm embedding tagged with the image it came from and its weather class.
struct ProjVector {
    std::vector<float> values;
    int64_t image_index = -1;
    int weather = -1;

    bool operator==(const ProjVector&) const = default;
};

// How keys are routed into storage slots.
//   kMultiQueue  - one FIFO per weather class, equal capacity (class-balanced).
//   kSingleQueue - one FIFO shared by all classes, capacity B*L.
//   kMemoryBank  - one slot per image index, overwritten in place.
enum class MemoryLayout { kMultiQueue, kSingleQueue, kMemoryBank };

const char* layout_name(MemoryLayout layout);
MemoryLayout parse_layout(const std::string& name);

// Flat view of every filled entry, in deterministic order: sub-queue 0 oldest
// to newest, then sub-queue 1, and so on.
struct KeySnapshot {
    int dim = 0;
    std::vector<float> keys;  // size() == count * dim, row-major
    std::vector<int64_t> image_index;
    std::vector<int> weather;

    size_t size() const { return image_index.size(); }
    std::span<const float> row(size_t i) const { return {keys.data() + i * dim, static_cast<size_t>(dim)}; }
};

// Serializable contents. `entries[s]` lists sub-queue s oldest first.
struct QueueState {
    MemoryLayout layout = MemoryLayout::kMultiQueue;
    int num_classes = 0;
    int num_slots = 0;
    int capacity = 0;
    int dim = 0;
    std::vector<std::vector<ProjVector>> entries;
};

// Class-balanced contrastive key memory: B sub-queues of capacity L holding
// C2-dimensional key vectors. Pushing into a full sub-queue evicts its oldest
// entry; other sub-queues are untouched. Stored vectors are plain constants.
//
// Not internally synchronized: callers must not push while another thread reads.
class MultiQueue {
public:
    // Multi-queue layout. Requires num_classes >= 2, capacity >= 1, dim >= 1.
    MultiQueue(int num_classes, int capacity, int dim);

    // Single FIFO of capacity num_classes * capacity accepting every class.
    static MultiQueue single_queue(int num_classes, int capacity, int dim);
    // One slot per image index in [0, num_images).
    static MultiQueue memory_bank(int num_classes, int num_images, int dim);

    void push(const ProjVector& key);

    std::vector<ProjVector> all() const;
    std::vector<ProjVector> positives(int64_t image_index) const;
    // Entries whose weather tag is `weather`. For the multi-queue layout this is
    // exactly sub-queue `weather`.
    std::vector<ProjVector> of_class(int weather) const;

    KeySnapshot snapshot() const;

    MemoryLayout layout() const { return layout_; }
    int num_classes() const { return num_classes_; }
    int num_slots() const { return static_cast<int>(slots_.size()); }
    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int total_capacity() const { return num_slots() * capacity_; }
    int fill(int slot) const { return slots_.at(slot).fill; }
    size_t size() const;
    bool empty() const { return size() == 0; }
    int64_t pushes() const { return pushes_; }

    // A frozen memory rejects pushes.
    void set_frozen(bool frozen) { frozen_ = frozen; }
    bool frozen() const { return frozen_; }

    QueueState state() const;
    static MultiQueue from_state(const QueueState& state);

private:
    struct Slot {
        std::vector<float> data;  // capacity * dim ring buffer
        std::vector<int64_t> image_index;
        std::vector<int> weather;
        int head = 0;  // index of the oldest entry
        int fill = 0;
    };

    MultiQueue(MemoryLayout layout, int num_classes, int num_slots, int capacity, int dim);

    int route(const ProjVector& key) const;
    ProjVector entry(const Slot& slot, int k) const;  // k-th oldest
    template <typename Pred>
    std::vector<ProjVector> collect(Pred&& keep) const;

    MemoryLayout layout_;
    int num_classes_;
    int capacity_;
    int dim_;
    std::vector<Slot> slots_;
    int64_t pushes_ = 0;
    bool frozen_ = false;
};

}  // namespace mqcl
