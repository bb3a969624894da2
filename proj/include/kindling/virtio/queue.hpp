#pragma once

#include <bitset>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kindling/guest_memory.hpp"

namespace kindling::virtio {

inline constexpr uint16_t kDescFlagNext = 0x1;
inline constexpr uint16_t kDescFlagWrite = 0x2;
inline constexpr uint16_t kDescFlagIndirect = 0x4;
inline constexpr uint16_t kAvailFlagNoInterrupt = 0x1;
inline constexpr uint16_t kMaxQueueSize = 256;

inline constexpr uint64_t kDescSize = 16;
inline constexpr uint64_t kUsedElemSize = 8;

constexpr uint64_t desc_table_bytes(uint16_t size) { return kDescSize * size; }
constexpr uint64_t avail_ring_bytes(uint16_t size) { return 6 + 2ull * size; }
constexpr uint64_t used_ring_bytes(uint16_t size) { return 6 + kUsedElemSize * size; }

struct Descriptor {
    GuestAddress addr;
    uint32_t len = 0;
    uint16_t flags = 0;
    uint16_t next = 0;
};

struct Segment {
    GuestAddress addr;
    uint32_t len = 0;
    bool writable = false;
    bool operator==(const Segment&) const = default;
};

/// A popped chain with every descriptor resolved and bounds-checked.
struct DescriptorChain {
    uint16_t head_index = 0;
    std::vector<Segment> segments;

    uint64_t readable_bytes() const;
    uint64_t writable_bytes() const;

    /// Gathers device-readable bytes starting at offset within the readable
    /// part of the chain. Returns the number of bytes copied.
    size_t read(const GuestMemoryMap& mem, uint64_t offset, std::span<uint8_t> out) const;
    /// Scatters into device-writable segments starting at offset within the
    /// writable part. Returns the number of bytes copied.
    size_t write(GuestMemoryMap& mem, uint64_t offset, std::span<const uint8_t> in) const;
};

/// Device-side view of one split virtqueue living in guest memory.
///
/// Indices are free-running 16-bit counters; ring slots are index mod size.
/// Only the event-loop thread touches a queue.
class Virtqueue {
public:
    explicit Virtqueue(uint16_t max_size = kMaxQueueSize);

    uint16_t max_size() const noexcept { return max_size_; }
    uint16_t size() const noexcept { return size_; }
    GuestAddress desc_table() const noexcept { return desc_table_; }
    GuestAddress avail_ring() const noexcept { return avail_ring_; }
    GuestAddress used_ring() const noexcept { return used_ring_; }
    bool ready() const noexcept { return ready_; }
    uint16_t next_avail() const noexcept { return next_avail_; }
    uint16_t next_used() const noexcept { return next_used_; }
    size_t in_flight() const noexcept { return in_flight_.count(); }

    void set_size(uint16_t size) noexcept { size_ = size; }
    void set_desc_table(GuestAddress a) noexcept { desc_table_ = a; }
    void set_avail_ring(GuestAddress a) noexcept { avail_ring_ = a; }
    void set_used_ring(GuestAddress a) noexcept { used_ring_ = a; }

    /// Marks the queue ready after checking its size and ring placement.
    /// Returns false (and stays not ready) if the configuration is invalid.
    bool enable(const GuestMemoryMap& mem);
    bool is_valid(const GuestMemoryMap& mem) const;
    void reset() noexcept;

    /// Next published chain, or nullopt when the driver has published
    /// nothing new. Throws MalformedChain.
    std::optional<DescriptorChain> pop_chain(const GuestMemoryMap& mem);

    /// Returns a popped chain to the driver. Throws UnknownHead.
    void add_used(GuestMemoryMap& mem, uint16_t head_index, uint32_t written_len);

    /// Number of chains the driver has published that are not yet popped.
    uint16_t pending(const GuestMemoryMap& mem) const;

    /// False when the driver asked to suppress used-buffer interrupts.
    bool needs_notification(const GuestMemoryMap& mem) const;

private:
    Descriptor read_descriptor(const GuestMemoryMap& mem, uint16_t index) const;

    uint16_t max_size_;
    uint16_t size_;
    GuestAddress desc_table_;
    GuestAddress avail_ring_;
    GuestAddress used_ring_;
    bool ready_ = false;
    uint16_t next_avail_ = 0;
    uint16_t next_used_ = 0;
    std::bitset<kMaxQueueSize> in_flight_;
};

} // namespace kindling::virtio
