#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "kindling/guest_memory.hpp"
#include "kindling/virtio/mmio.hpp"
#include "kindling/virtio/queue.hpp"

namespace kindling::test {

struct BufferSpec {
    GuestAddress addr;
    uint32_t len = 0;
    bool writable = false;
};

struct UsedElem {
    uint32_t id = 0;
    uint32_t len = 0;
    bool operator==(const UsedElem&) const = default;
};

/// Plays the guest driver's side of a split ring: owns the descriptor free
/// list, publishes chains and reaps used entries.
class RingDriver {
public:
    RingDriver(GuestMemoryMap& mem, uint16_t size, GuestAddress desc, GuestAddress avail, GuestAddress used,
               uint16_t start_index = 0);

    uint16_t size() const { return size_; }
    GuestAddress desc() const { return desc_; }
    GuestAddress avail() const { return avail_; }
    GuestAddress used() const { return used_; }
    size_t free_descriptors() const { return free_.size(); }
    uint16_t avail_idx() const { return avail_idx_; }

    /// Points a queue at this ring and enables it.
    void attach(virtio::Virtqueue& q) const;
    /// Same through the MMIO registers of a transport in FEATURES_OK state.
    void attach(virtio::MmioTransport& t, uint32_t queue_index) const;

    /// Writes descriptors for the buffers and publishes the head. Returns the
    /// head index. Descriptors are taken from the free list in a scrambled
    /// order so chains are not contiguous.
    uint16_t publish(const std::vector<BufferSpec>& buffers);
    /// Writes a raw descriptor without touching the free list.
    void write_descriptor(uint16_t index, GuestAddress addr, uint32_t len, uint16_t flags, uint16_t next);
    /// Publishes a head index without building a chain.
    void publish_head(uint16_t head);

    /// Used entries since the last reap; their descriptors go back to the free list.
    std::vector<UsedElem> reap();

    void set_no_interrupt(bool suppress);

private:
    GuestMemoryMap& mem_;
    uint16_t size_;
    GuestAddress desc_, avail_, used_;
    uint16_t avail_idx_;
    uint16_t last_used_;
    std::deque<uint16_t> free_;
    std::vector<std::vector<uint16_t>> chains_; // by head
};

/// Drives the MMIO status handshake up to FEATURES_OK, accepting the
/// offered features masked by `accept`.
void negotiate(virtio::MmioTransport& t, uint64_t accept = ~0ull);
/// Sets DRIVER_OK.
void driver_ok(virtio::MmioTransport& t);

} // namespace kindling::test
