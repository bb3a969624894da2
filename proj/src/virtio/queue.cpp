#include "kindling/virtio/queue.hpp"

#include <atomic>
#include <string>

#include "kindling/error.hpp"

namespace kindling::virtio {

namespace {

[[noreturn]] void malformed(const std::string& why) { throw Error(ErrorCode::MalformedChain, why); }

bool is_power_of_two(uint16_t v) { return v != 0 && (v & (v - 1)) == 0; }

} // namespace

uint64_t DescriptorChain::readable_bytes() const {
    uint64_t n = 0;
    for (const auto& s : segments)
        if (!s.writable)
            n += s.len;
    return n;
}

uint64_t DescriptorChain::writable_bytes() const {
    uint64_t n = 0;
    for (const auto& s : segments)
        if (s.writable)
            n += s.len;
    return n;
}

size_t DescriptorChain::read(const GuestMemoryMap& mem, uint64_t offset, std::span<uint8_t> out) const {
    size_t copied = 0;
    for (const auto& s : segments) {
        if (s.writable)
            continue;
        if (offset >= s.len) {
            offset -= s.len;
            continue;
        }
        const uint64_t n = std::min<uint64_t>(s.len - offset, out.size() - copied);
        mem.read_bytes(GuestAddress{s.addr.value + offset}, out.subspan(copied, n));
        copied += n;
        offset = 0;
        if (copied == out.size())
            break;
    }
    return copied;
}

size_t DescriptorChain::write(GuestMemoryMap& mem, uint64_t offset, std::span<const uint8_t> in) const {
    size_t copied = 0;
    for (const auto& s : segments) {
        if (!s.writable)
            continue;
        if (offset >= s.len) {
            offset -= s.len;
            continue;
        }
        const uint64_t n = std::min<uint64_t>(s.len - offset, in.size() - copied);
        mem.write_bytes(GuestAddress{s.addr.value + offset}, in.subspan(copied, n));
        copied += n;
        offset = 0;
        if (copied == in.size())
            break;
    }
    return copied;
}

Virtqueue::Virtqueue(uint16_t max_size) : max_size_(max_size), size_(max_size) {}

bool Virtqueue::is_valid(const GuestMemoryMap& mem) const {
    if (!is_power_of_two(size_) || size_ > max_size_)
        return false;
    if (desc_table_.value % 16 != 0 || avail_ring_.value % 2 != 0 || used_ring_.value % 4 != 0)
        return false;
    return mem.contains(desc_table_, desc_table_bytes(size_)) &&
           mem.contains(avail_ring_, avail_ring_bytes(size_)) &&
           mem.contains(used_ring_, used_ring_bytes(size_));
}

bool Virtqueue::enable(const GuestMemoryMap& mem) {
    ready_ = is_valid(mem);
    if (ready_) {
        // Resume from whatever the driver already published in the used ring.
        next_used_ = mem.read<uint16_t>(GuestAddress{used_ring_.value + 2});
        next_avail_ = next_used_;
        in_flight_.reset();
    }
    return ready_;
}

void Virtqueue::reset() noexcept {
    size_ = max_size_;
    desc_table_ = {};
    avail_ring_ = {};
    used_ring_ = {};
    ready_ = false;
    next_avail_ = 0;
    next_used_ = 0;
    in_flight_.reset();
}

Descriptor Virtqueue::read_descriptor(const GuestMemoryMap& mem, uint16_t index) const {
    const GuestAddress base{desc_table_.value + kDescSize * index};
    Descriptor d;
    d.addr = GuestAddress{mem.read<uint64_t>(base)};
    d.len = mem.read<uint32_t>(GuestAddress{base.value + 8});
    d.flags = mem.read<uint16_t>(GuestAddress{base.value + 12});
    d.next = mem.read<uint16_t>(GuestAddress{base.value + 14});
    return d;
}

uint16_t Virtqueue::pending(const GuestMemoryMap& mem) const {
    const uint16_t avail_idx = mem.read<uint16_t>(GuestAddress{avail_ring_.value + 2});
    return static_cast<uint16_t>(avail_idx - next_avail_);
}

std::optional<DescriptorChain> Virtqueue::pop_chain(const GuestMemoryMap& mem) {
    if (!ready_)
        throw Error(ErrorCode::InvalidQueue, "pop from a queue that is not ready");
    const uint16_t published = pending(mem);
    if (published == 0)
        return std::nullopt;
    if (published > size_)
        malformed("driver published " + std::to_string(published) + " chains on a queue of " +
                  std::to_string(size_));
    // Ring contents must not be read before the index that published them.
    std::atomic_thread_fence(std::memory_order_acquire);

    const uint16_t head =
        mem.read<uint16_t>(GuestAddress{avail_ring_.value + 4 + 2ull * (next_avail_ % size_)});
    if (head >= size_)
        malformed("head index " + std::to_string(head) + " out of range");
    if (in_flight_.test(head))
        malformed("head " + std::to_string(head) + " published while still in flight");

    DescriptorChain chain;
    chain.head_index = head;
    uint16_t index = head;
    for (;;) {
        if (chain.segments.size() >= size_)
            malformed("descriptor chain from head " + std::to_string(head) + " loops or exceeds queue size");
        const Descriptor d = read_descriptor(mem, index);
        if (d.flags & kDescFlagIndirect)
            malformed("indirect descriptors are not supported");
        const bool writable = (d.flags & kDescFlagWrite) != 0;
        if (writable && d.len == 0)
            malformed("zero-length device-writable descriptor");
        if (d.len > 0 && !mem.contains(d.addr, d.len))
            malformed("descriptor buffer outside guest memory");
        chain.segments.push_back({d.addr, d.len, writable});
        if (!(d.flags & kDescFlagNext))
            break;
        if (d.next >= size_)
            malformed("next index " + std::to_string(d.next) + " out of range");
        index = d.next;
    }
    in_flight_.set(head);
    ++next_avail_;
    return chain;
}

void Virtqueue::add_used(GuestMemoryMap& mem, uint16_t head_index, uint32_t written_len) {
    if (head_index >= size_ || !in_flight_.test(head_index))
        throw Error(ErrorCode::UnknownHead, "head " + std::to_string(head_index) + " is not in flight");
    const GuestAddress slot{used_ring_.value + 4 + kUsedElemSize * (next_used_ % size_)};
    mem.write<uint32_t>(slot, head_index);
    mem.write<uint32_t>(GuestAddress{slot.value + 4}, written_len);
    // The element must be visible before the index that publishes it.
    std::atomic_thread_fence(std::memory_order_release);
    ++next_used_;
    mem.write<uint16_t>(GuestAddress{used_ring_.value + 2}, next_used_);
    in_flight_.reset(head_index);
}

bool Virtqueue::needs_notification(const GuestMemoryMap& mem) const {
    const uint16_t flags = mem.read<uint16_t>(avail_ring_);
    return (flags & kAvailFlagNoInterrupt) == 0;
}

} // namespace kindling::virtio
