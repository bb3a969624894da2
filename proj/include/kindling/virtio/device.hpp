#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kindling/guest_memory.hpp"
#include "kindling/virtio/queue.hpp"

namespace kindling::virtio {

inline constexpr uint32_t kDeviceIdNet = 1;
inline constexpr uint32_t kDeviceIdBlock = 2;
inline constexpr uint32_t kDeviceIdVsock = 19;

inline constexpr uint64_t kFeatureVersion1 = 1ull << 32;

/// What a device sees once the driver has set DRIVER_OK.
struct DeviceContext {
    GuestMemoryMap* mem = nullptr;
    std::span<Virtqueue> queues;
    /// Marks used buffers in the interrupt status and raises the line,
    /// unless the driver suppressed interrupts on that queue.
    std::function<void(size_t queue)> signal_used;
};

/// Lets a device ask the event loop to watch host handles it owns. Events on
/// those handles come back through VirtioDevice::handle_host_event.
class HostFdRegistry {
public:
    virtual ~HostFdRegistry() = default;
    /// events is an epoll mask; registration is edge-triggered.
    virtual void add(int fd, uint32_t events) = 0;
    virtual void remove(int fd) = 0;
};

/// A virtio device model behind the MMIO transport. All calls happen on the
/// event-loop thread.
class VirtioDevice {
public:
    virtual ~VirtioDevice() = default;

    virtual uint32_t device_type() const = 0;
    virtual std::vector<uint16_t> queue_max_sizes() const = 0;
    /// Device-specific feature bits; the transport adds VERSION_1.
    virtual uint64_t features() const = 0;
    virtual void read_config(uint64_t offset, std::span<uint8_t> out) const = 0;
    virtual void write_config(uint64_t /*offset*/, std::span<const uint8_t> /*in*/) {}

    /// Driver reached DRIVER_OK.
    virtual void activate(DeviceContext ctx) {
        ctx_ = ctx;
        active_ = true;
    }
    /// Driver wrote the queue's index to QueueNotify.
    virtual void process_queue(size_t index) = 0;
    /// Called once before boot so the device can register its host handles.
    virtual void attach_host(HostFdRegistry& /*registry*/) {}
    /// A watched host handle became ready. Must drain it (edge-triggered).
    virtual void handle_host_event(int /*fd*/, uint32_t /*events*/) {}
    /// Makes written data durable; called on shutdown.
    virtual void flush() {}

    virtual void reset() {
        active_ = false;
        ctx_ = {};
    }

    bool active() const noexcept { return active_; }
    uint64_t acked_features() const noexcept { return acked_features_; }
    void set_acked_features(uint64_t f) noexcept { acked_features_ = f; }

protected:
    void signal_used(size_t queue) const {
        if (ctx_.signal_used)
            ctx_.signal_used(queue);
    }

    DeviceContext ctx_;
    bool active_ = false;
    uint64_t acked_features_ = 0;
};

} // namespace kindling::virtio
