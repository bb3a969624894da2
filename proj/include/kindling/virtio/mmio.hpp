#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kindling/guest_memory.hpp"
#include "kindling/virtio/device.hpp"
#include "kindling/virtio/queue.hpp"

namespace kindling::virtio {

inline constexpr uint64_t kMmioBase = 0xD0000000;
inline constexpr uint64_t kMmioWindow = 0x1000;
inline constexpr uint32_t kMmioMagic = 0x74726976; // "virt"
inline constexpr uint32_t kMmioVersion = 2;
inline constexpr uint32_t kVendorId = 0x4B444E4C; // "LNDK"

namespace reg {
inline constexpr uint64_t kMagic = 0x000;
inline constexpr uint64_t kVersion = 0x004;
inline constexpr uint64_t kDeviceId = 0x008;
inline constexpr uint64_t kVendorId = 0x00C;
inline constexpr uint64_t kDeviceFeatures = 0x010;
inline constexpr uint64_t kDeviceFeaturesSel = 0x014;
inline constexpr uint64_t kDriverFeatures = 0x020;
inline constexpr uint64_t kDriverFeaturesSel = 0x024;
inline constexpr uint64_t kQueueSel = 0x030;
inline constexpr uint64_t kQueueNumMax = 0x034;
inline constexpr uint64_t kQueueNum = 0x038;
inline constexpr uint64_t kQueueReady = 0x044;
inline constexpr uint64_t kQueueNotify = 0x050;
inline constexpr uint64_t kInterruptStatus = 0x060;
inline constexpr uint64_t kInterruptAck = 0x064;
inline constexpr uint64_t kStatus = 0x070;
inline constexpr uint64_t kQueueDescLow = 0x080;
inline constexpr uint64_t kQueueDescHigh = 0x084;
inline constexpr uint64_t kQueueDriverLow = 0x090;
inline constexpr uint64_t kQueueDriverHigh = 0x094;
inline constexpr uint64_t kQueueDeviceLow = 0x0A0;
inline constexpr uint64_t kQueueDeviceHigh = 0x0A4;
inline constexpr uint64_t kConfigGeneration = 0x0FC;
inline constexpr uint64_t kConfig = 0x100;
} // namespace reg

namespace status {
inline constexpr uint32_t kAcknowledge = 0x01;
inline constexpr uint32_t kDriver = 0x02;
inline constexpr uint32_t kDriverOk = 0x04;
inline constexpr uint32_t kFeaturesOk = 0x08;
inline constexpr uint32_t kFailed = 0x80;
} // namespace status

inline constexpr uint32_t kInterruptUsedBuffer = 0x1;

struct TransportCounters {
    uint64_t unknown_accesses = 0;
    uint64_t ignored_notifies = 0;
    uint64_t invalid_status_writes = 0;
    uint64_t rejected_queues = 0;
    uint64_t malformed_chains = 0;
    uint64_t notifies = 0;
    uint64_t interrupts = 0;
};

/// virtio-mmio version 2 register window for one device.
class MmioTransport {
public:
    MmioTransport(GuestAddress base, std::unique_ptr<VirtioDevice> device, GuestMemoryMap& mem,
                  std::function<void()> raise_irq);

    GuestAddress base() const noexcept { return base_; }
    VirtioDevice& device() noexcept { return *device_; }
    const VirtioDevice& device() const noexcept { return *device_; }

    uint64_t read(uint64_t offset, unsigned width);
    void write(uint64_t offset, unsigned width, uint64_t value);

    uint32_t device_status() const noexcept { return status_; }
    uint32_t interrupt_status() const noexcept { return interrupt_status_; }
    std::span<const Virtqueue> queues() const noexcept { return queues_; }
    const TransportCounters& counters() const noexcept { return counters_; }

    /// Sets the used-buffer interrupt bit and raises the device line.
    void signal_used();

    /// Runs fn as device work; a MalformedChain moves the device to FAILED.
    void guarded(const std::function<void()>& fn);

    /// Forwards a host readiness event to the device under guarded().
    void handle_host_event(int fd, uint32_t events);

    std::string discovery_arg(uint32_t irq) const;

private:
    void reset();
    void write_status(uint32_t value);
    Virtqueue* selected_queue();
    void set_queue_half(uint64_t offset, uint32_t value);

    GuestAddress base_;
    std::unique_ptr<VirtioDevice> device_;
    GuestMemoryMap& mem_;
    std::function<void()> raise_irq_;

    std::vector<Virtqueue> queues_;
    uint32_t status_ = 0;
    uint32_t interrupt_status_ = 0;
    uint32_t device_features_sel_ = 0;
    uint32_t driver_features_sel_ = 0;
    uint64_t driver_features_ = 0;
    uint32_t queue_sel_ = 0;
    bool broken_ = false;
    TransportCounters counters_;
};

/// Routes guest-physical MMIO accesses to the transport owning the window.
class MmioBus {
public:
    /// Throws DuplicateDevice if the window overlaps an existing one.
    void insert(std::shared_ptr<MmioTransport> transport);

    MmioTransport* find(GuestAddress addr) const;
    bool read(GuestAddress addr, std::span<uint8_t> data) const;
    bool write(GuestAddress addr, std::span<const uint8_t> data) const;

    const std::vector<std::shared_ptr<MmioTransport>>& transports() const noexcept { return transports_; }

private:
    std::vector<std::shared_ptr<MmioTransport>> transports_; // sorted by base
};

} // namespace kindling::virtio
