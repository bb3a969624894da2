#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kindling/virtio/device.hpp"

namespace kindling::devices {

namespace net {
inline constexpr uint64_t kFeatureMac = 1ull << 5;
inline constexpr size_t kHeaderSize = 12;
inline constexpr size_t kMaxFrame = 65562;
inline constexpr size_t kRxQueue = 0;
inline constexpr size_t kTxQueue = 1;
} // namespace net

using MacAddress = std::array<uint8_t, 6>;

/// Parses "aa:bb:cc:dd:ee:ff". Throws SchemaViolation.
MacAddress parse_mac(const std::string& text);
std::string format_mac(const MacAddress& mac);

/// A nonblocking, message-preserving host frame pipe.
class FrameEndpoint {
public:
    virtual ~FrameEndpoint() = default;
    virtual int fd() const = 0;
    /// False when the host side would block.
    virtual bool send(std::span<const uint8_t> frame) = 0;
    /// Frame length, or nullopt when nothing is queued.
    virtual std::optional<size_t> recv(std::span<uint8_t> buf) = 0;
};

/// A host tap interface opened through /dev/net/tun (no packet info).
class TapEndpoint : public FrameEndpoint {
public:
    /// Throws DeviceIo.
    explicit TapEndpoint(const std::string& name);
    ~TapEndpoint() override;
    int fd() const override { return fd_; }
    bool send(std::span<const uint8_t> frame) override;
    std::optional<size_t> recv(std::span<uint8_t> buf) override;

private:
    int fd_ = -1;
};

/// One end of a SOCK_SEQPACKET pair; the other end plays the host network.
class SocketEndpoint : public FrameEndpoint {
public:
    explicit SocketEndpoint(int fd) : fd_(fd) {}
    ~SocketEndpoint() override;
    /// Returns the device side; *peer receives the other (nonblocking) end.
    static std::unique_ptr<SocketEndpoint> pair(int* peer);
    int fd() const override { return fd_; }
    bool send(std::span<const uint8_t> frame) override;
    std::optional<size_t> recv(std::span<uint8_t> buf) override;

private:
    int fd_;
};

struct NetCounters {
    uint64_t tx_frames = 0; // written to the endpoint
    uint64_t tx_popped = 0; // chains taken from the tx queue
    uint64_t tx_deferred_total = 0;
    uint64_t rx_frames = 0;
    uint64_t rx_dropped = 0;
};

/// virtio-net with the 12-byte header and no offloads.
class NetDevice : public virtio::VirtioDevice {
public:
    NetDevice(std::unique_ptr<FrameEndpoint> endpoint, std::optional<MacAddress> mac);

    uint32_t device_type() const override { return virtio::kDeviceIdNet; }
    std::vector<uint16_t> queue_max_sizes() const override { return {256, 256}; }
    uint64_t features() const override { return mac_ ? net::kFeatureMac : 0; }
    void read_config(uint64_t offset, std::span<uint8_t> out) const override;
    void process_queue(size_t index) override;
    void attach_host(virtio::HostFdRegistry& registry) override;
    void handle_host_event(int fd, uint32_t events) override;
    void reset() override;

    const NetCounters& counters() const noexcept { return counters_; }
    size_t deferred() const noexcept { return deferred_.size(); }
    FrameEndpoint& endpoint() noexcept { return *endpoint_; }

private:
    void process_tx();
    void flush_deferred();
    void process_rx();

    std::unique_ptr<FrameEndpoint> endpoint_;
    std::optional<MacAddress> mac_;
    std::deque<std::vector<uint8_t>> deferred_;
    std::vector<uint8_t> rx_buf_;
    NetCounters counters_;
};

} // namespace kindling::devices
