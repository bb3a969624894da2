#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "kindling/virtio/device.hpp"

namespace kindling::devices {

namespace vsock {
inline constexpr uint64_t kHostCid = 2;
inline constexpr size_t kHeaderSize = 44;
inline constexpr uint16_t kTypeStream = 1;

inline constexpr uint16_t kOpRequest = 1;
inline constexpr uint16_t kOpResponse = 2;
inline constexpr uint16_t kOpRst = 3;
inline constexpr uint16_t kOpShutdown = 4;
inline constexpr uint16_t kOpRw = 5;
inline constexpr uint16_t kOpCreditUpdate = 6;
inline constexpr uint16_t kOpCreditRequest = 7;

inline constexpr uint32_t kShutdownRecv = 1;
inline constexpr uint32_t kShutdownSend = 2;

inline constexpr uint32_t kBufAlloc = 256 * 1024;
inline constexpr size_t kRxQueue = 0;
inline constexpr size_t kTxQueue = 1;
inline constexpr size_t kEventQueue = 2;
} // namespace vsock

struct VsockHeader {
    uint64_t src_cid = 0;
    uint64_t dst_cid = 0;
    uint32_t src_port = 0;
    uint32_t dst_port = 0;
    uint32_t len = 0;
    uint16_t type = 0;
    uint16_t op = 0;
    uint32_t flags = 0;
    uint32_t buf_alloc = 0;
    uint32_t fwd_cnt = 0;

    void encode(uint8_t out[vsock::kHeaderSize]) const;
    static VsockHeader decode(const uint8_t in[vsock::kHeaderSize]);
    bool operator==(const VsockHeader&) const = default;
};

struct VsockCounters {
    uint64_t tx_packets = 0;
    uint64_t rx_packets = 0;
    uint64_t resets_sent = 0;
    uint64_t connections = 0;
};

/// virtio-vsock bridged to host Unix sockets.
///
/// Guest connects to host port P by dialing "<uds_path>_<P>". Host programs
/// reach the guest by connecting to uds_path and sending "CONNECT <port>\n";
/// once the guest accepts they read back "OK <host port>\n".
class VsockDevice : public virtio::VirtioDevice {
public:
    /// Binds the host listener. Throws DeviceIo.
    VsockDevice(uint64_t guest_cid, std::string uds_path);
    ~VsockDevice() override;
    VsockDevice(const VsockDevice&) = delete;
    VsockDevice& operator=(const VsockDevice&) = delete;

    uint32_t device_type() const override { return virtio::kDeviceIdVsock; }
    std::vector<uint16_t> queue_max_sizes() const override { return {256, 256, 256}; }
    uint64_t features() const override { return 0; }
    void read_config(uint64_t offset, std::span<uint8_t> out) const override;
    void process_queue(size_t index) override;
    void attach_host(virtio::HostFdRegistry& registry) override;
    void handle_host_event(int fd, uint32_t events) override;
    void reset() override;

    uint64_t guest_cid() const noexcept { return guest_cid_; }
    const std::string& uds_path() const noexcept { return uds_path_; }
    size_t connection_count() const noexcept { return conns_.size(); }
    const VsockCounters& counters() const noexcept { return counters_; }

private:
    struct Conn {
        int fd = -1;
        uint32_t local_port = 0; // host side
        uint32_t peer_port = 0;  // guest side
        bool established = false;
        bool host_eof = false;
        uint32_t peer_buf_alloc = 0;
        uint32_t peer_fwd_cnt = 0;
        uint32_t tx_cnt = 0;  // bytes sent to the guest
        uint32_t fwd_cnt = 0; // guest bytes delivered to the host socket
        uint32_t reported_fwd_cnt = 0;
        std::vector<uint8_t> to_host;
    };
    struct Packet {
        VsockHeader hdr;
        std::vector<uint8_t> payload;
    };
    using Key = std::pair<uint32_t, uint32_t>; // (local_port, peer_port)

    void process_tx();
    void handle_guest_packet(const VsockHeader& h, std::vector<uint8_t> payload);
    void accept_host();
    void read_handshake(int fd);
    void pump_host_to_guest(Conn& c);
    // False if the connection was torn down.
    bool flush_to_host(Conn& c);
    void send_to_guest(Conn* c, uint32_t local_port, uint32_t peer_port, uint16_t op, uint32_t flags = 0,
                       std::vector<uint8_t> payload = {});
    void send_rst(uint32_t local_port, uint32_t peer_port);
    void close_conn(const Key& key);
    void deliver_rx();
    void maybe_credit_update(Conn& c);

    uint64_t guest_cid_;
    std::string uds_path_;
    int listener_ = -1;
    virtio::HostFdRegistry* registry_ = nullptr;
    std::map<Key, Conn> conns_;
    std::unordered_map<int, Key> fd_to_conn_;
    std::unordered_map<int, std::string> handshakes_; // accepted, awaiting CONNECT line
    std::deque<Packet> rx_pending_;
    uint32_t next_local_port_ = 1024;
    VsockCounters counters_;
};

} // namespace kindling::devices
