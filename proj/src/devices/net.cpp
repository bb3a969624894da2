#include "kindling/devices/net.hpp"

#include <fcntl.h>
#include <linux/if.h>
#include <linux/if_tun.h>
#include <sys/epoll.h>
#include <sys/ioctl.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdio>
#include <cstring>

#include "kindling/error.hpp"

namespace kindling::devices {

MacAddress parse_mac(const std::string& text) {
    MacAddress mac{};
    unsigned b[6];
    char tail;
    if (std::sscanf(text.c_str(), "%2x:%2x:%2x:%2x:%2x:%2x%c", &b[0], &b[1], &b[2], &b[3], &b[4], &b[5],
                    &tail) != 6 ||
        text.size() != 17)
        throw Error(ErrorCode::SchemaViolation, "bad MAC address: " + text);
    for (int i = 0; i < 6; ++i)
        mac[i] = static_cast<uint8_t>(b[i]);
    return mac;
}

std::string format_mac(const MacAddress& mac) {
    char buf[18];
    std::snprintf(buf, sizeof(buf), "%02x:%02x:%02x:%02x:%02x:%02x", mac[0], mac[1], mac[2], mac[3], mac[4],
                  mac[5]);
    return buf;
}

TapEndpoint::TapEndpoint(const std::string& name) {
    if (name.empty() || name.size() >= IFNAMSIZ)
        throw Error(ErrorCode::DeviceIo, "bad tap name: " + name);
    fd_ = ::open("/dev/net/tun", O_RDWR | O_NONBLOCK | O_CLOEXEC);
    if (fd_ < 0)
        throw_errno(ErrorCode::DeviceIo, "open /dev/net/tun");
    struct ifreq ifr{};
    ifr.ifr_flags = IFF_TAP | IFF_NO_PI;
    std::memcpy(ifr.ifr_name, name.data(), name.size());
    if (::ioctl(fd_, TUNSETIFF, &ifr) != 0) {
        const int err = errno;
        ::close(fd_);
        errno = err;
        throw_errno(ErrorCode::DeviceIo, "TUNSETIFF " + name);
    }
}

TapEndpoint::~TapEndpoint() {
    if (fd_ >= 0)
        ::close(fd_);
}

bool TapEndpoint::send(std::span<const uint8_t> frame) {
    for (;;) {
        const ssize_t n = ::write(fd_, frame.data(), frame.size());
        if (n >= 0)
            return true;
        if (errno == EINTR)
            continue;
        if (errno == EAGAIN)
            return false;
        return true; // the frame is lost, as on a real link
    }
}

std::optional<size_t> TapEndpoint::recv(std::span<uint8_t> buf) {
    for (;;) {
        const ssize_t n = ::read(fd_, buf.data(), buf.size());
        if (n >= 0)
            return static_cast<size_t>(n);
        if (errno == EINTR)
            continue;
        return std::nullopt;
    }
}

SocketEndpoint::~SocketEndpoint() {
    if (fd_ >= 0)
        ::close(fd_);
}

std::unique_ptr<SocketEndpoint> SocketEndpoint::pair(int* peer) {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_SEQPACKET | SOCK_NONBLOCK | SOCK_CLOEXEC, 0, fds) != 0)
        throw_errno(ErrorCode::DeviceIo, "socketpair");
    *peer = fds[1];
    return std::make_unique<SocketEndpoint>(fds[0]);
}

bool SocketEndpoint::send(std::span<const uint8_t> frame) {
    for (;;) {
        const ssize_t n = ::send(fd_, frame.data(), frame.size(), MSG_NOSIGNAL);
        if (n >= 0)
            return true;
        if (errno == EINTR)
            continue;
        if (errno == EAGAIN || errno == ENOBUFS)
            return false;
        return true;
    }
}

std::optional<size_t> SocketEndpoint::recv(std::span<uint8_t> buf) {
    for (;;) {
        const ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
        if (n > 0)
            return static_cast<size_t>(n);
        if (n < 0 && errno == EINTR)
            continue;
        return std::nullopt;
    }
}

NetDevice::NetDevice(std::unique_ptr<FrameEndpoint> endpoint, std::optional<MacAddress> mac)
    : endpoint_(std::move(endpoint)), mac_(mac), rx_buf_(net::kMaxFrame) {}

void NetDevice::read_config(uint64_t offset, std::span<uint8_t> out) const {
    for (size_t i = 0; i < out.size(); ++i) {
        const uint64_t at = offset + i;
        out[i] = (mac_ && at < 6) ? (*mac_)[at] : 0;
    }
}

void NetDevice::attach_host(virtio::HostFdRegistry& registry) {
    registry.add(endpoint_->fd(), EPOLLIN | EPOLLOUT);
}

void NetDevice::process_queue(size_t index) {
    if (index == net::kTxQueue)
        process_tx();
    // New rx buffers need no action: frames that found none were dropped.
}

void NetDevice::handle_host_event(int /*fd*/, uint32_t events) {
    if (events & EPOLLOUT)
        flush_deferred();
    if (events & (EPOLLIN | EPOLLERR | EPOLLHUP))
        process_rx();
}

void NetDevice::reset() {
    deferred_.clear();
    VirtioDevice::reset();
}

void NetDevice::flush_deferred() {
    while (!deferred_.empty()) {
        if (!endpoint_->send(deferred_.front()))
            return;
        deferred_.pop_front();
        ++counters_.tx_frames;
    }
}

void NetDevice::process_tx() {
    auto& q = ctx_.queues[net::kTxQueue];
    auto& mem = *ctx_.mem;
    flush_deferred();
    bool completed = false;
    while (auto chain = q.pop_chain(mem)) {
        ++counters_.tx_popped;
        const uint64_t total = chain->readable_bytes();
        if (total < net::kHeaderSize)
            throw Error(ErrorCode::MalformedChain, "tx chain shorter than the net header");
        std::vector<uint8_t> frame(total - net::kHeaderSize);
        chain->read(mem, net::kHeaderSize, frame);
        q.add_used(mem, chain->head_index, 0);
        completed = true;
        // Keep order: once anything is deferred, everything behind it waits.
        if (!deferred_.empty() || !endpoint_->send(frame)) {
            deferred_.push_back(std::move(frame));
            ++counters_.tx_deferred_total;
        } else {
            ++counters_.tx_frames;
        }
    }
    if (completed)
        signal_used(net::kTxQueue);
}

void NetDevice::process_rx() {
    bool completed = false;
    while (auto len = endpoint_->recv(rx_buf_)) {
        if (!active_) {
            ++counters_.rx_dropped;
            continue;
        }
        auto& q = ctx_.queues[net::kRxQueue];
        auto& mem = *ctx_.mem;
        auto chain = q.ready() ? q.pop_chain(mem) : std::nullopt;
        if (!chain) {
            ++counters_.rx_dropped;
            continue;
        }
        if (chain->writable_bytes() < net::kHeaderSize + *len) {
            ++counters_.rx_dropped;
            q.add_used(mem, chain->head_index, 0);
            completed = true;
            continue;
        }
        const uint8_t header[net::kHeaderSize] = {};
        chain->write(mem, 0, header);
        chain->write(mem, net::kHeaderSize, {rx_buf_.data(), *len});
        q.add_used(mem, chain->head_index, static_cast<uint32_t>(net::kHeaderSize + *len));
        ++counters_.rx_frames;
        completed = true;
    }
    if (completed)
        signal_used(net::kRxQueue);
}

} // namespace kindling::devices
