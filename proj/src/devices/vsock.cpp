#include "kindling/devices/vsock.hpp"

#include <sys/epoll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstring>

#include "kindling/error.hpp"

namespace kindling::devices {

namespace {

template <typename T>
void put(uint8_t* p, T v) {
    std::memcpy(p, &v, sizeof(v));
}
template <typename T>
T get(const uint8_t* p) {
    T v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

sockaddr_un unix_addr(const std::string& path) {
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path.size() >= sizeof(addr.sun_path))
        throw Error(ErrorCode::DeviceIo, "socket path too long: " + path);
    std::memcpy(addr.sun_path, path.data(), path.size());
    return addr;
}

// Connects a nonblocking stream socket to path; -1 on failure.
int dial(const std::string& path) {
    sockaddr_un addr;
    try {
        addr = unix_addr(path);
    } catch (const Error&) {
        return -1;
    }
    const int fd = ::socket(AF_UNIX, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    if (fd < 0)
        return -1;
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 && errno != EINPROGRESS) {
        ::close(fd);
        return -1;
    }
    return fd;
}

} // namespace

void VsockHeader::encode(uint8_t out[vsock::kHeaderSize]) const {
    put(out + 0, src_cid);
    put(out + 8, dst_cid);
    put(out + 16, src_port);
    put(out + 20, dst_port);
    put(out + 24, len);
    put(out + 28, type);
    put(out + 30, op);
    put(out + 32, flags);
    put(out + 36, buf_alloc);
    put(out + 40, fwd_cnt);
}

VsockHeader VsockHeader::decode(const uint8_t in[vsock::kHeaderSize]) {
    VsockHeader h;
    h.src_cid = get<uint64_t>(in + 0);
    h.dst_cid = get<uint64_t>(in + 8);
    h.src_port = get<uint32_t>(in + 16);
    h.dst_port = get<uint32_t>(in + 20);
    h.len = get<uint32_t>(in + 24);
    h.type = get<uint16_t>(in + 28);
    h.op = get<uint16_t>(in + 30);
    h.flags = get<uint32_t>(in + 32);
    h.buf_alloc = get<uint32_t>(in + 36);
    h.fwd_cnt = get<uint32_t>(in + 40);
    return h;
}

VsockDevice::VsockDevice(uint64_t guest_cid, std::string uds_path)
    : guest_cid_(guest_cid), uds_path_(std::move(uds_path)) {
    if (guest_cid_ < 3 || guest_cid_ > 0xFFFFFFFFull)
        throw Error(ErrorCode::DeviceIo, "guest cid must be in [3, 2^32)");
    const sockaddr_un addr = unix_addr(uds_path_);
    listener_ = ::socket(AF_UNIX, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    if (listener_ < 0)
        throw_errno(ErrorCode::DeviceIo, "vsock listener socket");
    ::unlink(uds_path_.c_str());
    if (::bind(listener_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listener_, 64) != 0) {
        const int err = errno;
        ::close(listener_);
        errno = err;
        throw_errno(ErrorCode::DeviceIo, "vsock listen on " + uds_path_);
    }
}

VsockDevice::~VsockDevice() {
    for (auto& [key, c] : conns_)
        ::close(c.fd);
    for (auto& [fd, line] : handshakes_)
        ::close(fd);
    if (listener_ >= 0) {
        ::close(listener_);
        ::unlink(uds_path_.c_str());
    }
}

void VsockDevice::read_config(uint64_t offset, std::span<uint8_t> out) const {
    for (size_t i = 0; i < out.size(); ++i) {
        const uint64_t at = offset + i;
        out[i] = at < 8 ? static_cast<uint8_t>(guest_cid_ >> (8 * at)) : 0;
    }
}

void VsockDevice::attach_host(virtio::HostFdRegistry& registry) {
    registry_ = &registry;
    registry.add(listener_, EPOLLIN);
}

void VsockDevice::reset() {
    std::vector<Key> keys;
    for (auto& [key, c] : conns_)
        keys.push_back(key);
    for (auto& k : keys)
        close_conn(k);
    rx_pending_.clear();
    VirtioDevice::reset();
}

void VsockDevice::process_queue(size_t index) {
    if (index == vsock::kTxQueue)
        process_tx();
    else if (index == vsock::kRxQueue)
        deliver_rx();
}

void VsockDevice::process_tx() {
    auto& q = ctx_.queues[vsock::kTxQueue];
    auto& mem = *ctx_.mem;
    bool completed = false;
    while (auto chain = q.pop_chain(mem)) {
        const uint64_t readable = chain->readable_bytes();
        if (readable < vsock::kHeaderSize)
            throw Error(ErrorCode::MalformedChain, "vsock packet shorter than its header");
        uint8_t raw[vsock::kHeaderSize];
        chain->read(mem, 0, raw);
        const VsockHeader h = VsockHeader::decode(raw);
        std::vector<uint8_t> payload(std::min<uint64_t>(h.len, readable - vsock::kHeaderSize));
        chain->read(mem, vsock::kHeaderSize, payload);
        q.add_used(mem, chain->head_index, 0);
        completed = true;
        ++counters_.tx_packets;
        handle_guest_packet(h, std::move(payload));
    }
    if (completed)
        signal_used(vsock::kTxQueue);
    deliver_rx();
}

void VsockDevice::handle_guest_packet(const VsockHeader& h, std::vector<uint8_t> payload) {
    if (h.src_cid != guest_cid_ || h.dst_cid != vsock::kHostCid)
        return;
    const Key key{h.dst_port, h.src_port};
    if (h.type != vsock::kTypeStream) {
        if (h.op != vsock::kOpRst)
            send_rst(h.dst_port, h.src_port);
        return;
    }
    auto it = conns_.find(key);
    if (it != conns_.end()) {
        it->second.peer_buf_alloc = h.buf_alloc;
        it->second.peer_fwd_cnt = h.fwd_cnt;
    }

    switch (h.op) {
    case vsock::kOpRequest: {
        if (it != conns_.end()) {
            send_rst(h.dst_port, h.src_port);
            close_conn(key);
            return;
        }
        const int fd = dial(uds_path_ + "_" + std::to_string(h.dst_port));
        if (fd < 0) {
            send_rst(h.dst_port, h.src_port);
            return;
        }
        Conn c;
        c.fd = fd;
        c.local_port = h.dst_port;
        c.peer_port = h.src_port;
        c.established = true;
        c.peer_buf_alloc = h.buf_alloc;
        c.peer_fwd_cnt = h.fwd_cnt;
        auto& stored = conns_.emplace(key, std::move(c)).first->second;
        fd_to_conn_[fd] = key;
        ++counters_.connections;
        if (registry_)
            registry_->add(fd, EPOLLIN | EPOLLOUT | EPOLLRDHUP);
        send_to_guest(&stored, key.first, key.second, vsock::kOpResponse);
        return;
    }
    case vsock::kOpResponse:
        if (it == conns_.end() || it->second.established) {
            send_rst(h.dst_port, h.src_port);
            return;
        }
        it->second.established = true;
        {
            const std::string ok = "OK " + std::to_string(it->second.local_port) + "\n";
            it->second.to_host.insert(it->second.to_host.end(), ok.begin(), ok.end());
            if (flush_to_host(it->second))
                pump_host_to_guest(it->second);
        }
        return;
    case vsock::kOpRw:
        if (it == conns_.end() || !it->second.established) {
            send_rst(h.dst_port, h.src_port);
            return;
        }
        it->second.to_host.insert(it->second.to_host.end(), payload.begin(), payload.end());
        flush_to_host(it->second);
        return;
    case vsock::kOpCreditUpdate:
        if (it != conns_.end())
            pump_host_to_guest(it->second);
        return;
    case vsock::kOpCreditRequest:
        if (it != conns_.end())
            send_to_guest(&it->second, key.first, key.second, vsock::kOpCreditUpdate);
        return;
    case vsock::kOpShutdown:
        if (it != conns_.end()) {
            send_rst(key.first, key.second);
            close_conn(key);
        }
        return;
    case vsock::kOpRst:
        if (it != conns_.end())
            close_conn(key);
        return;
    default:
        send_rst(h.dst_port, h.src_port);
    }
}

void VsockDevice::handle_host_event(int fd, uint32_t events) {
    if (fd == listener_) {
        accept_host();
    } else if (handshakes_.count(fd)) {
        read_handshake(fd);
    } else if (auto it = fd_to_conn_.find(fd); it != fd_to_conn_.end()) {
        const Key key = it->second;
        Conn& c = conns_.at(key);
        if ((events & EPOLLOUT) && !flush_to_host(c))
            return deliver_rx();
        if (events & (EPOLLIN | EPOLLHUP | EPOLLRDHUP | EPOLLERR))
            pump_host_to_guest(c);
    }
    deliver_rx();
}

void VsockDevice::accept_host() {
    for (;;) {
        const int fd = ::accept4(listener_, nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
        if (fd < 0)
            return;
        if (!active_) {
            ::close(fd);
            continue;
        }
        handshakes_[fd] = {};
        if (registry_)
            registry_->add(fd, EPOLLIN | EPOLLRDHUP);
        read_handshake(fd);
    }
}

void VsockDevice::read_handshake(int fd) {
    auto& line = handshakes_.at(fd);
    auto drop = [&] {
        if (registry_)
            registry_->remove(fd);
        ::close(fd);
        handshakes_.erase(fd);
    };
    // Byte at a time so nothing past the newline is consumed here.
    for (;;) {
        char ch;
        const ssize_t n = ::recv(fd, &ch, 1, 0);
        if (n == 0)
            return drop();
        if (n < 0) {
            if (errno == EAGAIN || errno == EINTR)
                return;
            return drop();
        }
        if (ch != '\n') {
            line.push_back(ch);
            if (line.size() > 32)
                return drop();
            continue;
        }
        unsigned port = 0;
        char tail;
        if (std::sscanf(line.c_str(), "CONNECT %u%c", &port, &tail) != 1)
            return drop();
        handshakes_.erase(fd);
        Conn c;
        c.fd = fd;
        c.local_port = next_local_port_++;
        c.peer_port = port;
        const Key key{c.local_port, c.peer_port};
        auto& stored = conns_.emplace(key, std::move(c)).first->second;
        fd_to_conn_[fd] = key;
        ++counters_.connections;
        if (registry_) {
            registry_->remove(fd);
            registry_->add(fd, EPOLLIN | EPOLLOUT | EPOLLRDHUP);
        }
        send_to_guest(&stored, key.first, key.second, vsock::kOpRequest);
        return;
    }
}

bool VsockDevice::flush_to_host(Conn& c) {
    size_t done = 0;
    while (done < c.to_host.size()) {
        const ssize_t n = ::send(c.fd, c.to_host.data() + done, c.to_host.size() - done, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            if (errno != EAGAIN) {
                // Host peer is gone.
                const Key key{c.local_port, c.peer_port};
                send_rst(key.first, key.second);
                close_conn(key);
                return false;
            }
            break;
        }
        done += static_cast<size_t>(n);
    }
    c.to_host.erase(c.to_host.begin(), c.to_host.begin() + static_cast<ptrdiff_t>(done));
    // The OK line written for host-initiated connections is not guest data.
    if (c.established)
        c.fwd_cnt += static_cast<uint32_t>(done);
    maybe_credit_update(c);
    return true;
}

void VsockDevice::maybe_credit_update(Conn& c) {
    if (c.fwd_cnt - c.reported_fwd_cnt >= vsock::kBufAlloc / 4 ||
        (c.to_host.empty() && c.fwd_cnt != c.reported_fwd_cnt))
        send_to_guest(&c, c.local_port, c.peer_port, vsock::kOpCreditUpdate);
}

void VsockDevice::pump_host_to_guest(Conn& c) {
    if (!c.established || c.host_eof)
        return;
    uint8_t buf[4096];
    for (;;) {
        const uint32_t in_flight = c.tx_cnt - c.peer_fwd_cnt;
        const uint32_t credit = c.peer_buf_alloc > in_flight ? c.peer_buf_alloc - in_flight : 0;
        if (credit == 0)
            return; // resumes on the next credit update
        const ssize_t n = ::recv(c.fd, buf, std::min<size_t>(sizeof(buf), credit), 0);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            if (errno == EAGAIN)
                return;
        }
        if (n <= 0) {
            c.host_eof = true;
            send_to_guest(&c, c.local_port, c.peer_port, vsock::kOpShutdown,
                          vsock::kShutdownRecv | vsock::kShutdownSend);
            return;
        }
        send_to_guest(&c, c.local_port, c.peer_port, vsock::kOpRw, 0, std::vector<uint8_t>(buf, buf + n));
    }
}

void VsockDevice::send_to_guest(Conn* c, uint32_t local_port, uint32_t peer_port, uint16_t op, uint32_t flags,
                                std::vector<uint8_t> payload) {
    Packet p;
    p.hdr.src_cid = vsock::kHostCid;
    p.hdr.dst_cid = guest_cid_;
    p.hdr.src_port = local_port;
    p.hdr.dst_port = peer_port;
    p.hdr.len = static_cast<uint32_t>(payload.size());
    p.hdr.type = vsock::kTypeStream;
    p.hdr.op = op;
    p.hdr.flags = flags;
    p.hdr.buf_alloc = vsock::kBufAlloc;
    if (c) {
        p.hdr.fwd_cnt = c->fwd_cnt;
        c->reported_fwd_cnt = c->fwd_cnt;
        c->tx_cnt += static_cast<uint32_t>(payload.size());
    }
    p.payload = std::move(payload);
    rx_pending_.push_back(std::move(p));
}

void VsockDevice::send_rst(uint32_t local_port, uint32_t peer_port) {
    ++counters_.resets_sent;
    send_to_guest(nullptr, local_port, peer_port, vsock::kOpRst);
}

void VsockDevice::close_conn(const Key& key) {
    auto it = conns_.find(key);
    if (it == conns_.end())
        return;
    if (registry_)
        registry_->remove(it->second.fd);
    ::close(it->second.fd);
    fd_to_conn_.erase(it->second.fd);
    conns_.erase(it);
}

void VsockDevice::deliver_rx() {
    if (!active_)
        return;
    auto& q = ctx_.queues[vsock::kRxQueue];
    if (!q.ready())
        return;
    auto& mem = *ctx_.mem;
    bool completed = false;
    while (!rx_pending_.empty()) {
        auto chain = q.pop_chain(mem);
        if (!chain)
            break;
        Packet& p = rx_pending_.front();
        const uint64_t room = chain->writable_bytes();
        if (room < vsock::kHeaderSize)
            throw Error(ErrorCode::MalformedChain, "vsock rx buffer shorter than a header");
        // A packet larger than the buffer is split; the header is repeated.
        const size_t take = std::min<uint64_t>(p.payload.size(), room - vsock::kHeaderSize);
        VsockHeader h = p.hdr;
        h.len = static_cast<uint32_t>(take);
        uint8_t raw[vsock::kHeaderSize];
        h.encode(raw);
        chain->write(mem, 0, raw);
        chain->write(mem, vsock::kHeaderSize, {p.payload.data(), take});
        q.add_used(mem, chain->head_index, static_cast<uint32_t>(vsock::kHeaderSize + take));
        ++counters_.rx_packets;
        completed = true;
        if (take == p.payload.size())
            rx_pending_.pop_front();
        else
            p.payload.erase(p.payload.begin(), p.payload.begin() + static_cast<ptrdiff_t>(take));
    }
    if (completed)
        signal_used(vsock::kRxQueue);
}

} // namespace kindling::devices
