#include "kindling/devices/block.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <vector>

#include "kindling/error.hpp"

namespace kindling::devices {

namespace {

bool pread_full(int fd, uint8_t* buf, size_t len, off_t off) {
    while (len > 0) {
        const ssize_t n = ::pread(fd, buf, len, off);
        if (n < 0 && errno == EINTR)
            continue;
        if (n <= 0)
            return false;
        buf += n;
        len -= static_cast<size_t>(n);
        off += n;
    }
    return true;
}

bool pwrite_full(int fd, const uint8_t* buf, size_t len, off_t off) {
    while (len > 0) {
        const ssize_t n = ::pwrite(fd, buf, len, off);
        if (n < 0 && errno == EINTR)
            continue;
        if (n <= 0)
            return false;
        buf += n;
        len -= static_cast<size_t>(n);
        off += n;
    }
    return true;
}

} // namespace

BlockDevice::BlockDevice(const std::string& path, bool read_only, std::string id)
    : read_only_(read_only), id_(std::move(id)) {
    fd_ = ::open(path.c_str(), (read_only ? O_RDONLY : O_RDWR) | O_CLOEXEC);
    if (fd_ < 0)
        throw_errno(ErrorCode::DeviceIo, "open block image " + path);
    struct stat st{};
    if (::fstat(fd_, &st) != 0) {
        ::close(fd_);
        throw_errno(ErrorCode::DeviceIo, "stat block image " + path);
    }
    capacity_sectors_ = static_cast<uint64_t>(st.st_size) / blk::kSectorSize;
}

BlockDevice::~BlockDevice() {
    if (fd_ >= 0)
        ::close(fd_);
}

uint64_t BlockDevice::features() const {
    return blk::kFeatureFlush | (read_only_ ? blk::kFeatureRo : 0);
}

void BlockDevice::read_config(uint64_t offset, std::span<uint8_t> out) const {
    // Only the capacity field (le64 at offset 0) is meaningful.
    uint8_t cfg[8];
    for (int i = 0; i < 8; ++i)
        cfg[i] = static_cast<uint8_t>(capacity_sectors_ >> (8 * i));
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = offset + i < sizeof(cfg) ? cfg[offset + i] : 0;
}

void BlockDevice::process_queue(size_t index) {
    if (index != 0)
        return;
    auto& q = ctx_.queues[0];
    bool completed = false;
    while (auto chain = q.pop_chain(*ctx_.mem)) {
        const uint32_t written = execute(*chain);
        q.add_used(*ctx_.mem, chain->head_index, written);
        completed = true;
    }
    if (completed)
        signal_used(0);
}

uint32_t BlockDevice::execute(const virtio::DescriptorChain& chain) {
    ++counters_.requests;
    auto& mem = *ctx_.mem;
    const uint64_t writable = chain.writable_bytes();
    if (writable == 0) {
        // Nowhere to put a status byte; hand the buffers back untouched.
        ++counters_.failed;
        return 0;
    }
    const uint64_t status_at = writable - 1;
    auto finish = [&](uint8_t status, uint64_t data_written) -> uint32_t {
        if (status != blk::kStatusOk)
            ++counters_.failed;
        const uint8_t s = status;
        chain.write(mem, status_at, {&s, 1});
        return static_cast<uint32_t>(data_written + 1);
    };

    uint8_t hdr[blk::kHeaderSize];
    if (chain.read(mem, 0, hdr) != sizeof(hdr))
        return finish(blk::kStatusIoErr, 0);
    uint32_t type;
    uint64_t sector;
    std::memcpy(&type, hdr, 4);
    std::memcpy(&sector, hdr + 8, 8);

    const uint64_t payload_out = chain.readable_bytes() - blk::kHeaderSize;
    auto in_range = [&](uint64_t len) {
        if (len % blk::kSectorSize != 0)
            return false;
        const uint64_t sectors = len / blk::kSectorSize;
        return sector <= capacity_sectors_ && sectors <= capacity_sectors_ - sector;
    };

    switch (type) {
    case blk::kTypeIn: {
        ++counters_.reads;
        const uint64_t len = status_at;
        if (!in_range(len))
            return finish(blk::kStatusIoErr, 0);
        std::vector<uint8_t> buf(len);
        if (!pread_full(fd_, buf.data(), len, static_cast<off_t>(sector * blk::kSectorSize)))
            return finish(blk::kStatusIoErr, 0);
        chain.write(mem, 0, buf);
        counters_.bytes_read += len;
        return finish(blk::kStatusOk, len);
    }
    case blk::kTypeOut: {
        ++counters_.writes;
        if (read_only_ || !in_range(payload_out))
            return finish(blk::kStatusIoErr, 0);
        std::vector<uint8_t> buf(payload_out);
        chain.read(mem, blk::kHeaderSize, buf);
        if (!pwrite_full(fd_, buf.data(), buf.size(), static_cast<off_t>(sector * blk::kSectorSize)))
            return finish(blk::kStatusIoErr, 0);
        counters_.bytes_written += payload_out;
        return finish(blk::kStatusOk, 0);
    }
    case blk::kTypeFlush:
        ++counters_.flushes;
        if (::fdatasync(fd_) != 0)
            return finish(blk::kStatusIoErr, 0);
        return finish(blk::kStatusOk, 0);
    case blk::kTypeGetId: {
        uint8_t id[blk::kIdBytes] = {};
        std::memcpy(id, id_.data(), std::min(id_.size(), sizeof(id)));
        const uint64_t len = std::min<uint64_t>(status_at, sizeof(id));
        chain.write(mem, 0, {id, len});
        return finish(blk::kStatusOk, len);
    }
    default:
        return finish(blk::kStatusUnsupported, 0);
    }
}

void BlockDevice::flush() {
    if (fd_ >= 0 && !read_only_)
        ::fdatasync(fd_);
}

} // namespace kindling::devices
