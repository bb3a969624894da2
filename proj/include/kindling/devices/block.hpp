#pragma once

#include <cstdint>
#include <string>

#include "kindling/virtio/device.hpp"

namespace kindling::devices {

namespace blk {
inline constexpr uint32_t kTypeIn = 0;
inline constexpr uint32_t kTypeOut = 1;
inline constexpr uint32_t kTypeFlush = 4;
inline constexpr uint32_t kTypeGetId = 8;

inline constexpr uint8_t kStatusOk = 0;
inline constexpr uint8_t kStatusIoErr = 1;
inline constexpr uint8_t kStatusUnsupported = 2;

inline constexpr uint64_t kFeatureRo = 1ull << 5;
inline constexpr uint64_t kFeatureFlush = 1ull << 9;

inline constexpr uint64_t kSectorSize = 512;
inline constexpr uint64_t kHeaderSize = 16;
inline constexpr size_t kIdBytes = 20;
} // namespace blk

struct BlockCounters {
    uint64_t requests = 0;
    uint64_t reads = 0;
    uint64_t writes = 0;
    uint64_t flushes = 0;
    uint64_t failed = 0;
    uint64_t bytes_read = 0;
    uint64_t bytes_written = 0;
};

/// virtio-blk backed by a raw image file. Requests run synchronously.
class BlockDevice : public virtio::VirtioDevice {
public:
    /// Throws DeviceIo if the file cannot be opened.
    BlockDevice(const std::string& path, bool read_only, std::string id = {});
    ~BlockDevice() override;
    BlockDevice(const BlockDevice&) = delete;
    BlockDevice& operator=(const BlockDevice&) = delete;

    uint32_t device_type() const override { return virtio::kDeviceIdBlock; }
    std::vector<uint16_t> queue_max_sizes() const override { return {256}; }
    uint64_t features() const override;
    void read_config(uint64_t offset, std::span<uint8_t> out) const override;
    void process_queue(size_t index) override;
    void flush() override;

    uint64_t capacity_sectors() const noexcept { return capacity_sectors_; }
    bool read_only() const noexcept { return read_only_; }
    const BlockCounters& counters() const noexcept { return counters_; }

private:
    // Returns the number of bytes written into the chain, status included.
    uint32_t execute(const virtio::DescriptorChain& chain);

    int fd_ = -1;
    bool read_only_;
    std::string id_;
    uint64_t capacity_sectors_ = 0;
    BlockCounters counters_;
};

} // namespace kindling::devices
