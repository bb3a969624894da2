#include "block_harness.hpp"

#include <algorithm>
#include <cstring>
#include <random>
#include <sstream>

#include "kindling/devices/block.hpp"
#include "kindling/virtio/mmio.hpp"
#include "ring_driver.hpp"
#include "test_support.hpp"

namespace kindling::test {

namespace {

using namespace kindling::devices;

constexpr uint16_t kRing = 32;
constexpr uint64_t kDataBase = 0x10000;
constexpr uint64_t kSlotBytes = 0x4000; // per in-flight request
constexpr uint32_t kMaxSectors = 16;

struct Pending {
    uint16_t head = 0;
    uint32_t type = 0;
    uint64_t sector = 0;
    uint32_t sectors = 0;
    uint8_t expect_status = 0;
    uint32_t expect_len = 0;
    std::vector<uint8_t> expect_data;
    GuestAddress data;
    GuestAddress status;
};

} // namespace

BlockScheduleResult run_block_schedule(uint64_t seed, const std::filesystem::path& path, uint64_t image_bytes,
                                       uint64_t requests) {
    BlockScheduleResult r;
    std::mt19937_64 rng(seed);
    std::vector<uint8_t> model(image_bytes);
    for (auto& b : model)
        b = static_cast<uint8_t>(rng());
    write_file(path, model);
    const uint64_t capacity = image_bytes / blk::kSectorSize;

    auto mem = GuestMemoryMap::create({{GuestAddress{0}, kDataBase + kRing * kSlotBytes}});
    virtio::MmioTransport t(GuestAddress{virtio::kMmioBase}, std::make_unique<BlockDevice>(path.string(), false),
                            mem, nullptr);
    auto& dev = static_cast<BlockDevice&>(t.device());
    if (dev.capacity_sectors() != capacity) {
        r.ok = false;
        r.divergence = "capacity mismatch";
        return r;
    }
    negotiate(t);
    RingDriver d(mem, kRing, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    d.attach(t, 0);
    driver_ok(t);

    auto fail = [&](uint64_t req, const std::string& what) {
        std::ostringstream os;
        os << "seed " << seed << " request " << req << ": " << what;
        r.ok = false;
        r.divergence = os.str();
        return r;
    };

    std::vector<Pending> batch;
    uint64_t issued = 0;
    while (issued < requests) {
        const size_t n = std::min<uint64_t>(1 + rng() % 4, requests - issued);
        batch.clear();
        for (size_t i = 0; i < n; ++i, ++issued) {
            const uint64_t slot = kDataBase + i * kSlotBytes;
            Pending p;
            p.status = GuestAddress{slot};
            p.data = GuestAddress{slot + 0x200};
            const GuestAddress hdr_at{slot + 0x10};
            const unsigned pick = rng() % 100;
            p.type = pick < 45 ? blk::kTypeIn : pick < 90 ? blk::kTypeOut : pick < 96 ? blk::kTypeFlush : 0x77;
            p.sectors = 1 + rng() % kMaxSectors;
            p.sector = rng() % 20 == 0 ? capacity - 1 - rng() % 8 : rng() % capacity;
            const bool out_of_range = p.sector + p.sectors > capacity;
            const uint32_t data_len = p.sectors * blk::kSectorSize;

            uint8_t hdr[16] = {};
            std::memcpy(hdr, &p.type, 4);
            std::memcpy(hdr + 8, &p.sector, 8);
            mem.write_bytes(hdr_at, hdr);
            mem.write<uint8_t>(p.status, 0xEE);

            std::vector<BufferSpec> chain{{hdr_at, 16, false}};
            auto add_data = [&](bool writable) {
                // Split the data buffer into up to three descriptors.
                uint32_t off = 0;
                const int parts = 1 + rng() % 3;
                for (int k = 0; k < parts && off < data_len; ++k) {
                    uint32_t len = k + 1 == parts ? data_len - off
                                                  : std::max<uint32_t>(1, rng() % (data_len - off));
                    chain.push_back({GuestAddress{p.data.value + off}, len, writable});
                    off += len;
                }
            };

            switch (p.type) {
            case blk::kTypeIn:
                add_data(true);
                ++r.reads;
                if (out_of_range) {
                    p.expect_status = blk::kStatusIoErr;
                    p.expect_len = 1;
                } else {
                    p.expect_status = blk::kStatusOk;
                    p.expect_len = data_len + 1;
                    const auto* from = model.data() + p.sector * blk::kSectorSize;
                    p.expect_data.assign(from, from + data_len);
                }
                break;
            case blk::kTypeOut: {
                std::vector<uint8_t> payload(data_len);
                for (auto& b : payload)
                    b = static_cast<uint8_t>(rng());
                mem.write_bytes(p.data, payload);
                add_data(false);
                ++r.writes;
                p.expect_len = 1;
                if (out_of_range) {
                    p.expect_status = blk::kStatusIoErr;
                } else {
                    p.expect_status = blk::kStatusOk;
                    std::copy(payload.begin(), payload.end(), model.begin() + p.sector * blk::kSectorSize);
                }
                break;
            }
            case blk::kTypeFlush:
                ++r.flushes;
                p.expect_status = blk::kStatusOk;
                p.expect_len = 1;
                break;
            default:
                p.expect_status = blk::kStatusUnsupported;
                p.expect_len = 1;
                break;
            }
            if (p.expect_status != blk::kStatusOk)
                ++r.rejected;
            chain.push_back({p.status, 1, true});
            p.head = d.publish(chain);
            batch.push_back(std::move(p));
        }
        t.write(virtio::reg::kQueueNotify, 4, 0);
        r.requests += n;

        const auto used = d.reap();
        if (used.size() != batch.size())
            return fail(issued, "completed " + std::to_string(used.size()) + " of " + std::to_string(batch.size()));
        for (size_t i = 0; i < batch.size(); ++i) {
            const Pending& p = batch[i];
            if (used[i].id != p.head)
                return fail(issued, "completion order");
            if (used[i].len != p.expect_len)
                return fail(issued, "used length " + std::to_string(used[i].len) + " expected " +
                                        std::to_string(p.expect_len));
            const uint8_t status = mem.read<uint8_t>(p.status);
            if (status != p.expect_status)
                return fail(issued, "status " + std::to_string(status) + " expected " +
                                        std::to_string(p.expect_status));
            if (!p.expect_data.empty()) {
                std::vector<uint8_t> got(p.expect_data.size());
                mem.read_bytes(p.data, got);
                if (got != p.expect_data)
                    return fail(issued, "read data differs from model");
            }
        }
    }
    if ((t.device_status() & virtio::status::kFailed) != 0)
        return fail(issued, "device entered FAILED");
    if (read_file(path) != model)
        return fail(issued, "backing file differs from model");
    return r;
}

} // namespace kindling::test
