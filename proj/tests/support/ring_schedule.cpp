#include "ring_schedule.hpp"

#include <random>
#include <sstream>

#include "kindling/error.hpp"
#include "ring_driver.hpp"
#include "ring_oracle.hpp"

namespace kindling::test {

using namespace kindling::virtio;

namespace {

constexpr uint64_t kMemSize = 0x10000;
constexpr GuestAddress kDesc{0x1000};
constexpr GuestAddress kAvail{0x2000};
constexpr GuestAddress kUsed{0x3000};

} // namespace

ScheduleResult run_ring_schedule(uint64_t seed) {
    std::mt19937_64 rng(seed);
    ScheduleResult result;
    auto fail = [&](const std::string& why) {
        std::ostringstream os;
        os << "seed " << seed << ": " << why;
        result.ok = false;
        result.divergence = os.str();
        return result;
    };

    const uint16_t sizes[] = {2, 4, 8};
    const uint16_t size = sizes[rng() % 3];
    // Start near the 16-bit wrap a third of the time.
    const uint16_t start = rng() % 3 == 0 ? static_cast<uint16_t>(65536 - (rng() % 16))
                                          : static_cast<uint16_t>(rng());

    auto mem = GuestMemoryMap::create({{GuestAddress{0}, kMemSize}});
    RingDriver driver(mem, size, kDesc, kAvail, kUsed, start);
    Virtqueue q;
    driver.attach(q);

    auto snapshot = [&] { return mem.read_bytes(GuestAddress{0}, kMemSize); };
    SplitRingOracle oracle(size, kDesc.value, kAvail.value, kUsed.value, start, 0, kMemSize);
    oracle.seed_used(snapshot());

    std::vector<uint16_t> device_in_flight;
    const int steps = 20 + static_cast<int>(rng() % 60);
    for (int step = 0; step < steps; ++step) {
        const unsigned r = rng() % 20;
        if (r < 8 && driver.free_descriptors() > 0) {
            const size_t k = 1 + rng() % std::min<size_t>(driver.free_descriptors(), 3);
            std::vector<BufferSpec> bufs;
            for (size_t i = 0; i < k; ++i)
                bufs.push_back({GuestAddress{0x4000 + rng() % 0xB000}, 1 + static_cast<uint32_t>(rng() % 256),
                                rng() % 2 == 0});
            const uint16_t head = driver.publish(bufs);
            ++result.published;
            if (rng() % 40 == 0) {
                // Corrupt the tail into a self-loop; both sides must refuse it.
                driver.write_descriptor(head, bufs[0].addr, bufs[0].len, kDescFlagNext, head);
            }
        } else if (r < 14) {
            const auto expected = oracle.pop(snapshot());
            std::optional<DescriptorChain> got;
            bool malformed = false;
            try {
                got = q.pop_chain(mem);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::MalformedChain)
                    throw;
                malformed = true;
            }
            if (expected.kind == SplitRingOracle::PopKind::Malformed) {
                if (!malformed)
                    return fail("oracle saw a malformed chain, implementation did not");
                result.ended_malformed = true;
                break;
            }
            if (malformed)
                return fail("implementation reported a malformed chain the oracle accepts");
            if (expected.kind == SplitRingOracle::PopKind::Empty) {
                if (got)
                    return fail("implementation popped from an empty ring");
                continue;
            }
            if (!got)
                return fail("implementation missed a published chain");
            if (got->head_index != expected.head)
                return fail("head mismatch");
            if (got->segments.size() != expected.segs.size())
                return fail("segment count mismatch");
            for (size_t i = 0; i < expected.segs.size(); ++i) {
                const auto& a = got->segments[i];
                const auto& b = expected.segs[i];
                if (a.addr.value != b.addr || a.len != b.len || a.writable != b.writable)
                    return fail("segment " + std::to_string(i) + " mismatch");
            }
            device_in_flight.push_back(got->head_index);
            ++result.popped;
        } else if (!device_in_flight.empty()) {
            const size_t pick = rng() % device_in_flight.size();
            const uint16_t head = device_in_flight[pick];
            device_in_flight.erase(device_in_flight.begin() + static_cast<ptrdiff_t>(pick));
            const uint32_t len = static_cast<uint32_t>(rng() % 4096);
            q.add_used(mem, head, len);
            if (!oracle.complete(head, len))
                return fail("oracle does not consider head in flight");
            ++result.completed;
            if (rng() % 2 == 0)
                driver.reap();
        }
        const auto image = snapshot();
        if (oracle.actual_used(image) != oracle.expected_used())
            return fail("used ring bytes diverged at step " + std::to_string(step));
    }

    if (!result.ended_malformed) {
        if (static_cast<uint16_t>(q.next_used() - start) != static_cast<uint16_t>(result.completed))
            return fail("next_used does not count completions");
        if (result.published != result.popped + q.pending(mem))
            return fail("publication conservation violated");
        if (q.in_flight() != device_in_flight.size())
            return fail("in-flight accounting diverged");
    }
    return result;
}

} // namespace kindling::test
