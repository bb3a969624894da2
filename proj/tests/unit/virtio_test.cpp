#include <set>

#include "doctest.h"
#include "kindling/virtio/irq.hpp"
#include "kindling/virtio/mmio.hpp"
#include "kindling/virtio/queue.hpp"
#include "ring_driver.hpp"
#include "ring_schedule.hpp"
#include "test_support.hpp"

using namespace kindling;
using namespace kindling::virtio;
using kindling::test::BufferSpec;
using kindling::test::error_of;
using kindling::test::RingDriver;
using kindling::test::UsedElem;

namespace {

GuestMemoryMap small_mem() { return GuestMemoryMap::create({{GuestAddress{0}, 0x10000}}); }

// Completes every chain with the number of writable bytes, filling them with 0xAB.
class FillDevice : public VirtioDevice {
public:
    uint32_t device_type() const override { return 42; }
    std::vector<uint16_t> queue_max_sizes() const override { return {8}; }
    uint64_t features() const override { return 1ull << 3; }
    void read_config(uint64_t offset, std::span<uint8_t> out) const override {
        for (size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<uint8_t>(offset + i);
    }
    void process_queue(size_t index) override {
        auto& q = ctx_.queues[index];
        while (auto chain = q.pop_chain(*ctx_.mem)) {
            std::vector<uint8_t> fill(chain->writable_bytes(), 0xAB);
            chain->write(*ctx_.mem, 0, fill);
            q.add_used(*ctx_.mem, chain->head_index, static_cast<uint32_t>(fill.size()));
            ++processed;
        }
        signal_used(index);
    }
    int processed = 0;
};

struct Fixture {
    GuestMemoryMap mem = small_mem();
    int irqs = 0;
    MmioTransport t{GuestAddress{kMmioBase}, std::make_unique<FillDevice>(), mem, [this] { ++irqs; }};
    FillDevice& dev() { return static_cast<FillDevice&>(t.device()); }
};

} // namespace

TEST_SUITE("virtio_core") {

TEST_CASE("pop on an empty ring") {
    auto mem = small_mem();
    RingDriver d(mem, 4, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    Virtqueue q;
    d.attach(q);
    CHECK_FALSE(q.pop_chain(mem).has_value());
    CHECK(q.next_avail() == 0);
}

TEST_CASE("three-descriptor chain resolves in table order") {
    auto mem = small_mem();
    RingDriver d(mem, 4, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    Virtqueue q;
    d.attach(q);
    d.write_descriptor(0, GuestAddress{0x4000}, 16, kDescFlagNext, 1);
    d.write_descriptor(1, GuestAddress{0x5000}, 512, kDescFlagNext | kDescFlagWrite, 2);
    d.write_descriptor(2, GuestAddress{0x6000}, 1, kDescFlagWrite, 0);
    d.publish_head(0);
    auto chain = q.pop_chain(mem);
    REQUIRE(chain.has_value());
    CHECK(chain->head_index == 0);
    REQUIRE(chain->segments.size() == 3);
    CHECK(chain->segments[0] == Segment{GuestAddress{0x4000}, 16, false});
    CHECK(chain->segments[1] == Segment{GuestAddress{0x5000}, 512, true});
    CHECK(chain->segments[2] == Segment{GuestAddress{0x6000}, 1, true});
    CHECK(chain->readable_bytes() == 16);
    CHECK(chain->writable_bytes() == 513);
    CHECK(q.next_avail() == 1);
    CHECK_FALSE(q.pop_chain(mem).has_value());
}

TEST_CASE("malformed chains") {
    auto mem = small_mem();
    auto setup = [&](auto&& build) {
        RingDriver d(mem, 4, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
        Virtqueue q;
        d.attach(q);
        build(d);
        return error_of([&] { q.pop_chain(mem); });
    };
    SUBCASE("self cycle") {
        CHECK(setup([](RingDriver& d) {
                  d.write_descriptor(1, GuestAddress{0x4000}, 8, kDescFlagNext, 1);
                  d.publish_head(1);
              }) == ErrorCode::MalformedChain);
    }
    SUBCASE("two-node cycle") {
        CHECK(setup([](RingDriver& d) {
                  d.write_descriptor(0, GuestAddress{0x4000}, 8, kDescFlagNext, 3);
                  d.write_descriptor(3, GuestAddress{0x4000}, 8, kDescFlagNext, 0);
                  d.publish_head(0);
              }) == ErrorCode::MalformedChain);
    }
    SUBCASE("next out of range") {
        CHECK(setup([](RingDriver& d) {
                  d.write_descriptor(0, GuestAddress{0x4000}, 8, kDescFlagNext, 4);
                  d.publish_head(0);
              }) == ErrorCode::MalformedChain);
    }
    SUBCASE("buffer outside guest memory") {
        CHECK(setup([](RingDriver& d) {
                  d.write_descriptor(0, GuestAddress{0xFFF0}, 32, 0, 0);
                  d.publish_head(0);
              }) == ErrorCode::MalformedChain);
    }
    SUBCASE("head out of range") {
        CHECK(setup([](RingDriver& d) { d.publish_head(9); }) == ErrorCode::MalformedChain);
    }
    SUBCASE("indirect descriptor") {
        CHECK(setup([](RingDriver& d) {
                  d.write_descriptor(0, GuestAddress{0x4000}, 16, kDescFlagIndirect, 0);
                  d.publish_head(0);
              }) == ErrorCode::MalformedChain);
    }
    SUBCASE("zero-length writable buffer") {
        CHECK(setup([](RingDriver& d) {
                  d.write_descriptor(0, GuestAddress{0x4000}, 0, kDescFlagWrite, 0);
                  d.publish_head(0);
              }) == ErrorCode::MalformedChain);
    }
    SUBCASE("driver publishes more than the ring holds") {
        CHECK(setup([](RingDriver& d) {
                  for (int i = 0; i < 5; ++i)
                      d.publish_head(0);
              }) == ErrorCode::MalformedChain);
    }
}

TEST_CASE("pop on a queue that is not ready") {
    auto mem = small_mem();
    Virtqueue q;
    CHECK(error_of([&] { q.pop_chain(mem); }) == ErrorCode::InvalidQueue);
}

TEST_CASE("queue validation") {
    auto mem = small_mem();
    Virtqueue q(8);
    q.set_size(6);
    q.set_desc_table(GuestAddress{0x1000});
    q.set_avail_ring(GuestAddress{0x2000});
    q.set_used_ring(GuestAddress{0x3000});
    CHECK_FALSE(q.enable(mem)); // not a power of two
    q.set_size(16);
    CHECK_FALSE(q.enable(mem)); // above max
    q.set_size(8);
    q.set_used_ring(GuestAddress{0xFFF8});
    CHECK_FALSE(q.enable(mem)); // used ring runs off the end
    q.set_used_ring(GuestAddress{0x3002});
    CHECK_FALSE(q.enable(mem)); // misaligned
    q.set_used_ring(GuestAddress{0x3000});
    CHECK(q.enable(mem));
}

TEST_CASE("add_used publishes in completion order") {
    auto mem = small_mem();
    RingDriver d(mem, 4, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    Virtqueue q;
    d.attach(q);
    const uint16_t a = d.publish({{GuestAddress{0x4000}, 8, true}});
    const uint16_t b = d.publish({{GuestAddress{0x5000}, 8, true}});
    auto ca = q.pop_chain(mem);
    auto cb = q.pop_chain(mem);
    REQUIRE(ca);
    REQUIRE(cb);
    q.add_used(mem, cb->head_index, 7);
    CHECK(mem.read<uint16_t>(GuestAddress{0x3002}) == 1);
    q.add_used(mem, ca->head_index, 3);
    CHECK(d.reap() == std::vector<UsedElem>{{b, 7}, {a, 3}});
    CHECK(q.next_used() == 2);
    CHECK(error_of([&] { q.add_used(mem, ca->head_index, 0); }) == ErrorCode::UnknownHead);
    CHECK(error_of([&] { q.add_used(mem, 3, 0); }) == ErrorCode::UnknownHead);
}

TEST_CASE("indices wrap at 2^16") {
    auto mem = small_mem();
    RingDriver d(mem, 2, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000}, 65534);
    Virtqueue q;
    d.attach(q);
    for (int i = 0; i < 6; ++i) {
        d.publish({{GuestAddress{0x4000}, 4, true}});
        auto c = q.pop_chain(mem);
        REQUIRE(c);
        q.add_used(mem, c->head_index, 4);
        CHECK(d.reap().size() == 1);
    }
    CHECK(q.next_used() == 4);
    CHECK(q.next_avail() == 4);
}

TEST_CASE("interrupt suppression flag is honoured on read") {
    auto mem = small_mem();
    RingDriver d(mem, 4, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    Virtqueue q;
    d.attach(q);
    CHECK(q.needs_notification(mem));
    d.set_no_interrupt(true);
    CHECK_FALSE(q.needs_notification(mem));
}

TEST_CASE("randomized schedules match the split-ring oracle") {
    for (uint64_t seed = 1; seed <= 1500; ++seed) {
        auto r = kindling::test::run_ring_schedule(seed);
        INFO(r.divergence);
        REQUIRE(r.ok);
    }
}

TEST_CASE("IRQ budget") {
    std::vector<uint32_t> raised;
    IrqAllocator irqs([&](uint32_t line) { raised.push_back(line); });
    std::set<uint32_t> lines;
    for (int i = 0; i < 10; ++i)
        lines.insert(irqs.allocate("dev" + std::to_string(i)));
    CHECK(lines.size() == 10);
    CHECK(*lines.begin() == IrqAllocator::kFirstLine);
    CHECK(error_of([&] { irqs.allocate("dev10"); }) == ErrorCode::IrqExhausted);
    CHECK(error_of([&] { irqs.allocate("dev3"); }) == ErrorCode::DuplicateDevice);
    irqs.assert_irq("dev2");
    CHECK(raised == std::vector<uint32_t>{*irqs.line_of("dev2")});
    CHECK(error_of([&] { irqs.assert_irq("nope"); }) == ErrorCode::DeviceUnregistered);
    const uint32_t freed = *irqs.line_of("dev4");
    irqs.release("dev4");
    CHECK(irqs.allocate("dev10") == freed);
}

TEST_CASE("identification registers") {
    Fixture f;
    CHECK(f.t.read(reg::kMagic, 4) == 0x74726976);
    CHECK(f.t.read(reg::kVersion, 4) == 2);
    CHECK(f.t.read(reg::kDeviceId, 4) == 42);
    f.t.write(reg::kDeviceFeaturesSel, 4, 1);
    CHECK(f.t.read(reg::kDeviceFeatures, 4) == 1); // VERSION_1
    f.t.write(reg::kDeviceFeaturesSel, 4, 0);
    CHECK(f.t.read(reg::kDeviceFeatures, 4) == (1u << 3));
    CHECK(f.t.read(reg::kQueueNumMax, 4) == 8);
    f.t.write(reg::kQueueSel, 4, 5);
    CHECK(f.t.read(reg::kQueueNumMax, 4) == 0);
    CHECK(f.t.read(reg::kConfig + 2, 1) == 2);
    CHECK(f.t.read(reg::kConfig, 4) == 0x03020100);
}

TEST_CASE("unknown registers read zero and are counted") {
    Fixture f;
    CHECK(f.t.read(0x0E0, 4) == 0);
    f.t.write(0x0E0, 4, 7);
    CHECK(f.t.read(reg::kMagic, 2) == 0);
    CHECK(f.t.counters().unknown_accesses == 3);
}

TEST_CASE("full handshake, notify and interrupt") {
    Fixture f;
    kindling::test::negotiate(f.t);
    CHECK(f.t.device_status() == (status::kAcknowledge | status::kDriver | status::kFeaturesOk));
    RingDriver d(f.mem, 8, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    d.attach(f.t, 0);
    CHECK(f.t.read(reg::kQueueReady, 4) == 1);
    kindling::test::driver_ok(f.t);
    CHECK(f.dev().active());

    d.publish({{GuestAddress{0x4000}, 4, false}, {GuestAddress{0x5000}, 16, true}});
    f.t.write(reg::kQueueNotify, 4, 0);
    CHECK(f.dev().processed == 1);
    CHECK(f.irqs == 1);
    CHECK(f.t.read(reg::kInterruptStatus, 4) == kInterruptUsedBuffer);
    CHECK(d.reap().front().len == 16);
    CHECK(f.mem.read<uint8_t>(GuestAddress{0x500F}) == 0xAB);
    f.t.write(reg::kInterruptAck, 4, kInterruptUsedBuffer);
    CHECK(f.t.read(reg::kInterruptStatus, 4) == 0);

    // Driver suppresses interrupts: work completes, line stays quiet.
    d.set_no_interrupt(true);
    d.publish({{GuestAddress{0x5000}, 16, true}});
    f.t.write(reg::kQueueNotify, 4, 0);
    CHECK(f.dev().processed == 2);
    CHECK(f.irqs == 1);
}

TEST_CASE("feature negotiation refuses unknown bits and missing VERSION_1") {
    Fixture f;
    f.t.write(reg::kStatus, 4, status::kAcknowledge);
    f.t.write(reg::kStatus, 4, status::kAcknowledge | status::kDriver);
    f.t.write(reg::kDriverFeaturesSel, 4, 0);
    f.t.write(reg::kDriverFeatures, 4, 1u << 3);
    f.t.write(reg::kStatus, 4, status::kAcknowledge | status::kDriver | status::kFeaturesOk);
    CHECK((f.t.device_status() & status::kFeaturesOk) == 0);
    f.t.write(reg::kDriverFeaturesSel, 4, 1);
    f.t.write(reg::kDriverFeatures, 4, 1u | (1u << 20));
    f.t.write(reg::kStatus, 4, status::kAcknowledge | status::kDriver | status::kFeaturesOk);
    CHECK((f.t.device_status() & status::kFeaturesOk) == 0);
    f.t.write(reg::kDriverFeatures, 4, 1u);
    f.t.write(reg::kStatus, 4, status::kAcknowledge | status::kDriver | status::kFeaturesOk);
    CHECK((f.t.device_status() & status::kFeaturesOk) != 0);
    CHECK(f.dev().acked_features() == (kFeatureVersion1 | (1ull << 3)));
}

TEST_CASE("out-of-order status writes are ignored") {
    Fixture f;
    f.t.write(reg::kStatus, 4, status::kDriver);
    CHECK(f.t.device_status() == 0);
    f.t.write(reg::kStatus, 4, status::kAcknowledge);
    f.t.write(reg::kStatus, 4, status::kAcknowledge | status::kDriver | status::kDriverOk);
    CHECK(f.t.device_status() == status::kAcknowledge);
    CHECK(f.t.counters().invalid_status_writes == 2);
}

TEST_CASE("status 0 resets device and queues") {
    Fixture f;
    kindling::test::negotiate(f.t);
    RingDriver d(f.mem, 8, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    d.attach(f.t, 0);
    kindling::test::driver_ok(f.t);
    d.publish({{GuestAddress{0x5000}, 16, true}});
    f.t.write(reg::kQueueNotify, 4, 0);
    REQUIRE(f.t.interrupt_status() != 0);
    f.t.write(reg::kStatus, 4, 0);
    CHECK(f.t.device_status() == 0);
    CHECK(f.t.interrupt_status() == 0);
    CHECK_FALSE(f.t.queues()[0].ready());
    CHECK_FALSE(f.dev().active());
}

TEST_CASE("notify on a queue that is not ready is counted and ignored") {
    Fixture f;
    kindling::test::negotiate(f.t);
    kindling::test::driver_ok(f.t);
    f.t.write(reg::kQueueNotify, 4, 0);
    f.t.write(reg::kQueueNotify, 4, 3);
    CHECK(f.t.counters().ignored_notifies == 2);
    CHECK(f.dev().processed == 0);
}

TEST_CASE("malformed chain moves the device to FAILED") {
    Fixture f;
    kindling::test::negotiate(f.t);
    RingDriver d(f.mem, 8, GuestAddress{0x1000}, GuestAddress{0x2000}, GuestAddress{0x3000});
    d.attach(f.t, 0);
    kindling::test::driver_ok(f.t);
    d.write_descriptor(2, GuestAddress{0x4000}, 4, kDescFlagNext, 2);
    d.publish_head(2);
    f.t.write(reg::kQueueNotify, 4, 0);
    CHECK((f.t.device_status() & status::kFailed) != 0);
    CHECK(f.t.counters().malformed_chains == 1);
    f.t.write(reg::kQueueNotify, 4, 0);
    CHECK(f.t.counters().ignored_notifies == 1);
}

TEST_CASE("MMIO bus keeps windows disjoint and routes by address") {
    auto mem = small_mem();
    MmioBus bus;
    auto a = std::make_shared<MmioTransport>(GuestAddress{kMmioBase}, std::make_unique<FillDevice>(), mem, nullptr);
    auto b = std::make_shared<MmioTransport>(GuestAddress{kMmioBase + kMmioWindow}, std::make_unique<FillDevice>(),
                                             mem, nullptr);
    bus.insert(b);
    bus.insert(a);
    auto c = std::make_shared<MmioTransport>(GuestAddress{kMmioBase + 0x800}, std::make_unique<FillDevice>(), mem,
                                             nullptr);
    CHECK(error_of([&] { bus.insert(c); }) == ErrorCode::DuplicateDevice);
    CHECK(bus.find(GuestAddress{kMmioBase}) == a.get());
    CHECK(bus.find(GuestAddress{kMmioBase + 0xFFF}) == a.get());
    CHECK(bus.find(GuestAddress{kMmioBase + 0x1000}) == b.get());
    CHECK(bus.find(GuestAddress{kMmioBase + 0x2000}) == nullptr);
    CHECK(bus.find(GuestAddress{kMmioBase - 1}) == nullptr);
    uint8_t data[4];
    CHECK(bus.read(GuestAddress{kMmioBase + 0x1000}, data));
    CHECK(data[0] == 0x76);
    CHECK(data[3] == 0x74);
    CHECK_FALSE(bus.read(GuestAddress{0xE0000000}, data));
    CHECK(a->discovery_arg(5) == "virtio_mmio.device=4K@0xd0000000:5");
}

}
