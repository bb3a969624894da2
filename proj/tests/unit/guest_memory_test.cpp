#include <random>
#include <thread>

#include "doctest.h"
#include "kindling/guest_memory.hpp"
#include "test_support.hpp"

using namespace kindling;
using kindling::test::error_of;

namespace {

constexpr uint64_t kMiB = 1ull << 20;

GuestMemoryMap figure2_map() {
    return GuestMemoryMap::create({{0x0_ga, 0xA0000}, {0x100000_ga, 127 * kMiB}});
}

// Byte-by-byte classification of an access against a layout.
std::optional<ErrorCode> classify(const std::vector<RegionSpec>& layout, uint64_t addr, uint64_t len) {
    auto region_of = [&](uint64_t a) -> int {
        for (size_t i = 0; i < layout.size(); ++i)
            if (a >= layout[i].base.value && a < layout[i].base.value + layout[i].size)
                return static_cast<int>(i);
        return -1;
    };
    int first = region_of(addr);
    if (first < 0)
        return ErrorCode::OutOfBounds;
    for (uint64_t i = 1; i < len; ++i)
        if (region_of(addr + i) != first)
            return ErrorCode::CrossesRegionBoundary;
    return std::nullopt;
}

} // namespace

TEST_SUITE("guest_memory") {

TEST_CASE("single region covers [0, 128 MiB)") {
    auto mem = GuestMemoryMap::create({{0x0_ga, 128 * kMiB}});
    REQUIRE(mem.regions().size() == 1);
    CHECK(mem.regions()[0].base() == 0x0_ga);
    CHECK(mem.regions()[0].end() == GuestAddress{0x8000000});
    CHECK(mem.contains(GuestAddress{0x7FFFFFF}, 1));
    CHECK_FALSE(mem.contains(GuestAddress{0x8000000}, 1));
}

TEST_CASE("two regions leave the I/O hole unmapped") {
    auto mem = figure2_map();
    REQUIRE(mem.regions().size() == 2);
    CHECK(mem.find_region(GuestAddress{0x9FFFF}) == 0u);
    CHECK_FALSE(mem.find_region(GuestAddress{0xA0000}).has_value());
    CHECK_FALSE(mem.find_region(GuestAddress{0xFFFFF}).has_value());
    CHECK(mem.find_region(GuestAddress{0x100000}) == 1u);
    CHECK(error_of([&] { mem.read_scalar(GuestAddress{0xC0000}, 4); }) == ErrorCode::OutOfBounds);
}

TEST_CASE("layout errors") {
    CHECK(error_of([] { GuestMemoryMap::create({{0x0_ga, 4096}, {0x800_ga, 4096}}); }) ==
          ErrorCode::OverlappingRegions);
    // Unsorted input is sorted before the overlap check.
    CHECK(error_of([] { GuestMemoryMap::create({{0x800_ga, 4096}, {0x0_ga, 4096}}); }) ==
          ErrorCode::OverlappingRegions);
    CHECK(error_of([] { GuestMemoryMap::create({{0x0_ga, 0}}); }) == ErrorCode::ZeroSizeRegion);
    CHECK(error_of([] { GuestMemoryMap::create({}); }) == ErrorCode::ZeroSizeRegion);
    CHECK(error_of([] { GuestMemoryMap::create({{GuestAddress{UINT64_MAX - 10}, 4096}}); }) ==
          ErrorCode::OutOfBounds);
    // Adjacent regions are fine.
    CHECK_FALSE(error_of([] { GuestMemoryMap::create({{0x0_ga, 4096}, {0x1000_ga, 4096}}); }));
}

TEST_CASE("byte read-back and empty write") {
    auto mem = figure2_map();
    const std::vector<uint8_t> one{0xAA};
    mem.write_bytes(0x1000_ga, one);
    CHECK(mem.read_bytes(0x1000_ga, 1) == one);
    mem.write_bytes(0x5000_ga, std::span<const uint8_t>{});
    // Even in the hole an empty write is a no-op.
    mem.write_bytes(GuestAddress{0xB0000}, std::span<const uint8_t>{});
    CHECK(mem.read_bytes(0x1000_ga, 0).empty());
}

TEST_CASE("write straddling the hole is rejected and writes nothing") {
    auto mem = figure2_map();
    std::vector<uint8_t> data(16, 0x5A);
    // Oracle: 0x9FFF8 + 16 = 0xA0008 crosses the region end at 0xA0000.
    CHECK(classify({{0x0_ga, 0xA0000}, {0x100000_ga, 127 * kMiB}}, 0x9FFF8, 16) ==
          ErrorCode::CrossesRegionBoundary);
    CHECK(error_of([&] { mem.write_bytes(GuestAddress{0x9FFF8}, data); }) == ErrorCode::CrossesRegionBoundary);
    CHECK(mem.read_bytes(GuestAddress{0x9FFF8}, 8) == std::vector<uint8_t>(8, 0));
    std::vector<uint8_t> out(16);
    CHECK(error_of([&] { mem.read_bytes(GuestAddress{0x9FFF8}, out); }) == ErrorCode::CrossesRegionBoundary);
}

TEST_CASE("scalars are little-endian") {
    auto mem = figure2_map();
    CHECK(mem.read_scalar(0x2000_ga, 8) == 0);
    mem.write_scalar(0x2000_ga, 4, 0x12345678);
    CHECK(mem.read_bytes(0x2000_ga, 4) == std::vector<uint8_t>{0x78, 0x56, 0x34, 0x12});
    CHECK(mem.read<uint16_t>(0x2002_ga) == 0x1234);
    CHECK(error_of([&] { mem.read_scalar(0x2000_ga, 3); }) == ErrorCode::OutOfBounds);
}

TEST_CASE("random accesses agree with the byte-level oracle") {
    const std::vector<RegionSpec> layout{{0x0_ga, 0xA0000}, {0x100000_ga, 2 * kMiB}};
    auto mem = GuestMemoryMap::create(layout);
    std::mt19937_64 rng(0x6b696e646c);
    const unsigned widths[] = {1, 2, 4, 8};
    for (int iter = 0; iter < 20000; ++iter) {
        // Bias addresses towards the region edges.
        const uint64_t anchors[] = {0x0, 0xA0000, 0x100000, 0x300000};
        uint64_t addr = anchors[rng() % 4] + (rng() % 64) - 32;
        if (addr > (1ull << 40))
            addr = rng() % 0x400000;
        const unsigned width = widths[rng() % 4];
        const uint64_t value = rng();
        const auto expected = classify(layout, addr, width);
        const auto got = error_of([&] { mem.write_scalar(GuestAddress{addr}, width, value); });
        REQUIRE(got == expected);
        if (expected)
            continue;
        const uint64_t masked = width == 8 ? value : value & ((1ull << (8 * width)) - 1);
        REQUIRE(mem.read_scalar(GuestAddress{addr}, width) == masked);
        const auto bytes = mem.read_bytes(GuestAddress{addr}, width);
        uint64_t reassembled = 0;
        for (unsigned i = 0; i < width; ++i)
            reassembled |= static_cast<uint64_t>(bytes[i]) << (8 * i);
        REQUIRE(reassembled == masked);
    }
}

TEST_CASE("standard RAM layout") {
    auto small = standard_ram_layout(128 * kMiB);
    REQUIRE(small.size() == 2);
    CHECK(small[0].base == 0x0_ga);
    CHECK(small[0].size == kLowRamEnd);
    CHECK(small[1].base == GuestAddress{kHighRamStart});
    CHECK(small[1].size == 128 * kMiB - kHighRamStart);

    auto big = standard_ram_layout(4096 * kMiB);
    REQUIRE(big.size() == 3);
    CHECK(big[1].base.value + big[1].size == kMmioGapStart);
    CHECK(big[2].base == GuestAddress{kMmioGapEnd});
    CHECK(big[2].size == 4096 * kMiB - kMmioGapStart);
}

TEST_CASE("concurrent writers on disjoint ranges") {
    auto mem = GuestMemoryMap::create({{0x0_ga, 1 * kMiB}});
    std::vector<std::thread> threads;
    for (unsigned t = 0; t < 4; ++t)
        threads.emplace_back([&mem, t] {
            for (uint64_t i = 0; i < 4096; ++i)
                mem.write<uint32_t>(GuestAddress{t * 0x10000 + i * 4}, static_cast<uint32_t>(t * 100000 + i));
        });
    for (auto& th : threads)
        th.join();
    for (unsigned t = 0; t < 4; ++t)
        CHECK(mem.read<uint32_t>(GuestAddress{t * 0x10000 + 4095 * 4}) == t * 100000 + 4095);
}

}
