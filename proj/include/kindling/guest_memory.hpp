#pragma once

#include <compare>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace kindling {

/// A guest-physical byte address. Arithmetic is checked; there is no
/// wrapping add.
struct GuestAddress {
    uint64_t value = 0;

    constexpr auto operator<=>(const GuestAddress&) const = default;

    constexpr std::optional<GuestAddress> checked_add(uint64_t offset) const {
        if (offset > UINT64_MAX - value)
            return std::nullopt;
        return GuestAddress{value + offset};
    }
};

constexpr GuestAddress operator""_ga(unsigned long long v) { return GuestAddress{v}; }

// Fixed x86 physical layout.
inline constexpr uint64_t kLowRamEnd = 0xA0000;       // start of the BIOS/IO hole
inline constexpr uint64_t kHighRamStart = 0x100000;   // protected-mode kernel load address
inline constexpr uint64_t kMmioGapStart = 0xC0000000; // RAM never crosses this
inline constexpr uint64_t kMmioGapEnd = 0x100000000;  // RAM above the gap resumes here

struct RegionSpec {
    GuestAddress base;
    uint64_t size = 0;
};

class MemoryRegion {
public:
    MemoryRegion(GuestAddress base, uint64_t size);
    ~MemoryRegion();
    MemoryRegion(MemoryRegion&& other) noexcept;
    MemoryRegion& operator=(MemoryRegion&& other) noexcept;
    MemoryRegion(const MemoryRegion&) = delete;
    MemoryRegion& operator=(const MemoryRegion&) = delete;

    GuestAddress base() const noexcept { return base_; }
    uint64_t size() const noexcept { return size_; }
    GuestAddress end() const noexcept { return GuestAddress{base_.value + size_}; }
    uint8_t* host() const noexcept { return host_; }
    bool contains(GuestAddress addr) const noexcept {
        return addr >= base_ && addr.value - base_.value < size_;
    }

private:
    GuestAddress base_;
    uint64_t size_ = 0;
    uint8_t* host_ = nullptr;
    size_t mapped_ = 0;
};

/// The guest physical address space: sorted, disjoint, host-backed regions.
///
/// Accessors are safe to call concurrently on disjoint ranges. A failed
/// access touches nothing.
class GuestMemoryMap {
public:
    /// Builds the map; every region is zero-filled anonymous memory.
    static GuestMemoryMap create(std::vector<RegionSpec> layout);

    std::span<const MemoryRegion> regions() const noexcept { return regions_; }
    uint64_t total_size() const noexcept;

    /// Index of the region containing addr, if any.
    std::optional<size_t> find_region(GuestAddress addr) const noexcept;
    bool contains(GuestAddress addr, uint64_t len) const noexcept;

    /// Host view of [addr, addr+len). Throws OutOfBounds or
    /// CrossesRegionBoundary.
    std::span<uint8_t> slice(GuestAddress addr, uint64_t len) const;

    void write_bytes(GuestAddress addr, std::span<const uint8_t> data);
    void read_bytes(GuestAddress addr, std::span<uint8_t> out) const;
    std::vector<uint8_t> read_bytes(GuestAddress addr, uint64_t len) const;

    /// Little-endian scalar access; width is 1, 2, 4 or 8.
    uint64_t read_scalar(GuestAddress addr, unsigned width) const;
    void write_scalar(GuestAddress addr, unsigned width, uint64_t value);

    template <std::unsigned_integral T>
    T read(GuestAddress addr) const {
        return static_cast<T>(read_scalar(addr, sizeof(T)));
    }
    template <std::unsigned_integral T>
    void write(GuestAddress addr, T value) {
        write_scalar(addr, sizeof(T), value);
    }

private:
    explicit GuestMemoryMap(std::vector<MemoryRegion> regions) : regions_(std::move(regions)) {}

    std::vector<MemoryRegion> regions_;
};

/// RAM layout for a machine with ram_bytes of memory: [0, 0xA0000) plus
/// [0x100000, ...), split at the 32-bit MMIO gap when large enough.
std::vector<RegionSpec> standard_ram_layout(uint64_t ram_bytes);

} // namespace kindling
