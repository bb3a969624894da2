#include "kindling/guest_memory.hpp"

#include <sys/mman.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <string>

#include "kindling/error.hpp"

namespace kindling {

namespace {

std::string hex(uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "0x%llx", static_cast<unsigned long long>(v));
    return buf;
}

size_t page_round_up(uint64_t size) {
    const uint64_t page = static_cast<uint64_t>(::sysconf(_SC_PAGESIZE));
    return static_cast<size_t>((size + page - 1) / page * page);
}

} // namespace

MemoryRegion::MemoryRegion(GuestAddress base, uint64_t size) : base_(base), size_(size) {
    if (size == 0)
        throw Error(ErrorCode::ZeroSizeRegion, "region at " + hex(base.value));
    if (!base.checked_add(size))
        throw Error(ErrorCode::OutOfBounds, "region at " + hex(base.value) + " overflows");
    mapped_ = page_round_up(size);
    void* p = ::mmap(nullptr, mapped_, PROT_READ | PROT_WRITE,
                     MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (p == MAP_FAILED)
        throw_errno(ErrorCode::HostRejected, "mmap guest region of " + hex(size) + " bytes");
    host_ = static_cast<uint8_t*>(p);
}

MemoryRegion::~MemoryRegion() {
    if (host_)
        ::munmap(host_, mapped_);
}

MemoryRegion::MemoryRegion(MemoryRegion&& other) noexcept
    : base_(other.base_), size_(other.size_), host_(other.host_), mapped_(other.mapped_) {
    other.host_ = nullptr;
    other.size_ = 0;
    other.mapped_ = 0;
}

MemoryRegion& MemoryRegion::operator=(MemoryRegion&& other) noexcept {
    if (this != &other) {
        if (host_)
            ::munmap(host_, mapped_);
        base_ = other.base_;
        size_ = other.size_;
        host_ = other.host_;
        mapped_ = other.mapped_;
        other.host_ = nullptr;
        other.size_ = 0;
        other.mapped_ = 0;
    }
    return *this;
}

GuestMemoryMap GuestMemoryMap::create(std::vector<RegionSpec> layout) {
    if (layout.empty())
        throw Error(ErrorCode::ZeroSizeRegion, "empty memory layout");
    std::sort(layout.begin(), layout.end(),
              [](const RegionSpec& a, const RegionSpec& b) { return a.base < b.base; });
    for (size_t i = 0; i < layout.size(); ++i) {
        if (layout[i].size == 0)
            throw Error(ErrorCode::ZeroSizeRegion, "region at " + hex(layout[i].base.value));
        auto end = layout[i].base.checked_add(layout[i].size);
        if (!end)
            throw Error(ErrorCode::OutOfBounds, "region at " + hex(layout[i].base.value) + " overflows");
        if (i + 1 < layout.size() && *end > layout[i + 1].base)
            throw Error(ErrorCode::OverlappingRegions,
                        hex(layout[i].base.value) + " overlaps " + hex(layout[i + 1].base.value));
    }
    std::vector<MemoryRegion> regions;
    regions.reserve(layout.size());
    for (const auto& spec : layout)
        regions.emplace_back(spec.base, spec.size);
    return GuestMemoryMap(std::move(regions));
}

uint64_t GuestMemoryMap::total_size() const noexcept {
    uint64_t total = 0;
    for (const auto& r : regions_)
        total += r.size();
    return total;
}

std::optional<size_t> GuestMemoryMap::find_region(GuestAddress addr) const noexcept {
    // First region whose base is > addr; the candidate is the one before it.
    auto it = std::upper_bound(regions_.begin(), regions_.end(), addr,
                               [](GuestAddress a, const MemoryRegion& r) { return a < r.base(); });
    if (it == regions_.begin())
        return std::nullopt;
    --it;
    if (!it->contains(addr))
        return std::nullopt;
    return static_cast<size_t>(it - regions_.begin());
}

bool GuestMemoryMap::contains(GuestAddress addr, uint64_t len) const noexcept {
    auto idx = find_region(addr);
    if (!idx)
        return false;
    const auto& r = regions_[*idx];
    return len <= r.size() - (addr.value - r.base().value);
}

std::span<uint8_t> GuestMemoryMap::slice(GuestAddress addr, uint64_t len) const {
    auto idx = find_region(addr);
    if (!idx)
        throw Error(ErrorCode::OutOfBounds, "address " + hex(addr.value) + " is not mapped");
    const auto& r = regions_[*idx];
    const uint64_t offset = addr.value - r.base().value;
    if (len > r.size() - offset)
        throw Error(ErrorCode::CrossesRegionBoundary,
                    hex(addr.value) + "+" + hex(len) + " runs past region end " + hex(r.end().value));
    return {r.host() + offset, static_cast<size_t>(len)};
}

void GuestMemoryMap::write_bytes(GuestAddress addr, std::span<const uint8_t> data) {
    if (data.empty())
        return;
    auto dst = slice(addr, data.size());
    std::memcpy(dst.data(), data.data(), data.size());
}

void GuestMemoryMap::read_bytes(GuestAddress addr, std::span<uint8_t> out) const {
    if (out.empty())
        return;
    auto src = slice(addr, out.size());
    std::memcpy(out.data(), src.data(), out.size());
}

std::vector<uint8_t> GuestMemoryMap::read_bytes(GuestAddress addr, uint64_t len) const {
    std::vector<uint8_t> out(static_cast<size_t>(len));
    read_bytes(addr, out);
    return out;
}

uint64_t GuestMemoryMap::read_scalar(GuestAddress addr, unsigned width) const {
    if (width != 1 && width != 2 && width != 4 && width != 8)
        throw Error(ErrorCode::OutOfBounds, "unsupported scalar width " + std::to_string(width));
    auto src = slice(addr, width);
    uint64_t value = 0;
    for (unsigned i = 0; i < width; ++i)
        value |= static_cast<uint64_t>(src[i]) << (8 * i);
    return value;
}

void GuestMemoryMap::write_scalar(GuestAddress addr, unsigned width, uint64_t value) {
    if (width != 1 && width != 2 && width != 4 && width != 8)
        throw Error(ErrorCode::OutOfBounds, "unsupported scalar width " + std::to_string(width));
    uint8_t bytes[8];
    for (unsigned i = 0; i < width; ++i)
        bytes[i] = static_cast<uint8_t>(value >> (8 * i));
    auto dst = slice(addr, width);
    std::memcpy(dst.data(), bytes, width);
}

std::vector<RegionSpec> standard_ram_layout(uint64_t ram_bytes) {
    std::vector<RegionSpec> layout;
    layout.push_back({GuestAddress{0}, kLowRamEnd});
    if (ram_bytes <= kHighRamStart)
        return layout;
    const uint64_t below_gap = std::min(ram_bytes, kMmioGapStart);
    layout.push_back({GuestAddress{kHighRamStart}, below_gap - kHighRamStart});
    if (ram_bytes > kMmioGapStart)
        layout.push_back({GuestAddress{kMmioGapEnd}, ram_bytes - kMmioGapStart});
    return layout;
}

} // namespace kindling
