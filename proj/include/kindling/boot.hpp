#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "kindling/guest_memory.hpp"

namespace kindling::boot {

// Offsets of the x86 setup header, identical in the image file and in the
// zero page (boot_params).
namespace hdr {
inline constexpr size_t kSetupSects = 0x1F1;
inline constexpr size_t kBootFlag = 0x1FE;
inline constexpr size_t kJump = 0x200;
inline constexpr size_t kHeaderMagic = 0x202;
inline constexpr size_t kVersion = 0x206;
inline constexpr size_t kTypeOfLoader = 0x210;
inline constexpr size_t kLoadFlags = 0x211;
inline constexpr size_t kRamdiskImage = 0x218;
inline constexpr size_t kRamdiskSize = 0x21C;
inline constexpr size_t kCmdLinePtr = 0x228;
inline constexpr size_t kInitrdAddrMax = 0x22C;
inline constexpr size_t kKernelAlignment = 0x230;
inline constexpr size_t kXLoadFlags = 0x236;
inline constexpr size_t kCmdlineSize = 0x238;
inline constexpr size_t kInitSize = 0x260;
inline constexpr size_t kMaxEnd = 0x280;
} // namespace hdr

namespace zp {
inline constexpr size_t kE820Entries = 0x1E8;
inline constexpr size_t kE820Table = 0x2D0;
inline constexpr size_t kE820EntrySize = 20;
inline constexpr size_t kE820Max = 128;
inline constexpr size_t kSize = 4096;
} // namespace zp

inline constexpr uint32_t kHeaderMagic = 0x53726448; // "HdrS"
inline constexpr uint16_t kBootFlag = 0xAA55;
inline constexpr uint16_t kMinVersion64 = 0x020C;
inline constexpr uint16_t kXlfKernel64 = 0x0001;
inline constexpr uint64_t kEntryOffset64 = 0x200;
inline constexpr uint64_t kCmdlineMax = 4096; // including the NUL
inline constexpr uint64_t kEbdaStart = 0x9FC00;

inline constexpr GuestAddress kKernelLoad{kHighRamStart};
inline constexpr GuestAddress kGdtAddr{0x1000};
inline constexpr GuestAddress kIdtAddr{0x1100};
inline constexpr GuestAddress kZeroPageAddr{0x7000};
inline constexpr GuestAddress kBootStackTop{0x8FF0};
inline constexpr GuestAddress kPml4Addr{0x9000};
inline constexpr GuestAddress kPdptAddr{0xA000};
inline constexpr GuestAddress kPdAddr{0xB000};
inline constexpr GuestAddress kCmdlineAddr{0x20000};

struct BzImageInfo {
    unsigned setup_sector_count = 0;
    uint64_t protected_mode_offset = 0;
    uint64_t protected_mode_len = 0;
    uint16_t header_version = 0;
    uint64_t entry_offset_64 = kEntryOffset64;
    uint16_t xloadflags = 0;
    uint32_t initrd_addr_max = 0;
    uint32_t cmdline_size = 0;
    uint32_t init_size = 0;
    size_t setup_header_end = 0; // one past the last header byte in the file
};

/// Reads the setup header of a bzImage whose protected-mode payload exposes
/// the 64-bit entry point. Throws BadMagic, UnsupportedProtocolVersion or
/// Truncated.
BzImageInfo parse_bzimage(std::span<const uint8_t> image);

struct BootLayout {
    GuestAddress kernel_load = kKernelLoad;
    GuestAddress kernel_end;
    GuestAddress zero_page = kZeroPageAddr;
    GuestAddress cmdline_addr = kCmdlineAddr;
    uint64_t cmdline_len = 0; // without the NUL
    std::optional<GuestAddress> initramfs_addr;
    uint64_t initramfs_len = 0;
    GuestAddress page_table_root = kPml4Addr;
    GuestAddress gdt_addr = kGdtAddr;
    uint64_t guest_ram = 0;
};

BootLayout plan_layout(const BzImageInfo& info, uint64_t cmdline_len, uint64_t initramfs_len,
                       uint64_t guest_ram);

enum class E820Kind : uint32_t { Ram = 1, Reserved = 2 };

struct E820Entry {
    uint64_t base = 0;
    uint64_t size = 0;
    E820Kind kind = E820Kind::Ram;
    bool operator==(const E820Entry&) const = default;
};

std::vector<E820Entry> build_e820(uint64_t guest_ram);

/// Empty newc cpio archive generated at build time.
std::span<const uint8_t> default_initramfs() noexcept;

/// The length the kernel-facing documentation quotes for an empty initramfs;
/// diagnostics compare against it.
inline constexpr size_t kReferenceInitramfsLen = 134;

/// Writes kernel, command line, initramfs (default when absent), zero page,
/// identity page tables and GDT. Returns the 64-bit entry point.
GuestAddress load_guest(GuestMemoryMap& mem, std::span<const uint8_t> image, const BzImageInfo& info,
                        const BootLayout& layout, std::string_view cmdline,
                        std::optional<std::span<const uint8_t>> initramfs);

/// Flat long-mode segment decoded from one of the GDT entries we write.
struct Segment {
    uint64_t base = 0;
    uint32_t limit = 0;
    uint16_t selector = 0;
    uint8_t type = 0;
    uint8_t present = 0;
    uint8_t dpl = 0;
    uint8_t db = 0;
    uint8_t s = 0;
    uint8_t l = 0;
    uint8_t g = 0;
    uint8_t avl = 0;
};

inline constexpr size_t kGdtEntries = 4;
inline constexpr uint16_t kCodeSelector = 0x08;
inline constexpr uint16_t kDataSelector = 0x10;
inline constexpr uint16_t kTssSelector = 0x18;

uint64_t gdt_entry(uint16_t flags, uint32_t base, uint32_t limit) noexcept;
std::vector<uint64_t> boot_gdt();
Segment segment_from_gdt(uint64_t entry, uint16_t selector) noexcept;

} // namespace kindling::boot
