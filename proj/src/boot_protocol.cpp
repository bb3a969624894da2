#include "kindling/boot.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <string>

#include "kindling/error.hpp"

namespace kindling::boot {

namespace {

constexpr uint8_t kDefaultInitramfs[] = {
#include "default_initramfs.inc"
};

uint32_t le32(std::span<const uint8_t> b, size_t off) {
    return static_cast<uint32_t>(b[off]) | static_cast<uint32_t>(b[off + 1]) << 8 |
           static_cast<uint32_t>(b[off + 2]) << 16 | static_cast<uint32_t>(b[off + 3]) << 24;
}

uint16_t le16(std::span<const uint8_t> b, size_t off) {
    return static_cast<uint16_t>(b[off] | b[off + 1] << 8);
}

void put_le(std::span<uint8_t> b, size_t off, uint64_t v, unsigned width) {
    for (unsigned i = 0; i < width; ++i)
        b[off + i] = static_cast<uint8_t>(v >> (8 * i));
}

constexpr uint64_t align_up(uint64_t v, uint64_t a) { return (v + a - 1) / a * a; }
constexpr uint64_t align_down(uint64_t v, uint64_t a) { return v / a * a; }

constexpr uint64_t kPage = 4096;
constexpr uint64_t kTwoMiB = 2ull << 20;
constexpr uint64_t kPteFlags = 0x03;      // present | writable
constexpr uint64_t kLargePageFlags = 0x83; // present | writable | page size

} // namespace

BzImageInfo parse_bzimage(std::span<const uint8_t> image) {
    if (image.size() < hdr::kVersion + 2)
        throw Error(ErrorCode::Truncated, "image of " + std::to_string(image.size()) +
                                              " bytes is shorter than the setup header");
    if (le32(image, hdr::kHeaderMagic) != kHeaderMagic)
        throw Error(ErrorCode::BadMagic, "setup header magic HdrS not found");
    if (le16(image, hdr::kBootFlag) != kBootFlag)
        throw Error(ErrorCode::BadMagic, "boot flag 0xAA55 not found");

    BzImageInfo info;
    info.header_version = le16(image, hdr::kVersion);
    if (info.header_version < kMinVersion64)
        throw Error(ErrorCode::UnsupportedProtocolVersion,
                    "boot protocol " + std::to_string(info.header_version >> 8) + "." +
                        std::to_string(info.header_version & 0xff) + " predates the 64-bit entry");
    if (image.size() < hdr::kInitSize + 4)
        throw Error(ErrorCode::Truncated, "setup header cut short");
    info.xloadflags = le16(image, hdr::kXLoadFlags);
    if ((info.xloadflags & kXlfKernel64) == 0)
        throw Error(ErrorCode::UnsupportedProtocolVersion, "kernel does not advertise a 64-bit entry point");

    const unsigned sects = image[hdr::kSetupSects];
    info.setup_sector_count = sects == 0 ? 4 : sects;
    info.protected_mode_offset = (static_cast<uint64_t>(info.setup_sector_count) + 1) * 512;
    if (image.size() <= info.protected_mode_offset + kEntryOffset64)
        throw Error(ErrorCode::Truncated, "protected-mode payload missing or shorter than its 64-bit entry");
    info.protected_mode_len = image.size() - info.protected_mode_offset;

    info.initrd_addr_max = le32(image, hdr::kInitrdAddrMax);
    info.cmdline_size = le32(image, hdr::kCmdlineSize);
    info.init_size = le32(image, hdr::kInitSize);
    // The header ends at 0x202 plus the jump offset stored at 0x201.
    size_t end = hdr::kHeaderMagic + image[hdr::kJump + 1];
    info.setup_header_end = std::clamp<size_t>(end, hdr::kInitSize + 4, hdr::kMaxEnd);
    return info;
}

BootLayout plan_layout(const BzImageInfo& info, uint64_t cmdline_len, uint64_t initramfs_len,
                       uint64_t guest_ram) {
    uint64_t cmdline_limit = kCmdlineMax - 1;
    if (info.cmdline_size != 0)
        cmdline_limit = std::min<uint64_t>(cmdline_limit, info.cmdline_size);
    if (cmdline_len > cmdline_limit)
        throw Error(ErrorCode::CmdlineTooLong, std::to_string(cmdline_len) + " bytes exceeds " +
                                                   std::to_string(cmdline_limit));

    BootLayout layout;
    layout.guest_ram = guest_ram;
    layout.cmdline_len = cmdline_len;
    layout.kernel_end = GuestAddress{kKernelLoad.value + info.protected_mode_len};

    const uint64_t low_top = std::min(guest_ram, kMmioGapStart);
    // The kernel decompresses in place and needs init_size bytes from its load address.
    const uint64_t kernel_reserved_end =
        std::max(layout.kernel_end.value, kKernelLoad.value + info.init_size);
    if (guest_ram <= kKernelLoad.value || layout.kernel_end.value > low_top)
        throw Error(ErrorCode::ImageTooLarge, "kernel payload of " + std::to_string(info.protected_mode_len) +
                                                  " bytes does not fit in " + std::to_string(guest_ram) +
                                                  " bytes of RAM");

    if (initramfs_len > 0) {
        uint64_t top = low_top;
        if (info.initrd_addr_max != 0)
            top = std::min<uint64_t>(top, static_cast<uint64_t>(info.initrd_addr_max) + 1);
        if (initramfs_len > top)
            throw Error(ErrorCode::ImageTooLarge, "initramfs does not fit in RAM");
        const uint64_t addr = align_down(top - initramfs_len, kPage);
        if (addr < align_up(kernel_reserved_end, kPage))
            throw Error(ErrorCode::ImageTooLarge, "kernel and initramfs overlap in " +
                                                      std::to_string(guest_ram) + " bytes of RAM");
        layout.initramfs_addr = GuestAddress{addr};
        layout.initramfs_len = initramfs_len;
    }
    return layout;
}

std::vector<E820Entry> build_e820(uint64_t guest_ram) {
    std::vector<E820Entry> entries;
    entries.push_back({0, kEbdaStart, E820Kind::Ram});
    if (guest_ram > kHighRamStart) {
        const uint64_t below_gap = std::min(guest_ram, kMmioGapStart);
        entries.push_back({kHighRamStart, below_gap - kHighRamStart, E820Kind::Ram});
        if (guest_ram > kMmioGapStart)
            entries.push_back({kMmioGapEnd, guest_ram - kMmioGapStart, E820Kind::Ram});
    }
    return entries;
}

std::span<const uint8_t> default_initramfs() noexcept { return kDefaultInitramfs; }

uint64_t gdt_entry(uint16_t flags, uint32_t base, uint32_t limit) noexcept {
    return ((static_cast<uint64_t>(base) & 0xff000000u) << 32) |
           ((static_cast<uint64_t>(base) & 0x00ffffffu) << 16) |
           (static_cast<uint64_t>(limit) & 0x0000ffffu) |
           ((static_cast<uint64_t>(limit) & 0x000f0000u) << 32) |
           ((static_cast<uint64_t>(flags) & 0xf0ffu) << 40);
}

std::vector<uint64_t> boot_gdt() {
    return {
        gdt_entry(0, 0, 0),
        gdt_entry(0xa09b, 0, 0xfffff), // 64-bit code
        gdt_entry(0xc093, 0, 0xfffff), // data
        gdt_entry(0x808b, 0, 0xfffff), // TSS
    };
}

Segment segment_from_gdt(uint64_t entry, uint16_t selector) noexcept {
    Segment s;
    s.base = ((entry >> 16) & 0x00ffffff) | (((entry >> 56) & 0xff) << 24);
    s.limit = static_cast<uint32_t>((entry & 0xffff) | (((entry >> 48) & 0xf) << 16));
    s.selector = selector;
    s.type = static_cast<uint8_t>((entry >> 40) & 0xf);
    s.s = static_cast<uint8_t>((entry >> 44) & 0x1);
    s.dpl = static_cast<uint8_t>((entry >> 45) & 0x3);
    s.present = static_cast<uint8_t>((entry >> 47) & 0x1);
    s.avl = static_cast<uint8_t>((entry >> 52) & 0x1);
    s.l = static_cast<uint8_t>((entry >> 53) & 0x1);
    s.db = static_cast<uint8_t>((entry >> 54) & 0x1);
    s.g = static_cast<uint8_t>((entry >> 55) & 0x1);
    return s;
}

GuestAddress load_guest(GuestMemoryMap& mem, std::span<const uint8_t> image, const BzImageInfo& info,
                        const BootLayout& layout, std::string_view cmdline,
                        std::optional<std::span<const uint8_t>> initramfs) {
    if (image.size() != info.protected_mode_offset + info.protected_mode_len)
        throw Error(ErrorCode::Truncated, "image does not match its parsed header");

    mem.write_bytes(layout.kernel_load, image.subspan(info.protected_mode_offset, info.protected_mode_len));

    if (cmdline.size() != layout.cmdline_len)
        throw Error(ErrorCode::CmdlineTooLong, "command line changed after layout was planned");
    std::vector<uint8_t> cmd(cmdline.begin(), cmdline.end());
    cmd.push_back(0);
    mem.write_bytes(layout.cmdline_addr, cmd);

    std::span<const uint8_t> ramdisk = initramfs ? *initramfs : default_initramfs();
    if (!layout.initramfs_addr || layout.initramfs_len != ramdisk.size())
        throw Error(ErrorCode::ImageTooLarge, "layout was planned for a different initramfs size");
    mem.write_bytes(*layout.initramfs_addr, ramdisk);

    std::array<uint8_t, zp::kSize> zero_page{};
    std::copy(image.begin() + hdr::kSetupSects, image.begin() + static_cast<ptrdiff_t>(info.setup_header_end),
              zero_page.begin() + hdr::kSetupSects);
    put_le(zero_page, hdr::kTypeOfLoader, 0xff, 1);
    put_le(zero_page, hdr::kCmdLinePtr, layout.cmdline_addr.value, 4);
    put_le(zero_page, hdr::kRamdiskImage, layout.initramfs_addr->value, 4);
    put_le(zero_page, hdr::kRamdiskSize, layout.initramfs_len, 4);
    const auto e820 = build_e820(layout.guest_ram);
    put_le(zero_page, zp::kE820Entries, e820.size(), 1);
    for (size_t i = 0; i < e820.size(); ++i) {
        const size_t off = zp::kE820Table + i * zp::kE820EntrySize;
        put_le(zero_page, off, e820[i].base, 8);
        put_le(zero_page, off + 8, e820[i].size, 8);
        put_le(zero_page, off + 16, static_cast<uint32_t>(e820[i].kind), 4);
    }
    mem.write_bytes(layout.zero_page, zero_page);

    // Identity map of the first GiB with 2 MiB pages.
    mem.write<uint64_t>(kPml4Addr, kPdptAddr.value | kPteFlags);
    mem.write<uint64_t>(kPdptAddr, kPdAddr.value | kPteFlags);
    for (uint64_t i = 0; i < 512; ++i)
        mem.write<uint64_t>(GuestAddress{kPdAddr.value + i * 8}, (i * kTwoMiB) | kLargePageFlags);

    const auto gdt = boot_gdt();
    for (size_t i = 0; i < gdt.size(); ++i)
        mem.write<uint64_t>(GuestAddress{layout.gdt_addr.value + i * 8}, gdt[i]);

    return GuestAddress{layout.kernel_load.value + info.entry_offset_64};
}

} // namespace kindling::boot
