#include <thread>

#include "doctest.h"
#include "kindling/boot.hpp"
#include "kindling/kvm.hpp"
#include "test_support.hpp"

using namespace kindling;
using kindling::test::error_of;

namespace {

constexpr uint64_t kRam = 64ull << 20;

#define REQUIRE_KVM()                                                                                                  \
    if (!kindling::test::kvm_available()) {                                                                            \
        MESSAGE("no usable /dev/kvm; skipped");                                                                        \
        return;                                                                                                        \
    }

// Loads the synthetic kernel, then optionally overwrites the entry with code.
LongModeSetup load(GuestMemoryMap& mem, std::span<const uint8_t> code = {}) {
    const auto image = kindling::test::make_bzimage();
    const auto info = boot::parse_bzimage(image);
    const std::string_view cmdline = "console=ttyS0";
    const auto layout = boot::plan_layout(info, cmdline.size(), boot::default_initramfs().size(), kRam);
    const GuestAddress entry = boot::load_guest(mem, image, info, layout, cmdline, std::nullopt);
    if (!code.empty())
        mem.write_bytes(entry, code);
    return {entry, layout.zero_page, layout.page_table_root, boot::kBootStackTop, layout.gdt_addr,
            static_cast<uint16_t>(boot::kGdtEntries * 8 - 1), boot::kIdtAddr};
}

} // namespace

TEST_SUITE("kvm_facade") {

TEST_CASE("missing device node") {
    CHECK(error_of([] { Hypervisor::open("/nonexistent/kvm"); }) == ErrorCode::HypervisorUnavailable);
}

TEST_CASE("open twice gives independent handles") {
    REQUIRE_KVM();
    auto a = Hypervisor::open();
    auto b = Hypervisor::open();
    CHECK(a.fd() != b.fd());
    CHECK(a.api_version() == kKvmApiVersion);
    CHECK(a.vcpu_mmap_size() > 0);
    CHECK_FALSE(a.supported_cpuid().empty());
}

TEST_CASE("one VM per process, memory slots, vCPU indices") {
    REQUIRE_KVM();
    auto h = Hypervisor::open();
    {
        Vm vm = h.create_vm();
        CHECK(Vm::live());
        CHECK(error_of([&] { h.create_vm(); }) == ErrorCode::VmAlreadyExists);

        auto mem = GuestMemoryMap::create({{GuestAddress{0}, 1 << 20}, {GuestAddress{1ull << 32}, 1 << 20}});
        CHECK_FALSE(vm.memory_registered());
        vm.register_memory(mem);
        CHECK(vm.slot_count() == mem.regions().size());
        CHECK(error_of([&] { vm.register_memory(mem); }) == ErrorCode::AlreadyRegistered);

        Vcpu v0 = vm.create_vcpu(0);
        CHECK(error_of([&] { vm.create_vcpu(0); }) == ErrorCode::DuplicateIndex);
        Vcpu v1 = vm.create_vcpu(1);
        CHECK(v1.index() == 1);
        vm.pulse_irq(4);
    }
    CHECK_FALSE(Vm::live());
    Vm again = h.create_vm(); // released with the previous one
}

TEST_CASE("long-mode register state reads back") {
    REQUIRE_KVM();
    auto h = Hypervisor::open();
    Vm vm = h.create_vm();
    auto mem = GuestMemoryMap::create(standard_ram_layout(kRam));
    vm.register_memory(mem);
    const LongModeSetup s = load(mem);
    Vcpu v = vm.create_vcpu(0);
    v.configure_long_mode(s);
    const auto r = v.regs();
    const auto sr = v.sregs();
    CHECK(r.rip == 0x100200);
    CHECK(r.rsi == boot::kZeroPageAddr.value);
    CHECK(r.rflags == 0x2);
    CHECK(sr.cr3 == 0x9000);
    CHECK((sr.cr0 & 0x80000001) == 0x80000001);
    CHECK((sr.cr4 & 0x20) == 0x20);
    CHECK((sr.efer & 0x500) == 0x500);
    CHECK(sr.cs.l == 1);
    CHECK(sr.cs.selector == boot::kCodeSelector);
    CHECK(sr.ds.selector == boot::kDataSelector);
    CHECK(sr.gdt.base == boot::kGdtAddr.value);
}

TEST_CASE("exits are typed: port out, port in, MMIO read and write") {
    REQUIRE_KVM();
    auto h = Hypervisor::open();
    Vm vm = h.create_vm();
    auto mem = GuestMemoryMap::create(standard_ram_layout(kRam));
    vm.register_memory(mem);
    const uint8_t code[] = {
        0xB0, 0x41,                   // mov $'A', %al
        0x66, 0xBA, 0xF8, 0x03,       // mov $0x3f8, %dx
        0xEE,                         // out %al, %dx
        0xEC,                         // in %dx, %al
        0xBB, 0x00, 0x00, 0x00, 0x08, // mov $0x8000000, %ebx  (unbacked, below 1 GiB)
        0x8B, 0x03,                   // mov (%rbx), %eax
        0x89, 0x43, 0x10,             // mov %eax, 0x10(%rbx)
        0x66, 0xBA, 0xF4, 0x00,       // mov $0xf4, %dx
        0xEE,                         // out %al, %dx
        0xF4,                         // hlt, absorbed by the in-kernel LAPIC
    };
    const LongModeSetup s = load(mem, code);
    Vcpu v = vm.create_vcpu(0);
    v.configure_long_mode(s);

    auto next = [&] {
        for (;;)
            if (auto e = v.run())
                return *e;
    };
    VmExit e = next();
    CHECK(e.kind == ExitKind::IoOut);
    CHECK(e.addr == 0x3F8);
    CHECK(e.width == 1);
    REQUIRE(e.data.size() == 1);
    CHECK(e.data[0] == 'A');

    e = next();
    CHECK(e.kind == ExitKind::IoIn);
    CHECK(e.addr == 0x3F8);
    e.data[0] = 0x5A;

    e = next();
    CHECK(e.kind == ExitKind::MmioRead);
    CHECK(e.addr == 0x8000000);
    CHECK(e.width == 4);
    const uint8_t word[4] = {1, 2, 3, 4};
    std::copy(std::begin(word), std::end(word), e.data.begin());

    e = next();
    CHECK(e.kind == ExitKind::MmioWrite);
    CHECK(e.addr == 0x8000010);
    REQUIRE(e.data.size() == 4);
    CHECK(std::vector<uint8_t>(e.data.begin(), e.data.end()) == std::vector<uint8_t>{1, 2, 3, 4});

    e = next();
    CHECK(e.kind == ExitKind::IoOut);
    CHECK(e.addr == 0xF4);
    CHECK((v.regs().rax & 0xFFFFFFFF) == 0x04030201);
}

TEST_CASE("run is confined to the owner thread; kick interrupts it") {
    REQUIRE_KVM();
    auto h = Hypervisor::open();
    Vm vm = h.create_vm();
    auto mem = GuestMemoryMap::create(standard_ram_layout(kRam));
    vm.register_memory(mem);
    const uint8_t spin[] = {0xFA, 0xF4, 0xEB, 0xFD}; // cli; hlt; jmp .-1
    const LongModeSetup s = load(mem, spin);
    Vcpu v = vm.create_vcpu(0);
    v.configure_long_mode(s);

    std::atomic<bool> kicked{false};
    std::thread owner([&] {
        // Only a kick gets us out of the spin loop.
        while (v.run().has_value()) {
        }
        kicked = true;
    });
    while (!v.bound())
        std::this_thread::yield();
    CHECK(error_of([&] { v.run(); }) == ErrorCode::WrongThread);
    CHECK(error_of([&] { v.configure_long_mode(s); }) == ErrorCode::WrongThread);
    for (int i = 0; i < 200 && !kicked; ++i) {
        v.kick();
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    owner.join();
    CHECK(kicked);
}

}
