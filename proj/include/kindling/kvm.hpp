#pragma once

#include <linux/kvm.h>
#include <pthread.h>

#include <atomic>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kindling/fd.hpp"
#include "kindling/guest_memory.hpp"

namespace kindling {

inline constexpr int kKvmApiVersion = KVM_API_VERSION;
inline constexpr uint64_t kTssAddress = 0xFFFBD000;
inline constexpr uint64_t kIdentityMapAddress = 0xFFFBC000;

enum class ExitKind { IoIn, IoOut, MmioRead, MmioWrite, Hlt, Shutdown, Unsupported };
const char* to_string(ExitKind k);

/// One VMEXIT. `data` points into the vCPU's shared run page and stays valid
/// until the next run(); for IoIn and MmioRead the handler writes the
/// response bytes into it.
struct VmExit {
    ExitKind kind = ExitKind::Unsupported;
    uint64_t addr = 0;   // port or guest-physical address
    uint32_t width = 0;  // bytes per access
    uint32_t count = 1;  // string I/O repeats
    std::span<uint8_t> data;
    uint32_t reason = 0; // raw host exit reason
};

class Vm;

/// The system-level handle (/dev/kvm).
class Hypervisor {
public:
    /// Throws HypervisorUnavailable if the device is missing or speaks
    /// another API version.
    static Hypervisor open(const char* path = "/dev/kvm");

    int fd() const noexcept { return fd_.get(); }
    int api_version() const noexcept { return api_version_; }
    size_t vcpu_mmap_size() const noexcept { return mmap_size_; }
    const std::vector<kvm_cpuid_entry2>& supported_cpuid() const noexcept { return cpuid_; }

    /// Creates the process's VM with an in-kernel irqchip and PIT.
    /// Throws VmAlreadyExists while another Vm is alive.
    Vm create_vm() const;

private:
    Hypervisor() = default;
    UniqueFd fd_;
    int api_version_ = 0;
    size_t mmap_size_ = 0;
    std::vector<kvm_cpuid_entry2> cpuid_;
};

class Vcpu;

class Vm {
public:
    ~Vm();
    Vm(Vm&& o) noexcept;
    Vm& operator=(Vm&&) = delete;
    Vm(const Vm&) = delete;

    int fd() const noexcept { return fd_.get(); }
    bool memory_registered() const noexcept { return slots_ > 0; }
    size_t slot_count() const noexcept { return slots_; }

    /// Installs every region as a memory slot, numbered in map order.
    /// Throws AlreadyRegistered on a second call.
    void register_memory(const GuestMemoryMap& map);
    /// Throws DuplicateIndex.
    Vcpu create_vcpu(uint32_t index);

    void set_irq_line(uint32_t irq, bool level) const;
    /// Edge on an ISA line: raise then lower.
    void pulse_irq(uint32_t irq) const;

    static bool live() noexcept;

private:
    friend class Hypervisor;
    Vm(const Hypervisor& h, int fd);

    UniqueFd fd_;
    size_t mmap_size_ = 0;
    std::vector<kvm_cpuid_entry2> cpuid_;
    size_t slots_ = 0;
    std::set<uint32_t> vcpu_indices_;
    bool owns_live_flag_ = false;
};

struct LongModeSetup {
    GuestAddress entry;
    GuestAddress boot_params;
    GuestAddress page_table_root;
    GuestAddress stack;
    GuestAddress gdt;
    uint16_t gdt_limit = 0;
    GuestAddress idt;
};

class Vcpu {
public:
    ~Vcpu();
    Vcpu(Vcpu&& o) noexcept;
    Vcpu& operator=(Vcpu&&) = delete;
    Vcpu(const Vcpu&) = delete;

    uint32_t index() const noexcept { return index_; }
    int fd() const noexcept { return fd_.get(); }

    /// CPUID, MSRs, FPU, LAPIC, segment/control registers and the general
    /// registers for the 64-bit boot entry. Allowed from any thread until
    /// the first run() binds the vCPU to its thread.
    void configure_long_mode(const LongModeSetup& s);

    kvm_regs regs() const;
    kvm_sregs sregs() const;

    /// Enters the guest until the next exit. Returns nullopt when kicked
    /// (or interrupted by any signal). Throws WrongThread off the owner
    /// thread, HostRejected on host failure.
    std::optional<VmExit> run();

    /// Thread-safe. Makes the current or next run() return nullopt.
    void kick();

    bool bound() const noexcept { return bound_.load(); }

private:
    friend class Vm;
    Vcpu(int fd, uint32_t index, size_t mmap_size, const std::vector<kvm_cpuid_entry2>& cpuid);
    void check_configurable() const;

    UniqueFd fd_;
    uint32_t index_;
    kvm_run* run_ = nullptr;
    size_t mmap_size_;
    std::vector<kvm_cpuid_entry2> cpuid_;
    std::atomic<bool> bound_{false};
    pthread_t owner_{};
};

} // namespace kindling
