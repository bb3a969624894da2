#include "kindling/kvm.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/ioctl.h>
#include <sys/mman.h>

#include <cerrno>
#include <cstring>
#include <memory>

#include "kindling/error.hpp"

namespace kindling {

namespace {

std::atomic<bool> g_vm_live{false};

constexpr uint32_t MSR_IA32_SYSENTER_CS = 0x174;
constexpr uint32_t MSR_IA32_SYSENTER_ESP = 0x175;
constexpr uint32_t MSR_IA32_SYSENTER_EIP = 0x176;
constexpr uint32_t MSR_IA32_MISC_ENABLE = 0x1A0;
constexpr uint64_t MSR_IA32_MISC_ENABLE_FAST_STRING = 1;
constexpr uint32_t MSR_IA32_TSC = 0x10;
constexpr uint32_t MSR_STAR = 0xC0000081;
constexpr uint32_t MSR_LSTAR = 0xC0000082;
constexpr uint32_t MSR_CSTAR = 0xC0000083;
constexpr uint32_t MSR_SYSCALL_MASK = 0xC0000084;
constexpr uint32_t MSR_KERNEL_GS_BASE = 0xC0000102;

// Sent by Vcpu::kick to break a thread out of KVM_RUN.
const int kKickSignal = SIGRTMIN + 1;

void install_kick_handler() {
    static const bool done = [] {
        struct sigaction sa{};
        sa.sa_handler = [](int) {};
        sigemptyset(&sa.sa_mask);
        sa.sa_flags = 0; // no SA_RESTART: KVM_RUN must return EINTR
        sigaction(kKickSignal, &sa, nullptr);
        return true;
    }();
    (void)done;
}

int xioctl(int fd, unsigned long req, const void* arg, const char* what) {
    int r;
    do {
        r = ::ioctl(fd, req, arg);
    } while (r < 0 && errno == EINTR);
    if (r < 0)
        throw_errno(ErrorCode::HostRejected, what);
    return r;
}

int xioctl(int fd, unsigned long req, unsigned long arg, const char* what) {
    int r;
    do {
        r = ::ioctl(fd, req, arg);
    } while (r < 0 && errno == EINTR);
    if (r < 0)
        throw_errno(ErrorCode::HostRejected, what);
    return r;
}

kvm_segment to_kvm(uint64_t base, uint32_t limit, uint16_t selector, uint8_t type, bool code, bool long_mode) {
    kvm_segment s{};
    s.base = base;
    s.limit = limit;
    s.selector = selector;
    s.type = type;
    s.present = 1;
    s.dpl = 0;
    s.db = long_mode ? 0 : 1;
    s.s = 1;
    s.l = (code && long_mode) ? 1 : 0;
    s.g = 1;
    return s;
}

} // namespace

const char* to_string(ExitKind k) {
    switch (k) {
    case ExitKind::IoIn:
        return "io_in";
    case ExitKind::IoOut:
        return "io_out";
    case ExitKind::MmioRead:
        return "mmio_read";
    case ExitKind::MmioWrite:
        return "mmio_write";
    case ExitKind::Hlt:
        return "hlt";
    case ExitKind::Shutdown:
        return "shutdown";
    case ExitKind::Unsupported:
        return "unsupported";
    }
    return "?";
}

Hypervisor Hypervisor::open(const char* path) {
    Hypervisor h;
    h.fd_.reset(::open(path, O_RDWR | O_CLOEXEC));
    if (!h.fd_)
        throw_errno(ErrorCode::HypervisorUnavailable, std::string("open ") + path);
    h.api_version_ = ::ioctl(h.fd_.get(), KVM_GET_API_VERSION, 0);
    if (h.api_version_ != kKvmApiVersion)
        throw Error(ErrorCode::HypervisorUnavailable,
                    "unexpected KVM API version " + std::to_string(h.api_version_));
    const int size = ::ioctl(h.fd_.get(), KVM_GET_VCPU_MMAP_SIZE, 0);
    if (size <= 0)
        throw_errno(ErrorCode::HypervisorUnavailable, "KVM_GET_VCPU_MMAP_SIZE");
    h.mmap_size_ = static_cast<size_t>(size);

    constexpr size_t kMaxEntries = 256;
    std::vector<uint8_t> buf(sizeof(kvm_cpuid2) + kMaxEntries * sizeof(kvm_cpuid_entry2));
    auto* cpuid = reinterpret_cast<kvm_cpuid2*>(buf.data());
    cpuid->nent = kMaxEntries;
    xioctl(h.fd_.get(), KVM_GET_SUPPORTED_CPUID, cpuid, "KVM_GET_SUPPORTED_CPUID");
    h.cpuid_.assign(cpuid->entries, cpuid->entries + cpuid->nent);
    return h;
}

Vm Hypervisor::create_vm() const {
    bool expected = false;
    if (!g_vm_live.compare_exchange_strong(expected, true))
        throw Error(ErrorCode::VmAlreadyExists, "this process already runs a VM");
    int fd;
    do {
        fd = ::ioctl(fd_.get(), KVM_CREATE_VM, 0);
    } while (fd < 0 && errno == EINTR);
    if (fd < 0) {
        g_vm_live = false;
        throw_errno(ErrorCode::HostRejected, "KVM_CREATE_VM");
    }
    ::fcntl(fd, F_SETFD, FD_CLOEXEC);
    return Vm(*this, fd);
}

Vm::Vm(const Hypervisor& h, int fd)
    : fd_(fd), mmap_size_(h.vcpu_mmap_size()), cpuid_(h.supported_cpuid()), owns_live_flag_(true) {
    try {
        xioctl(fd_.get(), KVM_SET_TSS_ADDR, static_cast<unsigned long>(kTssAddress), "KVM_SET_TSS_ADDR");
        const uint64_t ident = kIdentityMapAddress;
        xioctl(fd_.get(), KVM_SET_IDENTITY_MAP_ADDR, &ident, "KVM_SET_IDENTITY_MAP_ADDR");
        xioctl(fd_.get(), KVM_CREATE_IRQCHIP, 0ul, "KVM_CREATE_IRQCHIP");
        kvm_pit_config pit{};
        pit.flags = KVM_PIT_SPEAKER_DUMMY;
        xioctl(fd_.get(), KVM_CREATE_PIT2, &pit, "KVM_CREATE_PIT2");
    } catch (...) {
        g_vm_live = false;
        owns_live_flag_ = false;
        throw;
    }
}

Vm::Vm(Vm&& o) noexcept
    : fd_(std::move(o.fd_)),
      mmap_size_(o.mmap_size_),
      cpuid_(std::move(o.cpuid_)),
      slots_(o.slots_),
      vcpu_indices_(std::move(o.vcpu_indices_)),
      owns_live_flag_(std::exchange(o.owns_live_flag_, false)) {}

Vm::~Vm() {
    fd_.reset();
    if (owns_live_flag_)
        g_vm_live = false;
}

bool Vm::live() noexcept { return g_vm_live.load(); }

void Vm::register_memory(const GuestMemoryMap& map) {
    if (slots_ > 0)
        throw Error(ErrorCode::AlreadyRegistered, "guest memory is already registered");
    uint32_t slot = 0;
    for (const auto& r : map.regions()) {
        kvm_userspace_memory_region m{};
        m.slot = slot++;
        m.guest_phys_addr = r.base().value;
        m.memory_size = r.size();
        m.userspace_addr = reinterpret_cast<uint64_t>(r.host());
        xioctl(fd_.get(), KVM_SET_USER_MEMORY_REGION, &m, "KVM_SET_USER_MEMORY_REGION");
    }
    slots_ = slot;
}

Vcpu Vm::create_vcpu(uint32_t index) {
    if (vcpu_indices_.count(index))
        throw Error(ErrorCode::DuplicateIndex, "vCPU " + std::to_string(index) + " already exists");
    const int fd = xioctl(fd_.get(), KVM_CREATE_VCPU, static_cast<unsigned long>(index), "KVM_CREATE_VCPU");
    ::fcntl(fd, F_SETFD, FD_CLOEXEC);
    vcpu_indices_.insert(index);
    return Vcpu(fd, index, mmap_size_, cpuid_);
}

void Vm::set_irq_line(uint32_t irq, bool level) const {
    kvm_irq_level l{};
    l.irq = irq;
    l.level = level ? 1 : 0;
    xioctl(fd_.get(), KVM_IRQ_LINE, &l, "KVM_IRQ_LINE");
}

void Vm::pulse_irq(uint32_t irq) const {
    set_irq_line(irq, true);
    set_irq_line(irq, false);
}

Vcpu::Vcpu(int fd, uint32_t index, size_t mmap_size, const std::vector<kvm_cpuid_entry2>& cpuid)
    : fd_(fd), index_(index), mmap_size_(mmap_size), cpuid_(cpuid) {
    void* p = ::mmap(nullptr, mmap_size_, PROT_READ | PROT_WRITE, MAP_SHARED, fd_.get(), 0);
    if (p == MAP_FAILED)
        throw_errno(ErrorCode::HostRejected, "mmap kvm_run");
    run_ = static_cast<kvm_run*>(p);
    install_kick_handler();
}

Vcpu::Vcpu(Vcpu&& o) noexcept
    : fd_(std::move(o.fd_)),
      index_(o.index_),
      run_(std::exchange(o.run_, nullptr)),
      mmap_size_(o.mmap_size_),
      cpuid_(std::move(o.cpuid_)),
      bound_(o.bound_.load()),
      owner_(o.owner_) {}

Vcpu::~Vcpu() {
    if (run_)
        ::munmap(run_, mmap_size_);
}

void Vcpu::check_configurable() const {
    if (bound_ && !pthread_equal(owner_, pthread_self()))
        throw Error(ErrorCode::WrongThread, "vCPU " + std::to_string(index_) + " belongs to another thread");
}

void Vcpu::configure_long_mode(const LongModeSetup& s) {
    check_configurable();

    // CPUID: the host's supported set, with this vCPU's APIC id.
    std::vector<uint8_t> buf(sizeof(kvm_cpuid2) + cpuid_.size() * sizeof(kvm_cpuid_entry2));
    auto* cpuid = reinterpret_cast<kvm_cpuid2*>(buf.data());
    cpuid->nent = static_cast<uint32_t>(cpuid_.size());
    for (size_t i = 0; i < cpuid_.size(); ++i) {
        kvm_cpuid_entry2 e = cpuid_[i];
        if (e.function == 1) {
            e.ebx = (e.ebx & 0x00FFFFFF) | (index_ << 24);
            e.ecx |= 1u << 31; // running under a hypervisor
        } else if (e.function == 0xB || e.function == 0x1F) {
            e.edx = index_;
        }
        cpuid->entries[i] = e;
    }
    xioctl(fd_.get(), KVM_SET_CPUID2, cpuid, "KVM_SET_CPUID2");

    // MSRs the kernel expects in a known state.
    constexpr uint32_t kMsrs[] = {MSR_IA32_SYSENTER_CS, MSR_IA32_SYSENTER_ESP, MSR_IA32_SYSENTER_EIP,
                                  MSR_STAR,             MSR_CSTAR,             MSR_KERNEL_GS_BASE,
                                  MSR_SYSCALL_MASK,     MSR_LSTAR,             MSR_IA32_TSC};
    constexpr size_t kCount = std::size(kMsrs) + 1;
    std::vector<uint8_t> mbuf(sizeof(kvm_msrs) + kCount * sizeof(kvm_msr_entry));
    auto* msrs = reinterpret_cast<kvm_msrs*>(mbuf.data());
    msrs->nmsrs = kCount;
    for (size_t i = 0; i < std::size(kMsrs); ++i)
        msrs->entries[i] = {kMsrs[i], 0, 0};
    msrs->entries[kCount - 1] = {MSR_IA32_MISC_ENABLE, 0, MSR_IA32_MISC_ENABLE_FAST_STRING};
    if (xioctl(fd_.get(), KVM_SET_MSRS, msrs, "KVM_SET_MSRS") != static_cast<int>(kCount))
        throw Error(ErrorCode::HostRejected, "KVM_SET_MSRS accepted only part of the list");

    kvm_fpu fpu{};
    fpu.fcw = 0x37F;
    fpu.mxcsr = 0x1F80;
    xioctl(fd_.get(), KVM_SET_FPU, &fpu, "KVM_SET_FPU");

    // LINT0 delivers the legacy PIC (ExtINT), LINT1 is NMI.
    kvm_lapic_state lapic{};
    xioctl(fd_.get(), KVM_GET_LAPIC, &lapic, "KVM_GET_LAPIC");
    auto set_lvt = [&](size_t off, uint32_t mode) {
        uint32_t v;
        std::memcpy(&v, lapic.regs + off, 4);
        v = (v & ~0x700u) | (mode << 8);
        std::memcpy(lapic.regs + off, &v, 4);
    };
    set_lvt(0x350, 0x7); // ExtINT
    set_lvt(0x360, 0x4); // NMI
    xioctl(fd_.get(), KVM_SET_LAPIC, &lapic, "KVM_SET_LAPIC");

    kvm_sregs sr{};
    xioctl(fd_.get(), KVM_GET_SREGS, &sr, "KVM_GET_SREGS");
    sr.cs = to_kvm(0, 0xFFFFF, 0x08, 0xB, true, true);
    const kvm_segment data = to_kvm(0, 0xFFFFF, 0x10, 0x3, false, true);
    sr.ds = sr.es = sr.fs = sr.gs = sr.ss = data;
    sr.tr = to_kvm(0, 0xFFFFF, 0x18, 0xB, false, true);
    sr.tr.s = 0;
    sr.gdt.base = s.gdt.value;
    sr.gdt.limit = s.gdt_limit;
    sr.idt.base = s.idt.value;
    sr.idt.limit = 0;
    sr.cr0 = 0x1 | 0x80000000;      // PE | PG
    sr.cr3 = s.page_table_root.value;
    sr.cr4 = 0x20;                  // PAE
    sr.efer = 0x100 | 0x400;        // LME | LMA
    xioctl(fd_.get(), KVM_SET_SREGS, &sr, "KVM_SET_SREGS");

    kvm_regs r{};
    r.rflags = 0x2;
    r.rip = s.entry.value;
    r.rsi = s.boot_params.value;
    r.rsp = s.stack.value;
    r.rbp = s.stack.value;
    xioctl(fd_.get(), KVM_SET_REGS, &r, "KVM_SET_REGS");
}

kvm_regs Vcpu::regs() const {
    kvm_regs r{};
    xioctl(fd_.get(), KVM_GET_REGS, &r, "KVM_GET_REGS");
    return r;
}

kvm_sregs Vcpu::sregs() const {
    kvm_sregs s{};
    xioctl(fd_.get(), KVM_GET_SREGS, &s, "KVM_GET_SREGS");
    return s;
}

std::optional<VmExit> Vcpu::run() {
    if (!bound_) {
        owner_ = pthread_self();
        bound_ = true;
    } else if (!pthread_equal(owner_, pthread_self())) {
        throw Error(ErrorCode::WrongThread, "vCPU " + std::to_string(index_) + " run from a foreign thread");
    }
    if (::ioctl(fd_.get(), KVM_RUN, 0) < 0) {
        if (errno == EINTR || errno == EAGAIN) {
            run_->immediate_exit = 0;
            return std::nullopt;
        }
        throw_errno(ErrorCode::HostRejected, "KVM_RUN");
    }
    VmExit e;
    e.reason = run_->exit_reason;
    auto* base = reinterpret_cast<uint8_t*>(run_);
    switch (run_->exit_reason) {
    case KVM_EXIT_IO:
        e.kind = run_->io.direction == KVM_EXIT_IO_OUT ? ExitKind::IoOut : ExitKind::IoIn;
        e.addr = run_->io.port;
        e.width = run_->io.size;
        e.count = run_->io.count;
        e.data = {base + run_->io.data_offset, static_cast<size_t>(run_->io.size) * run_->io.count};
        break;
    case KVM_EXIT_MMIO:
        e.kind = run_->mmio.is_write ? ExitKind::MmioWrite : ExitKind::MmioRead;
        e.addr = run_->mmio.phys_addr;
        e.width = run_->mmio.len;
        e.data = {run_->mmio.data, run_->mmio.len};
        break;
    case KVM_EXIT_HLT:
        e.kind = ExitKind::Hlt;
        break;
    case KVM_EXIT_SHUTDOWN:
    case KVM_EXIT_SYSTEM_EVENT:
        e.kind = ExitKind::Shutdown;
        break;
    case KVM_EXIT_INTR:
        run_->immediate_exit = 0;
        return std::nullopt;
    default:
        e.kind = ExitKind::Unsupported;
        break;
    }
    return e;
}

void Vcpu::kick() {
    if (run_)
        __atomic_store_n(&run_->immediate_exit, 1, __ATOMIC_SEQ_CST);
    if (bound_)
        pthread_kill(owner_, kKickSignal);
}

} // namespace kindling
