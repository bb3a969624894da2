#include <linux/kvm.h>
#include <sched.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/socket.h>
#include <sys/syscall.h>

#include "kindling/error.hpp"
#include "kindling/jailer/seccomp.hpp"

namespace kindling::jail {

namespace {

// Syscalls the monitor makes once the filter is in place: the set recorded by
// kindling-syscall-census over boot, API traffic, metrics and ctrl-alt-del,
// plus device I/O the synthetic guest never drives (block, vsock).
constexpr long kObserved[] = {
    SYS_accept4,  SYS_clone3,      SYS_close,        SYS_epoll_ctl, SYS_epoll_wait,     SYS_exit,
    SYS_exit_group, SYS_fdatasync, SYS_futex,        SYS_getpid,    SYS_ioctl,          SYS_madvise,
    SYS_mmap,     SYS_mprotect,    SYS_munmap,       SYS_openat,    SYS_prctl,          SYS_read,
    SYS_recvfrom, SYS_rseq,        SYS_rt_sigprocmask, SYS_rt_sigreturn, SYS_sendto,    SYS_set_robust_list,
    SYS_tgkill,   SYS_unlink,      SYS_write,
};
constexpr long kDeviceIo[] = {
    SYS_pread64, SYS_pwrite64, SYS_socket, SYS_connect, SYS_shutdown,
};
// The allocator and the thread library may need these on paths the census
// run did not hit. glibc installs its internal thread signal handlers on the
// first pthread_create, which is the first vCPU thread when the API is off.
constexpr long kRuntime[] = {SYS_brk, SYS_mremap, SYS_clone, SYS_restart_syscall, SYS_rt_sigaction};

// glibc's SIGCANCEL and SIGSETXID, below the SIGRTMIN it exposes.
constexpr uint32_t kLibcCancelSignal = 32;
constexpr uint32_t kLibcSetxidSignal = 33;

constexpr uint32_t kThreadCloneFlags = CLONE_VM | CLONE_FS | CLONE_FILES | CLONE_SIGHAND | CLONE_THREAD |
                                       CLONE_SYSVSEM | CLONE_SETTLS | CLONE_PARENT_SETTID | CLONE_CHILD_CLEARTID;

std::vector<SyscallRule> level1() {
    std::vector<SyscallRule> rules;
    for (long nr : kObserved)
        rules.push_back({nr, std::nullopt});
    for (long nr : kDeviceIo)
        rules.push_back({nr, std::nullopt});
    for (long nr : kRuntime)
        rules.push_back({nr, std::nullopt});
    return rules;
}

std::vector<SyscallRule> level2() {
    std::vector<SyscallRule> rules = level1();
    const auto constrain = [&](long nr, ArgPredicate p) {
        for (auto& r : rules)
            if (r.nr == nr)
                r.predicate = std::move(p);
    };
    constrain(SYS_ioctl, {1, {KVM_RUN, KVM_IRQ_LINE}});
    constrain(SYS_socket, {0, {AF_UNIX}});
    constrain(SYS_accept4, {3, {SOCK_NONBLOCK | SOCK_CLOEXEC}});
    constrain(SYS_tgkill, {2, {static_cast<uint32_t>(SIGRTMIN + 1), SIGABRT}});
    constrain(SYS_clone, {0, {kThreadCloneFlags}});
    constrain(SYS_prctl, {0, {PR_GET_SECCOMP}});
    constrain(SYS_rt_sigaction, {0, {kLibcCancelSignal, kLibcSetxidSignal, SIGABRT}});
    // Nothing after boot needs these.
    std::erase_if(rules, [](const SyscallRule& r) { return r.nr == SYS_restart_syscall; });
    return rules;
}

} // namespace

SeccompPolicy policy_for_level(int level) {
    switch (level) {
    case 0:
        return {0, {}};
    case 1:
        return {1, level1()};
    case 2:
        return {2, level2()};
    default:
        throw Error(ErrorCode::InvalidJailConfig, "seccomp level must be 0, 1 or 2");
    }
}

} // namespace kindling::jail
