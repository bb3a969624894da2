#include "kindling/jailer/seccomp.hpp"

#include <linux/audit.h>
#include <linux/seccomp.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cstddef>
#include <string>

#include "kindling/error.hpp"

namespace kindling::jail {

std::set<long> SeccompPolicy::syscalls() const {
    std::set<long> out;
    for (const auto& r : rules)
        out.insert(r.nr);
    return out;
}

std::vector<sock_filter> compile(const SeccompPolicy& policy) {
    std::vector<sock_filter> f;
    auto stmt = [&](uint16_t code, uint32_t k) { f.push_back(BPF_STMT(code, k)); };
    auto jump = [&](uint32_t k, uint8_t jt, uint8_t jf) { f.push_back(BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K, k, jt, jf)); };

    stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, arch));
    jump(AUDIT_ARCH_X86_64, 1, 0);
    stmt(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS);
    stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, nr));

    std::set<long> seen;
    for (const auto& r : policy.rules) {
        if (!seen.insert(r.nr).second)
            throw Error(ErrorCode::FilterRejected, "syscall " + std::to_string(r.nr) + " listed twice");
        if (!r.predicate) {
            jump(static_cast<uint32_t>(r.nr), 0, 1);
            stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW);
            continue;
        }
        const auto& p = *r.predicate;
        const size_t k = p.allowed.size();
        if (k == 0 || k > 250 || p.index > 5)
            throw Error(ErrorCode::FilterRejected, "bad predicate for syscall " + std::to_string(r.nr));
        // [ld arg][k compares][ret kill][ret allow]; a miss skips the block.
        jump(static_cast<uint32_t>(r.nr), 0, static_cast<uint8_t>(k + 3));
        stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, args) + 8 * p.index); // low half on x86-64
        for (size_t i = 0; i < k; ++i)
            jump(p.allowed[i], static_cast<uint8_t>(k - i), 0);
        stmt(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS);
        stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW);
        // The accumulator now holds an argument; reload the number.
        stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, nr));
    }
    stmt(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS);
    return f;
}

void install_seccomp(const SeccompPolicy& policy) {
    // Also the marker the syscall census keys on.
    ::prctl(PR_GET_SECCOMP, 0, 0, 0, 0);
    if (policy.level == 0)
        return;
    auto filter = compile(policy);
    sock_fprog prog{static_cast<unsigned short>(filter.size()), filter.data()};
    if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0)
        throw_errno(ErrorCode::FilterRejected, "PR_SET_NO_NEW_PRIVS");
    const long r = ::syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, SECCOMP_FILTER_FLAG_TSYNC, &prog);
    if (r < 0)
        throw_errno(ErrorCode::FilterRejected, "seccomp");
    if (r > 0)
        throw Error(ErrorCode::FilterRejected, "thread " + std::to_string(r) + " could not be synchronized");
}

} // namespace kindling::jail
