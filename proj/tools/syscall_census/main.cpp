// Runs a command under ptrace and counts the system calls its threads make
// after the seccomp install point (the first prctl(PR_GET_SECCOMP)).
//
//   kindling-syscall-census OUT.json -- command [args...]

#include <signal.h>
#include <sys/prctl.h>
#include <sys/ptrace.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "json.hpp"

int main(int argc, char** argv) {
    if (argc < 4 || std::string(argv[2]) != "--") {
        std::fprintf(stderr, "usage: %s OUT.json -- command [args...]\n", argv[0]);
        return 2;
    }
    const pid_t child = fork();
    if (child == 0) {
        ptrace(PTRACE_TRACEME, 0, nullptr, nullptr);
        raise(SIGSTOP);
        execvp(argv[3], argv + 3);
        _exit(127);
    }
    int st = 0;
    waitpid(child, &st, 0);
    ptrace(PTRACE_SETOPTIONS, child, nullptr,
           PTRACE_O_TRACESYSGOOD | PTRACE_O_TRACECLONE | PTRACE_O_TRACEFORK | PTRACE_O_TRACEVFORK |
               PTRACE_O_TRACEEXEC | PTRACE_O_EXITKILL);
    ptrace(PTRACE_SYSCALL, child, nullptr, nullptr);

    bool armed = false;
    std::map<long, uint64_t> counts;
    std::map<std::string, std::set<uint64_t>> args; // per-syscall argument values of interest
    int exit_status = -1;
    std::set<pid_t> live{child};

    while (!live.empty()) {
        const pid_t tid = waitpid(-1, &st, __WALL);
        if (tid < 0)
            break;
        if (WIFEXITED(st) || WIFSIGNALED(st)) {
            live.erase(tid);
            if (tid == child)
                exit_status = WIFEXITED(st) ? WEXITSTATUS(st) : 128 + WTERMSIG(st);
            continue;
        }
        live.insert(tid);
        int deliver = 0;
        const int sig = WSTOPSIG(st);
        if (sig == (SIGTRAP | 0x80)) {
            __ptrace_syscall_info info{};
            ptrace(PTRACE_GET_SYSCALL_INFO, tid, sizeof(info), &info);
            if (info.op == PTRACE_SYSCALL_INFO_ENTRY) {
                const long nr = static_cast<long>(info.entry.nr);
                const auto* a = info.entry.args;
                if (nr == SYS_prctl && a[0] == PR_GET_SECCOMP)
                    armed = true;
                if (armed) {
                    ++counts[nr];
                    if (nr == SYS_ioctl)
                        args["ioctl"].insert(a[1] & 0xFFFFFFFF);
                    else if (nr == SYS_socket)
                        args["socket"].insert(a[0]);
                    else if (nr == SYS_fcntl)
                        args["fcntl"].insert(a[1]);
                    else if (nr == SYS_tgkill)
                        args["tgkill"].insert(a[2]);
                    else if (nr == SYS_futex)
                        args["futex"].insert(a[1] & 0x7F);
                    else if (nr == SYS_mmap)
                        args["mmap_prot"].insert(a[2]);
                }
            }
        } else if (st >> 16) {
            // fork/clone/exec event stop
        } else if (sig != SIGSTOP && sig != SIGTRAP) {
            deliver = sig;
        }
        ptrace(PTRACE_SYSCALL, tid, nullptr, reinterpret_cast<void*>(static_cast<long>(deliver)));
    }

    nlohmann::json out;
    out["exit_status"] = exit_status;
    out["armed"] = armed;
    for (const auto& [nr, n] : counts)
        out["syscalls"][std::to_string(nr)] = n;
    for (const auto& [k, v] : args)
        out["args"][k] = v;
    std::ofstream(argv[1]) << out.dump(2) << "\n";
    return exit_status == 0 ? 0 : 1;
}
