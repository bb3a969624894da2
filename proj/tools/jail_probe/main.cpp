// Stand-in for the monitor inside a jail. Reports what it can reach, checks
// that a seccomp violation kills a forked child, prints one JSON line, then
// waits for stdin to close so the parent can inspect it from /proc.
//
//   kindling-jail-probe --id ID --seccomp-level N --outside PATH --forbidden NR

#include <fcntl.h>
#include <signal.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kindling/jailer/seccomp.hpp"

namespace {

// Status of a child that installs the policy and then makes syscall nr.
int run_child(int level, long nr) {
    const pid_t pid = fork();
    if (pid == 0) {
        kindling::jail::install_seccomp(kindling::jail::policy_for_level(level));
        syscall(nr, 0, 0, 0);
        _exit(0);
    }
    int st = 0;
    waitpid(pid, &st, 0);
    return st;
}

} // namespace

int main(int argc, char** argv) {
    std::string id, outside;
    int level = 2;
    long forbidden = SYS_uname;
    CLI::App app{"jail probe"};
    app.add_option("--id", id);
    app.add_option("--seccomp-level", level);
    app.add_option("--outside", outside);
    app.add_option("--forbidden", forbidden);
    CLI11_PARSE(app, argc, argv);

    nlohmann::json r;
    r["id"] = id;
    r["uid"] = getuid();
    r["euid"] = geteuid();
    r["gid"] = getgid();
    r["groups"] = getgroups(0, nullptr);
    const int fd = open(outside.c_str(), O_RDONLY);
    r["outside_open_errno"] = fd < 0 ? errno : 0;
    r["self_at_root"] = access(argv[0], X_OK) == 0 && argv[0][0] == '/' && std::string(argv[0]).rfind('/') == 0;
    r["kvm_node"] = access("/dev/kvm", F_OK) == 0;

    const int denied = run_child(level, forbidden);
    r["forbidden_signal"] = WIFSIGNALED(denied) ? WTERMSIG(denied) : 0;
    const int allowed = run_child(level, SYS_getpid);
    r["allowed_exit"] = WIFEXITED(allowed) ? WEXITSTATUS(allowed) : -WTERMSIG(allowed);

    std::printf("%s\n", r.dump().c_str());
    std::fflush(stdout);
    char buf[64];
    while (read(STDIN_FILENO, buf, sizeof(buf)) > 0) {
    }
    return 0;
}
