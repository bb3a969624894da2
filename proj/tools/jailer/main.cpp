// kindling-jailer: confines and launches the monitor.
//
//   kindling-jailer --exec-file PATH --uid N --gid N --id ID [options] [-- monitor args...]

#include <unistd.h>

#include <cstdio>

#include "CLI11.hpp"
#include "kindling/error.hpp"
#include "kindling/jailer/jail.hpp"

using namespace kindling;

int main(int argc, char** argv) {
    jail::JailConfig cfg;
    std::vector<std::string> cgroups;
    std::string chroot_base = cfg.chroot_base, cgroup_root = cfg.cgroup_root, audit_log;

    CLI::App app{"kindling-jailer: prepares a chroot and cgroup, drops privileges, execs the monitor"};
    app.add_option("--exec-file", cfg.exec_file, "Monitor binary to copy into the jail and exec")->required();
    app.add_option("--chroot-base", chroot_base, "Directory holding per-instance jails")->capture_default_str();
    app.add_option("--uid", cfg.uid, "User id to run the monitor as (nonzero)")->required();
    app.add_option("--gid", cfg.gid, "Group id to run the monitor as (nonzero)")->required();
    app.add_option("--id", cfg.id, "Instance id, [A-Za-z0-9-]{1,64}")->required();
    app.add_option("--seccomp-level", cfg.seccomp_level, "Passed to the monitor: 0, 1 or 2")
        ->capture_default_str()
        ->check(CLI::Range(0, 2));
    app.add_option("--cgroup", cgroups, "cgroup v2 setting FILE=VALUE, repeatable (e.g. memory.max=268435456)");
    app.add_option("--cgroup-root", cgroup_root, "Mount point of the cgroup v2 hierarchy")->capture_default_str();
    app.add_option("--audit-log", audit_log, "Audit log path (default: next to the jail root)");
    app.add_option("monitor-args", cfg.exec_args, "Arguments for the monitor, after --");
    app.allow_extras(false);
    CLI11_PARSE(app, argc, argv);

    try {
        cfg.chroot_base = chroot_base;
        cfg.cgroup_root = cgroup_root;
        for (const auto& c : cgroups)
            cfg.cgroups.push_back(jail::parse_cgroup_setting(c));
        jail::validate(cfg);
        const auto root = jail::jail_root(cfg);
        std::filesystem::create_directories(root.parent_path());
        jail::AuditLog audit(audit_log.empty() ? root.parent_path() / "audit.log" : std::filesystem::path(audit_log));
        audit.record("start", "instance " + cfg.id + " exec " + cfg.exec_file);
        const auto prepared = jail::build_jail(cfg, audit);
        jail::drop_and_exec(cfg, prepared, audit);
    } catch (const Error& e) {
        std::fprintf(stderr, "kindling-jailer: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "kindling-jailer: %s\n", e.what());
        return 1;
    }
}
