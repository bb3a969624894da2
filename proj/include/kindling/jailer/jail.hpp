#pragma once

#include <sys/types.h>

#include <filesystem>
#include <string>
#include <vector>

#include "kindling/fd.hpp"

namespace kindling::jail {

/// One "<file>=<value>" write into the instance's cgroup, e.g.
/// memory.max=268435456.
struct CgroupSetting {
    std::string file;
    std::string value;
    bool operator==(const CgroupSetting&) const = default;
};

/// Throws InvalidJailConfig.
CgroupSetting parse_cgroup_setting(const std::string& text);

struct JailConfig {
    std::string exec_file;
    std::filesystem::path chroot_base = "/srv/kindling";
    uid_t uid = 0;
    gid_t gid = 0;
    std::string id;
    int seccomp_level = 2;
    std::vector<CgroupSetting> cgroups;
    std::filesystem::path cgroup_root = "/sys/fs/cgroup";
    std::filesystem::path audit_log; // empty: next to the jail root
    std::vector<std::string> exec_args; // passed through to the monitor
};

/// Throws InvalidJailConfig: root ids, bad level, an id that is not
/// [A-Za-z0-9-]{1,64}, a missing exec file.
void validate(const JailConfig& cfg);

/// <chroot_base>/<exec file name>/<id>/root
std::filesystem::path jail_root(const JailConfig& cfg);

/// Line-delimited JSON record of each privileged step.
class AuditLog {
public:
    explicit AuditLog(const std::filesystem::path& path);
    void record(const std::string& step, const std::string& detail);

private:
    UniqueFd fd_;
};

/// Throws PathOutsideRoot if `path`, resolved on the host, is not under root.
void check_inside(const std::filesystem::path& root, const std::filesystem::path& path);

/// Throws PathOutsideRoot for any symlink under root that resolves outside
/// it. Absolute targets count as escaping: the jailer resolves them on the
/// host before the chroot.
void scan_for_escapes(const std::filesystem::path& root);

/// Creates <cgroup_root>/kindling/<id>, writes the settings and moves pid in.
/// Throws CgroupUnsupported unless cgroup_root is a v2 hierarchy.
std::filesystem::path setup_cgroup(const JailConfig& cfg, pid_t pid, AuditLog& audit);

struct PreparedJail {
    std::filesystem::path root;       // host view
    std::string exec_path;            // inside the jail
};

/// cgroup, jail directory with the monitor binary and device nodes, then
/// chroot into it. Throws InsufficientPrivilege, PathOutsideRoot,
/// CgroupUnsupported, InvalidJailConfig.
PreparedJail build_jail(const JailConfig& cfg, AuditLog& audit);

/// Clears supplementary groups, sets gid then uid, and execs the monitor.
/// Returns only by throwing (ExecFailed, InsufficientPrivilege).
[[noreturn]] void drop_and_exec(const JailConfig& cfg, const PreparedJail& jail, AuditLog& audit);

} // namespace kindling::jail
