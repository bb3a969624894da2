#include "kindling/jailer/jail.hpp"

#include <fcntl.h>
#include <grp.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <unistd.h>

#include <chrono>
#include <fstream>
#include <cstring>
#include <regex>
#include <set>

#include "json.hpp"
#include "kindling/error.hpp"

namespace fs = std::filesystem;

namespace kindling::jail {

namespace {

struct DeviceNode {
    const char* path; // relative to the jail root
    unsigned major;
    unsigned minor;
};

constexpr DeviceNode kDeviceNodes[] = {
    {"dev/kvm", 10, 232},
    {"dev/net/tun", 10, 200},
};

bool under(const fs::path& root, const fs::path& p) {
    auto r = root.begin();
    auto q = p.begin();
    for (; r != root.end(); ++r, ++q)
        if (q == p.end() || *r != *q)
            return false;
    return true;
}

void write_file(const fs::path& p, const std::string& value) {
    std::ofstream out(p);
    out << value;
    out.flush();
    if (!out)
        throw Error(ErrorCode::CgroupUnsupported, "cannot write " + p.string());
}

} // namespace

CgroupSetting parse_cgroup_setting(const std::string& text) {
    static const std::regex shape(R"(([a-z]+(\.[a-z_]+)+)=(.+))");
    std::smatch m;
    if (!std::regex_match(text, m, shape))
        throw Error(ErrorCode::InvalidJailConfig, "cgroup setting must look like memory.max=VALUE: " + text);
    return {m[1], m[3]};
}

void validate(const JailConfig& cfg) {
    static const std::regex id_shape("[A-Za-z0-9-]{1,64}");
    if (cfg.uid == 0 || cfg.gid == 0)
        throw Error(ErrorCode::InvalidJailConfig, "uid and gid must be nonzero");
    if (cfg.seccomp_level < 0 || cfg.seccomp_level > 2)
        throw Error(ErrorCode::InvalidJailConfig, "seccomp level must be 0, 1 or 2");
    if (!std::regex_match(cfg.id, id_shape))
        throw Error(ErrorCode::InvalidJailConfig, "id must match [A-Za-z0-9-]{1,64}");
    if (!fs::is_regular_file(cfg.exec_file))
        throw Error(ErrorCode::InvalidJailConfig, "exec file " + cfg.exec_file + " is not a regular file");
    if (cfg.chroot_base.empty() || !cfg.chroot_base.is_absolute())
        throw Error(ErrorCode::InvalidJailConfig, "chroot base must be an absolute path");
}

fs::path jail_root(const JailConfig& cfg) {
    return cfg.chroot_base / fs::path(cfg.exec_file).filename() / cfg.id / "root";
}

AuditLog::AuditLog(const fs::path& path)
    : fd_(::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0600)) {
    if (!fd_)
        throw_errno(ErrorCode::InvalidJailConfig, "audit log " + path.string());
}

void AuditLog::record(const std::string& step, const std::string& detail) {
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(
                        std::chrono::system_clock::now().time_since_epoch())
                        .count();
    const std::string line = nlohmann::json{{"ts_us", us}, {"step", step}, {"detail", detail}}.dump() + "\n";
    if (::write(fd_.get(), line.data(), line.size()) < 0) {
        // Losing an audit line is not worth aborting the launch over.
    }
}

void check_inside(const fs::path& root, const fs::path& path) {
    const fs::path r = fs::weakly_canonical(root);
    const fs::path p = fs::weakly_canonical(path);
    if (!under(r, p))
        throw Error(ErrorCode::PathOutsideRoot, path.string() + " resolves to " + p.string() + ", outside " + r.string());
}

void scan_for_escapes(const fs::path& root) {
    const fs::path r = fs::weakly_canonical(root);
    for (auto it = fs::recursive_directory_iterator(r, fs::directory_options::none); it != fs::recursive_directory_iterator();
         ++it) {
        if (!it->is_symlink())
            continue;
        const fs::path target = fs::read_symlink(it->path());
        if (target.is_absolute())
            throw Error(ErrorCode::PathOutsideRoot, it->path().string() + " points at absolute " + target.string());
        check_inside(r, it->path().parent_path() / target);
    }
}

fs::path setup_cgroup(const JailConfig& cfg, pid_t pid, AuditLog& audit) {
    if (!fs::exists(cfg.cgroup_root / "cgroup.controllers"))
        throw Error(ErrorCode::CgroupUnsupported,
                    cfg.cgroup_root.string() + " is not a cgroup v2 hierarchy (no cgroup.controllers)");
    const fs::path parent = cfg.cgroup_root / "kindling";
    const fs::path dir = parent / cfg.id;
    fs::create_directories(dir);
    std::set<std::string> controllers;
    for (const auto& s : cfg.cgroups)
        controllers.insert(s.file.substr(0, s.file.find('.')));
    for (const auto& c : controllers) {
        // Delegate the controller down to the instance.
        write_file(cfg.cgroup_root / "cgroup.subtree_control", "+" + c);
        write_file(parent / "cgroup.subtree_control", "+" + c);
    }
    for (const auto& s : cfg.cgroups) {
        check_inside(dir, dir / s.file);
        write_file(dir / s.file, s.value);
        audit.record("cgroup", (dir / s.file).string() + "=" + s.value);
    }
    write_file(dir / "cgroup.procs", std::to_string(pid));
    audit.record("cgroup", "pid " + std::to_string(pid) + " -> " + dir.string());
    return dir;
}

PreparedJail build_jail(const JailConfig& cfg, AuditLog& audit) {
    validate(cfg);
    if (::geteuid() != 0)
        throw Error(ErrorCode::InsufficientPrivilege, "the jailer must run as root");

    const fs::path root = jail_root(cfg);
    fs::create_directories(root);
    check_inside(cfg.chroot_base, root);
    scan_for_escapes(root);
    audit.record("jail_root", root.string());

    if (!cfg.cgroups.empty())
        setup_cgroup(cfg, ::getpid(), audit);
    else
        audit.record("cgroup", "no limits requested; skipped");

    const std::string name = fs::path(cfg.exec_file).filename();
    const fs::path dest = root / name;
    check_inside(root, dest);
    fs::copy_file(cfg.exec_file, dest, fs::copy_options::overwrite_existing);
    fs::permissions(dest, fs::perms(0755));
    audit.record("copy", cfg.exec_file + " -> " + dest.string());

    for (const auto& d : kDeviceNodes) {
        const fs::path p = root / d.path;
        check_inside(root, p.parent_path());
        fs::create_directories(p.parent_path());
        check_inside(root, p);
        fs::remove(p);
        if (::mknod(p.c_str(), S_IFCHR | 0660, makedev(d.major, d.minor)) != 0)
            throw_errno(ErrorCode::InsufficientPrivilege, "mknod " + p.string());
        if (::chown(p.c_str(), cfg.uid, cfg.gid) != 0)
            throw_errno(ErrorCode::InsufficientPrivilege, "chown " + p.string());
        audit.record("mknod", p.string());
    }
    if (::chown(root.c_str(), cfg.uid, cfg.gid) != 0)
        throw_errno(ErrorCode::InsufficientPrivilege, "chown " + root.string());

    if (cfg.seccomp_level == 0)
        audit.record("seccomp", "level 0: no filter will be installed");
    else
        audit.record("seccomp", "level " + std::to_string(cfg.seccomp_level) +
                                    ": installed by the monitor before its first vCPU runs");

    if (::chdir(root.c_str()) != 0 || ::chroot(".") != 0 || ::chdir("/") != 0)
        throw_errno(ErrorCode::InsufficientPrivilege, "chroot " + root.string());
    audit.record("chroot", root.string());
    return {root, "/" + name};
}

void drop_and_exec(const JailConfig& cfg, const PreparedJail& jail, AuditLog& audit) {
    if (::setgroups(0, nullptr) != 0)
        throw_errno(ErrorCode::InsufficientPrivilege, "setgroups");
    if (::setgid(cfg.gid) != 0)
        throw_errno(ErrorCode::InsufficientPrivilege, "setgid");
    if (::setuid(cfg.uid) != 0)
        throw_errno(ErrorCode::InsufficientPrivilege, "setuid");
    if (::getuid() == 0 || ::geteuid() == 0 || ::getegid() == 0)
        throw Error(ErrorCode::InsufficientPrivilege, "still root after dropping privileges");
    audit.record("drop", "uid " + std::to_string(cfg.uid) + " gid " + std::to_string(cfg.gid));

    std::vector<std::string> args = {jail.exec_path, "--id", cfg.id, "--seccomp-level",
                                     std::to_string(cfg.seccomp_level)};
    args.insert(args.end(), cfg.exec_args.begin(), cfg.exec_args.end());
    std::vector<char*> argv;
    for (auto& a : args)
        argv.push_back(a.data());
    argv.push_back(nullptr);
    audit.record("exec", jail.exec_path);
    ::execv(jail.exec_path.c_str(), argv.data());
    const int err = errno;
    audit.record("exec_failed", std::strerror(err));
    errno = err;
    throw_errno(ErrorCode::ExecFailed, "execv " + jail.exec_path);
}

} // namespace kindling::jail
