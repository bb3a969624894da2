#include "kindling/vmm_action.hpp"

#include <algorithm>
#include <set>

#include "kindling/error.hpp"

namespace kindling {

using nlohmann::json;

namespace {

[[noreturn]] void violation(const std::string& what) { throw Error(ErrorCode::SchemaViolation, what); }

// Rejects non-objects and fields outside the schema.
void expect_object(const json& j, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object())
        violation("body must be a JSON object");
    for (auto& [key, value] : j.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            violation("unknown field: " + key);
}

const json& field(const json& j, const char* name) {
    auto it = j.find(name);
    if (it == j.end())
        violation(std::string("missing field: ") + name);
    return *it;
}

std::string str(const json& j, const char* name) {
    const json& v = field(j, name);
    if (!v.is_string())
        violation(std::string(name) + " must be a string");
    return v.get<std::string>();
}

std::optional<std::string> opt_str(const json& j, const char* name) {
    if (!j.contains(name) || j.at(name).is_null())
        return std::nullopt;
    return str(j, name);
}

uint64_t uint(const json& j, const char* name) {
    const json& v = field(j, name);
    // Parsed text yields unsigned for non-negative literals; built values may be signed.
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<int64_t>() >= 0))
        violation(std::string(name) + " must be a non-negative integer");
    return v.get<uint64_t>();
}

bool boolean(const json& j, const char* name) {
    const json& v = field(j, name);
    if (!v.is_boolean())
        violation(std::string(name) + " must be a boolean");
    return v.get<bool>();
}

} // namespace

std::string_view action_name(const VmmAction& action) {
    static constexpr std::string_view names[] = {"ConfigureMachine", "SetBootSource", "AttachDrive",
                                                 "AttachNet",        "SetVsock",      "InstanceStart",
                                                 "SendCtrlAltDel",   "FlushMetrics"};
    return names[action.index()];
}

bool is_configuration(const VmmAction& action) { return action.index() <= 4; }

MachineConfig parse_machine_config(const json& j) {
    expect_object(j, {"vcpu_count", "mem_size_mib"});
    MachineConfig c;
    const uint64_t vcpus = uint(j, "vcpu_count");
    if (vcpus < 1 || vcpus > 32)
        violation("vcpu_count must be in [1, 32]");
    c.vcpu_count = static_cast<uint32_t>(vcpus);
    c.mem_size_mib = uint(j, "mem_size_mib");
    if (c.mem_size_mib < 16 || c.mem_size_mib > 256 * 1024)
        violation("mem_size_mib must be in [16, 262144]");
    return c;
}

BootSource parse_boot_source(const json& j) {
    expect_object(j, {"kernel_image_path", "boot_args", "initrd_path"});
    BootSource b;
    b.kernel_image_path = str(j, "kernel_image_path");
    if (b.kernel_image_path.empty())
        violation("kernel_image_path must not be empty");
    b.boot_args = j.contains("boot_args") ? str(j, "boot_args") : std::string{};
    b.initrd_path = opt_str(j, "initrd_path");
    return b;
}

DriveConfig parse_drive(const json& j) {
    expect_object(j, {"drive_id", "path_on_host", "is_read_only", "is_root_device"});
    DriveConfig d;
    d.drive_id = str(j, "drive_id");
    d.path_on_host = str(j, "path_on_host");
    d.is_read_only = boolean(j, "is_read_only");
    d.is_root_device = boolean(j, "is_root_device");
    if (d.drive_id.empty())
        violation("drive_id must not be empty");
    return d;
}

NetConfig parse_net(const json& j) {
    expect_object(j, {"iface_id", "tap_name", "mac"});
    NetConfig n;
    n.iface_id = str(j, "iface_id");
    n.tap_name = str(j, "tap_name");
    n.mac = opt_str(j, "mac");
    if (n.iface_id.empty() || n.tap_name.empty())
        violation("iface_id and tap_name must not be empty");
    if (n.mac) {
        const std::string& m = *n.mac;
        bool good = m.size() == 17;
        for (size_t i = 0; good && i < m.size(); ++i)
            good = (i % 3 == 2) ? m[i] == ':' : std::isxdigit(static_cast<unsigned char>(m[i])) != 0;
        if (!good)
            violation("mac must look like aa:bb:cc:dd:ee:ff");
    }
    return n;
}

VsockConfig parse_vsock(const json& j) {
    expect_object(j, {"guest_cid", "uds_path"});
    VsockConfig v;
    v.guest_cid = uint(j, "guest_cid");
    v.uds_path = str(j, "uds_path");
    if (v.guest_cid < 3 || v.guest_cid > 0xFFFFFFFFull)
        violation("guest_cid must be in [3, 2^32)");
    if (v.uds_path.empty())
        violation("uds_path must not be empty");
    return v;
}

VmmAction parse_action_type(const json& j) {
    expect_object(j, {"action_type"});
    const std::string t = str(j, "action_type");
    if (t == "InstanceStart")
        return InstanceStart{};
    if (t == "SendCtrlAltDel")
        return SendCtrlAltDel{};
    if (t == "FlushMetrics")
        return FlushMetrics{};
    violation("unknown action_type: " + t);
}

json to_json(const MachineConfig& c) { return {{"vcpu_count", c.vcpu_count}, {"mem_size_mib", c.mem_size_mib}}; }

json to_json(const BootSource& c) {
    json j = {{"kernel_image_path", c.kernel_image_path}, {"boot_args", c.boot_args}};
    if (c.initrd_path)
        j["initrd_path"] = *c.initrd_path;
    return j;
}

json to_json(const DriveConfig& c) {
    return {{"drive_id", c.drive_id},
            {"path_on_host", c.path_on_host},
            {"is_read_only", c.is_read_only},
            {"is_root_device", c.is_root_device}};
}

json to_json(const NetConfig& c) {
    json j = {{"iface_id", c.iface_id}, {"tap_name", c.tap_name}};
    if (c.mac)
        j["mac"] = *c.mac;
    return j;
}

json to_json(const VsockConfig& c) { return {{"guest_cid", c.guest_cid}, {"uds_path", c.uds_path}}; }

std::string_view to_string(InstanceState s) {
    switch (s) {
    case InstanceState::Uninitialized:
        return "Uninitialized";
    case InstanceState::Configured:
        return "Configured";
    case InstanceState::Running:
        return "Running";
    case InstanceState::Shutdown:
        return "Shutdown";
    }
    return "?";
}

ActionResult ActionResult::fault(int status, std::string_view message) {
    return {status, json{{"fault_message", message}}.dump()};
}

Decision decide(InstanceState state, const MachineDescription& desc, const VmmAction& action) {
    const bool started = state == InstanceState::Running || state == InstanceState::Shutdown;
    auto conflict = [&] {
        return Decision{ActionResult::fault(409, std::string(action_name(action)) + " is not allowed in state " +
                                                     std::string(to_string(state))),
                        state};
    };
    auto bad = [&](std::string_view why) { return Decision{ActionResult::fault(400, why), state}; };

    if (is_configuration(action)) {
        if (started)
            return conflict();
        if (auto* d = std::get_if<DriveConfig>(&action); d && d->is_root_device) {
            for (const auto& other : desc.drives)
                if (other.is_root_device && other.drive_id != d->drive_id)
                    return bad("a root device is already configured: " + other.drive_id);
        }
        return {ActionResult::no_content(), InstanceState::Configured};
    }
    if (std::holds_alternative<InstanceStart>(action)) {
        if (started)
            return conflict();
        if (!desc.boot)
            return bad("InstanceStart requires a boot source");
        if (!desc.machine)
            return bad("InstanceStart requires a machine configuration");
        return {ActionResult::no_content(), InstanceState::Running};
    }
    if (std::holds_alternative<SendCtrlAltDel>(action)) {
        if (state != InstanceState::Running)
            return conflict();
        return {ActionResult::no_content(), state};
    }
    return {ActionResult::no_content(), state}; // FlushMetrics
}

void apply_action(MachineDescription& desc, const VmmAction& action) {
    std::visit(
        [&](const auto& a) {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, MachineConfig>) {
                desc.machine = a;
            } else if constexpr (std::is_same_v<T, BootSource>) {
                desc.boot = a;
            } else if constexpr (std::is_same_v<T, DriveConfig>) {
                auto it = std::find_if(desc.drives.begin(), desc.drives.end(),
                                       [&](const DriveConfig& d) { return d.drive_id == a.drive_id; });
                if (it != desc.drives.end())
                    *it = a;
                else
                    desc.drives.push_back(a);
            } else if constexpr (std::is_same_v<T, NetConfig>) {
                auto it = std::find_if(desc.nets.begin(), desc.nets.end(),
                                       [&](const NetConfig& n) { return n.iface_id == a.iface_id; });
                if (it != desc.nets.end())
                    *it = a;
                else
                    desc.nets.push_back(a);
            } else if constexpr (std::is_same_v<T, VsockConfig>) {
                desc.vsock = a;
            }
        },
        action);
}

} // namespace kindling
