#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "json.hpp"

namespace kindling {

struct MachineConfig {
    uint32_t vcpu_count = 1;
    uint64_t mem_size_mib = 0;
    bool operator==(const MachineConfig&) const = default;
};

struct BootSource {
    std::string kernel_image_path;
    std::string boot_args;
    std::optional<std::string> initrd_path;
    bool operator==(const BootSource&) const = default;
};

struct DriveConfig {
    std::string drive_id;
    std::string path_on_host;
    bool is_read_only = false;
    bool is_root_device = false;
    bool operator==(const DriveConfig&) const = default;
};

struct NetConfig {
    std::string iface_id;
    std::string tap_name;
    std::optional<std::string> mac;
    bool operator==(const NetConfig&) const = default;
};

struct VsockConfig {
    uint64_t guest_cid = 0;
    std::string uds_path;
    bool operator==(const VsockConfig&) const = default;
};

struct InstanceStart {
    bool operator==(const InstanceStart&) const = default;
};
struct SendCtrlAltDel {
    bool operator==(const SendCtrlAltDel&) const = default;
};
struct FlushMetrics {
    bool operator==(const FlushMetrics&) const = default;
};

using VmmAction = std::variant<MachineConfig, BootSource, DriveConfig, NetConfig, VsockConfig, InstanceStart,
                               SendCtrlAltDel, FlushMetrics>;

std::string_view action_name(const VmmAction& action);
bool is_configuration(const VmmAction& action);

// Strict schema parsing; all throw SchemaViolation.
MachineConfig parse_machine_config(const nlohmann::json& j);
BootSource parse_boot_source(const nlohmann::json& j);
DriveConfig parse_drive(const nlohmann::json& j);
NetConfig parse_net(const nlohmann::json& j);
VsockConfig parse_vsock(const nlohmann::json& j);
/// The body of PUT /actions.
VmmAction parse_action_type(const nlohmann::json& j);

nlohmann::json to_json(const MachineConfig& c);
nlohmann::json to_json(const BootSource& c);
nlohmann::json to_json(const DriveConfig& c);
nlohmann::json to_json(const NetConfig& c);
nlohmann::json to_json(const VsockConfig& c);

/// Everything configured before InstanceStart. Drives and interfaces are
/// kept in insertion order; a PUT to an existing id replaces it in place.
struct MachineDescription {
    std::optional<MachineConfig> machine;
    std::optional<BootSource> boot;
    std::vector<DriveConfig> drives;
    std::vector<NetConfig> nets;
    std::optional<VsockConfig> vsock;
    bool operator==(const MachineDescription&) const = default;
};

enum class InstanceState { Uninitialized, Configured, Running, Shutdown };
std::string_view to_string(InstanceState s);

/// HTTP-level outcome of an action.
struct ActionResult {
    int status = 204;
    std::string body; // JSON, empty for 204
    bool ok() const { return status >= 200 && status < 300; }
    static ActionResult no_content() { return {204, {}}; }
    static ActionResult fault(int status, std::string_view message);
};

/// The lifecycle rules. Returns the state after the action is accepted, or
/// an error result (409 for wrong state, 400 for invalid content). Does not
/// perform the action; InstanceStart's success still depends on boot.
struct Decision {
    ActionResult result;
    InstanceState next;
};
Decision decide(InstanceState state, const MachineDescription& desc, const VmmAction& action);

/// Applies an accepted configuration action to the description.
void apply_action(MachineDescription& desc, const VmmAction& action);

} // namespace kindling
