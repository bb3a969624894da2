#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kindling/vmm_action.hpp"

namespace kindling {

inline constexpr const char* kDefaultApiSocket = "/run/kindling.socket";

struct LaunchOptions {
    std::string api_socket_path = kDefaultApiSocket;
    std::optional<std::string> config_file;
    std::string metrics_path;
    unsigned metrics_period = 60000; // ms
    int seccomp_level = 2;
    bool no_api = false;
    std::string id = "kindling";
    bool help = false;
};

/// argv[0] is the program name. Throws UsageError.
LaunchOptions parse_args(int argc, const char* const* argv);
std::string usage();

/// The boot sequence a config file stands for: machine-config, boot-source,
/// drives, network-interfaces, vsock, then InstanceStart. Throws
/// SchemaViolation.
std::vector<VmmAction> config_actions(const nlohmann::json& config);
std::vector<VmmAction> load_config_file(const std::string& path);

} // namespace kindling
