#include "kindling/cli.hpp"

#include <fstream>
#include <set>

#include "CLI11.hpp"
#include "kindling/error.hpp"

namespace kindling {

namespace {

struct App {
    CLI::App app{"kindling: a minimal KVM micro-VM monitor", "kindling"};
    LaunchOptions o;

    App() {
        app.set_help_flag(); // handled below so parsing never exits
        app.add_flag("-h,--help", o.help, "Print this help and exit");
        app.add_option("--api-sock", o.api_socket_path, "Unix socket for the HTTP API")->capture_default_str();
        app.add_option("--config-file", o.config_file, "JSON machine description to boot at startup");
        app.add_option("--metrics-path", o.metrics_path, "Append line-delimited JSON metrics here");
        app.add_option("--metrics-period-ms", o.metrics_period, "Periodic metrics interval")
            ->capture_default_str()
            ->check(CLI::Range(10u, 3600000u));
        app.add_option("--seccomp-level", o.seccomp_level, "0 disabled, 1 syscall numbers, 2 numbers and arguments")
            ->capture_default_str()
            ->check(CLI::Range(0, 2));
        app.add_flag("--no-api", o.no_api, "Do not start the API server (needs --config-file)");
        app.add_option("--id", o.id, "Instance id reported by the API and metrics")->capture_default_str();
    }
};

} // namespace

LaunchOptions parse_args(int argc, const char* const* argv) {
    App a;
    try {
        a.app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        throw Error(ErrorCode::UsageError, e.what());
    }
    if (a.o.help)
        return a.o;
    if (a.o.no_api && !a.o.config_file)
        throw Error(ErrorCode::UsageError, "--no-api requires --config-file");
    if (a.o.id.empty() || a.o.id.size() > 64)
        throw Error(ErrorCode::UsageError, "--id must be 1 to 64 characters");
    return a.o;
}

std::string usage() {
    return App().app.help();
}

std::vector<VmmAction> config_actions(const nlohmann::json& config) {
    if (!config.is_object())
        throw Error(ErrorCode::SchemaViolation, "config file must hold a JSON object");
    static const std::set<std::string> known = {"machine-config", "boot-source", "drives", "network-interfaces",
                                                "vsock"};
    for (const auto& [k, _] : config.items())
        if (!known.count(k))
            throw Error(ErrorCode::SchemaViolation, "unknown config section '" + k + "'");
    auto list = [&](const char* key) {
        if (!config.contains(key))
            return nlohmann::json::array();
        if (!config[key].is_array())
            throw Error(ErrorCode::SchemaViolation, std::string(key) + " must be an array");
        return config[key];
    };

    std::vector<VmmAction> out;
    if (config.contains("machine-config"))
        out.emplace_back(parse_machine_config(config["machine-config"]));
    if (config.contains("boot-source"))
        out.emplace_back(parse_boot_source(config["boot-source"]));
    for (const auto& d : list("drives"))
        out.emplace_back(parse_drive(d));
    for (const auto& n : list("network-interfaces"))
        out.emplace_back(parse_net(n));
    if (config.contains("vsock"))
        out.emplace_back(parse_vsock(config["vsock"]));
    out.emplace_back(InstanceStart{});
    return out;
}

std::vector<VmmAction> load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw Error(ErrorCode::UsageError, "cannot read config file " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaViolation, std::string("config file: ") + e.what());
    }
    return config_actions(j);
}

} // namespace kindling
