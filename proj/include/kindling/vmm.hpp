#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kindling/api_server.hpp"
#include "kindling/devices/net.hpp"
#include "kindling/devices/registry.hpp"
#include "kindling/error.hpp"
#include "kindling/event_loop.hpp"
#include "kindling/guest_memory.hpp"
#include "kindling/metrics.hpp"
#include "kindling/vmm_action.hpp"

namespace kindling {

/// A boot failure tagged with the stage that raised it. The code is the
/// downstream module's.
class StageError : public Error {
public:
    StageError(std::string stage, const Error& cause);
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Where a virtio device lands: its register window and its own IRQ line.
struct DeviceSlot {
    devices::DeviceKind kind;
    std::string id;
    GuestAddress window;
    uint32_t irq = 0;
};

/// Root drive first, then the other drives, interfaces and vsock, each on
/// the next window. Throws IrqExhausted past ten devices.
std::vector<DeviceSlot> plan_devices(const MachineDescription& desc);

/// Boot arguments plus what the guest needs to find the devices.
std::string kernel_cmdline(const MachineDescription& desc, std::span<const DeviceSlot> slots);

using NetEndpointFactory = std::function<std::unique_ptr<devices::FrameEndpoint>(const NetConfig&)>;

/// What the VMM lends a machine while it boots and runs.
struct MachineEnv {
    EventLoop* loop = nullptr;
    Metrics* metrics = nullptr;
    /// Thread-safe. Called once per vCPU that stops on its own.
    std::function<void(const std::string& reason)> on_guest_exit;
    std::function<void(std::span<const uint8_t>)> serial_sink;
    NetEndpointFactory net_factory;
    std::chrono::milliseconds join_timeout{5000};
};

/// A booted guest. Everything but the vCPU threads runs on the VMM thread.
class Machine {
public:
    virtual ~Machine() = default;
    virtual void spawn() = 0;
    virtual void ctrl_alt_del() = 0;
    virtual void serial_input(std::span<const uint8_t> bytes) = 0;
    /// Stops and joins the vCPU threads, then flushes devices. Idempotent.
    virtual void stop() = 0;
    virtual size_t vcpu_threads() const = 0;
    virtual nlohmann::json device_metrics() const { return nlohmann::json::object(); }
    virtual std::vector<std::pair<uintptr_t, size_t>> guest_ranges() const { return {}; }
};

using Booter = std::function<std::unique_ptr<Machine>(const MachineDescription&, MachineEnv&)>;

/// create_map, create_vm, register_memory, devices, load_guest,
/// configure_vcpus. A failure releases everything and throws StageError.
std::unique_ptr<Machine> boot_kvm_machine(const MachineDescription& desc, MachineEnv& env);

struct VmmOptions {
    std::string instance_id = "kindling";
    std::string metrics_path; // empty: no metrics file
    std::chrono::milliseconds metrics_period{60000};
    std::function<void(std::span<const uint8_t>)> serial_sink; // default: stdout
    int stdin_fd = -1;
    NetEndpointFactory net_factory; // default: tap
    Booter booter;                  // default: boot_kvm_machine
    /// Runs after boot, immediately before the vCPU threads start.
    std::function<void()> before_spawn;
    std::chrono::milliseconds join_timeout{5000};
};

/// The VMM thread: owns the instance state and the machine, and runs the
/// dispatch loop. Not thread-safe; every call happens on one thread.
class Vmm {
public:
    using Responder = std::function<void(uint64_t id, ActionResult result)>;

    explicit Vmm(VmmOptions options);
    ~Vmm();
    Vmm(const Vmm&) = delete;
    Vmm& operator=(const Vmm&) = delete;

    /// Serves API requests from `requests`, answering through `respond`.
    void attach_api(Channel<ApiRequest>& requests, Responder respond);

    ActionResult execute(const VmmAction& action);

    /// Dispatches until the instance shuts down. Returns the process exit
    /// code: 0 after a clean guest exit.
    int run();
    size_t run_once(int timeout_ms) { return loop_.run_once(timeout_ms); }

    /// Stops the guest and writes final metrics. Idempotent.
    void shutdown(const std::string& reason);

    InstanceState state() const noexcept { return state_; }
    const MachineDescription& description() const noexcept { return desc_; }
    const Metrics& metrics() const noexcept { return metrics_; }
    std::optional<std::string> exit_reason() const;
    EventLoop& loop() noexcept { return loop_; }
    size_t vcpu_threads() const { return machine_ ? machine_->vcpu_threads() : 0; }

    nlohmann::json metrics_snapshot() const;
    void write_metrics();

private:
    void on_requests();
    void on_guest_exit_event();
    void on_stdin();

    VmmOptions opts_;
    EventLoop loop_;
    Metrics metrics_;
    MachineEnv env_;
    EventFd exit_event_;
    IntervalTimer metrics_timer_;
    InstanceState state_ = InstanceState::Uninitialized;
    MachineDescription desc_;
    std::unique_ptr<Machine> machine_;

    Channel<ApiRequest>* requests_ = nullptr;
    Responder respond_;

    mutable std::mutex exit_mu_;
    std::optional<std::string> exit_reason_;
    bool clean_exit_ = true;
    bool shut_down_ = false;
};

} // namespace kindling
