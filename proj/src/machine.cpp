#include <fcntl.h>
#include <pthread.h>
#include <signal.h>
#include <sys/epoll.h>
#include <unistd.h>

#include <condition_variable>
#include <cstdio>
#include <deque>
#include <fstream>
#include <thread>

#include "kindling/boot.hpp"
#include "kindling/devices/block.hpp"
#include "kindling/devices/i8042.hpp"
#include "kindling/devices/serial.hpp"
#include "kindling/devices/vsock.hpp"
#include "kindling/kvm.hpp"
#include "kindling/virtio/irq.hpp"
#include "kindling/virtio/mmio.hpp"
#include "kindling/vmm.hpp"

namespace kindling {

namespace {

// The cause's text without its "Code: " prefix, which the wrapper repeats.
std::string detail_of(const Error& e) {
    std::string_view w = e.what();
    const std::string prefix = std::string(to_string(e.code())) + ": ";
    if (w.substr(0, prefix.size()) == prefix)
        w.remove_prefix(prefix.size());
    return std::string(w);
}

} // namespace

StageError::StageError(std::string stage, const Error& cause)
    : Error(cause.code(), "boot stage " + stage + ": " + detail_of(cause)), stage_(std::move(stage)) {}

std::vector<DeviceSlot> plan_devices(const MachineDescription& desc) {
    using devices::DeviceKind;
    std::vector<DeviceSlot> slots;
    virtio::IrqAllocator irqs;
    auto place = [&](DeviceKind kind, const std::string& id) {
        DeviceSlot s{kind, id, GuestAddress{virtio::kMmioBase + virtio::kMmioWindow * slots.size()}, 0};
        s.irq = irqs.allocate(std::string(to_string(kind)) + "/" + id);
        slots.push_back(std::move(s));
    };
    for (const auto& d : desc.drives)
        if (d.is_root_device)
            place(DeviceKind::VirtioBlock, d.drive_id);
    for (const auto& d : desc.drives)
        if (!d.is_root_device)
            place(DeviceKind::VirtioBlock, d.drive_id);
    for (const auto& n : desc.nets)
        place(DeviceKind::VirtioNet, n.iface_id);
    if (desc.vsock)
        place(DeviceKind::VirtioVsock, "vsock");
    return slots;
}

std::string kernel_cmdline(const MachineDescription& desc, std::span<const DeviceSlot> slots) {
    std::string cmdline = desc.boot ? desc.boot->boot_args : std::string();
    for (const auto& s : slots) {
        char arg[96];
        std::snprintf(arg, sizeof(arg), "virtio_mmio.device=4K@0x%llx:%u",
                      static_cast<unsigned long long>(s.window.value), s.irq);
        if (!cmdline.empty())
            cmdline += ' ';
        cmdline += arg;
    }
    for (const auto& d : desc.drives)
        if (d.is_root_device) {
            cmdline += d.is_read_only ? " root=/dev/vda ro" : " root=/dev/vda rw";
            break;
        }
    return cmdline;
}

namespace {

std::vector<uint8_t> read_whole(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(ErrorCode::DeviceIo, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// MMIO exits handed from vCPU threads to the VMM thread, which answers
/// them synchronously.
class MmioMailbox {
public:
    struct Call {
        bool write = false;
        GuestAddress addr;
        std::span<uint8_t> data;
        bool done = false;
    };

    int fd() const noexcept { return wake_.fd(); }

    /// Blocks until the VMM thread served the call; false once closed.
    bool call(Call& c) {
        std::unique_lock lock(mu_);
        if (closed_)
            return false;
        pending_.push_back(&c);
        wake_.signal();
        cv_.wait(lock, [&] { return c.done || closed_; });
        return c.done;
    }

    template <typename Fn>
    void serve(Fn&& fn) {
        wake_.consume();
        for (;;) {
            Call* c;
            {
                std::lock_guard lock(mu_);
                if (pending_.empty() || closed_)
                    return;
                c = pending_.front();
                pending_.pop_front();
            }
            fn(*c);
            {
                std::lock_guard lock(mu_);
                c->done = true;
            }
            cv_.notify_all();
        }
    }

    void close() {
        {
            std::lock_guard lock(mu_);
            closed_ = true;
            pending_.clear();
        }
        cv_.notify_all();
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Call*> pending_;
    bool closed_ = false;
    EventFd wake_;
};

/// Registers a device's host handles in the VMM loop and remembers them so
/// they can be dropped when the machine goes away.
class LoopRegistry : public virtio::HostFdRegistry {
public:
    LoopRegistry(EventLoop& loop, virtio::MmioTransport& t, uint32_t id) : loop_(loop), t_(t), id_(id) {}
    ~LoopRegistry() override {
        for (int fd : fds_)
            loop_.remove_fd(fd);
    }

    void add(int fd, uint32_t events) override {
        uint32_t mask = 0;
        if (events & EPOLLIN)
            mask |= interest::kReadable;
        if (events & EPOLLOUT)
            mask |= interest::kWritable;
        loop_.add(fd, HandlerKind::device(id_), mask,
                  [this](const ReadyEvent& ev) { t_.handle_host_event(ev.fd, ev.events); });
        fds_.push_back(fd);
    }
    void remove(int fd) override {
        loop_.remove_fd(fd);
        std::erase(fds_, fd);
    }

private:
    EventLoop& loop_;
    virtio::MmioTransport& t_;
    uint32_t id_;
    std::vector<int> fds_;
};

constexpr uint32_t kMailboxDeviceId = 0;

class KvmMachine final : public Machine {
public:
    KvmMachine(const MachineDescription& desc, MachineEnv& env) : env_(env) {
        try {
            build(desc);
        } catch (...) {
            // No destructor runs for a half-built object.
            if (mailbox_registered_)
                env_.loop->remove_fd(mailbox_.fd());
            throw;
        }
    }
    ~KvmMachine() override {
        stop();
        registries_.clear();
        if (mailbox_registered_)
            env_.loop->remove_fd(mailbox_.fd());
    }

    void spawn() override;
    void ctrl_alt_del() override { i8042_->inject_ctrl_alt_del(); }
    void serial_input(std::span<const uint8_t> bytes) override { serial_->enqueue_input(bytes); }
    void stop() override;
    size_t vcpu_threads() const override { return threads_.size(); }
    nlohmann::json device_metrics() const override;
    std::vector<std::pair<uintptr_t, size_t>> guest_ranges() const override {
        std::vector<std::pair<uintptr_t, size_t>> out;
        for (const auto& r : mem_->regions())
            out.emplace_back(reinterpret_cast<uintptr_t>(r.host()), r.size());
        return out;
    }

private:
    template <typename Fn>
    void stage(const char* name, Fn&& fn) {
        try {
            fn();
        } catch (const Error& e) {
            throw StageError(name, e);
        } catch (const std::exception& e) {
            throw StageError(name, Error(ErrorCode::HostRejected, e.what()));
        }
    }

    void build(const MachineDescription& desc);
    void create_devices(const MachineDescription& desc);
    void vcpu_loop(size_t index);
    void port_io(const VmExit& e);
    void serve_mmio(MmioMailbox::Call& c);
    void guest_exit(const std::string& reason);

    MachineEnv& env_;
    std::unique_ptr<GuestMemoryMap> mem_;
    std::optional<Hypervisor> hv_;
    std::optional<Vm> vm_;
    std::unique_ptr<virtio::IrqAllocator> irqs_;
    virtio::MmioBus bus_;
    std::vector<DeviceSlot> slots_;
    std::vector<std::unique_ptr<LoopRegistry>> registries_;
    std::unique_ptr<devices::SerialConsole> serial_;
    std::unique_ptr<devices::KeyboardController> i8042_;
    std::string cmdline_;
    LongModeSetup setup_;
    std::vector<Vcpu> vcpus_;

    MmioMailbox mailbox_;
    bool mailbox_registered_ = false;
    std::vector<std::thread> threads_;
    std::atomic<bool> stopping_{false};
    std::mutex done_mu_;
    std::condition_variable done_cv_;
    size_t exited_ = 0;
    bool stopped_ = false;
};

void KvmMachine::build(const MachineDescription& desc) {
    const uint64_t ram = desc.machine->mem_size_mib << 20;
    stage("create_map", [&] { mem_ = std::make_unique<GuestMemoryMap>(GuestMemoryMap::create(standard_ram_layout(ram))); });
    stage("create_vm", [&] {
        hv_.emplace(Hypervisor::open());
        vm_.emplace(hv_->create_vm());
    });
    stage("register_memory", [&] { vm_->register_memory(*mem_); });
    stage("devices", [&] { create_devices(desc); });
    stage("load_guest", [&] {
        const auto image = read_whole(desc.boot->kernel_image_path);
        std::optional<std::vector<uint8_t>> initrd;
        if (desc.boot->initrd_path)
            initrd = read_whole(*desc.boot->initrd_path);
        const auto info = boot::parse_bzimage(image);
        const auto layout = boot::plan_layout(info, cmdline_.size(),
                                              initrd ? initrd->size() : boot::default_initramfs().size(), ram);
        std::optional<std::span<const uint8_t>> initrd_span;
        if (initrd)
            initrd_span = std::span<const uint8_t>(*initrd);
        const GuestAddress entry = boot::load_guest(*mem_, image, info, layout, cmdline_, initrd_span);
        setup_ = {entry,
                  layout.zero_page,
                  layout.page_table_root,
                  boot::kBootStackTop,
                  layout.gdt_addr,
                  static_cast<uint16_t>(boot::kGdtEntries * 8 - 1),
                  boot::kIdtAddr};
    });
    stage("configure_vcpus", [&] {
        for (uint32_t i = 0; i < desc.machine->vcpu_count; ++i) {
            vcpus_.push_back(vm_->create_vcpu(i));
            vcpus_.back().configure_long_mode(setup_);
        }
    });
}

void KvmMachine::create_devices(const MachineDescription& desc) {
    Vm* vm = &*vm_;
    irqs_ = std::make_unique<virtio::IrqAllocator>([vm](uint32_t line) { vm->pulse_irq(line); });
    slots_ = plan_devices(desc);
    cmdline_ = kernel_cmdline(desc, slots_);

    serial_ = std::make_unique<devices::SerialConsole>(
        [this](std::span<const uint8_t> bytes) {
            if (env_.serial_sink)
                env_.serial_sink(bytes);
        },
        [vm] { vm->pulse_irq(devices::kCom1Irq); });
    i8042_ = std::make_unique<devices::KeyboardController>([this] { guest_exit("reset"); },
                                                           [vm] { vm->pulse_irq(devices::kI8042Irq); });

    uint32_t id = kMailboxDeviceId;
    for (const auto& slot : slots_) {
        std::unique_ptr<virtio::VirtioDevice> dev;
        switch (slot.kind) {
        case devices::DeviceKind::VirtioBlock:
            for (const auto& d : desc.drives)
                if (d.drive_id == slot.id)
                    dev = std::make_unique<devices::BlockDevice>(d.path_on_host, d.is_read_only, d.drive_id);
            break;
        case devices::DeviceKind::VirtioNet:
            for (const auto& n : desc.nets)
                if (n.iface_id == slot.id) {
                    auto ep = env_.net_factory ? env_.net_factory(n)
                                               : std::make_unique<devices::TapEndpoint>(n.tap_name);
                    std::optional<devices::MacAddress> mac;
                    if (n.mac)
                        mac = devices::parse_mac(*n.mac);
                    dev = std::make_unique<devices::NetDevice>(std::move(ep), mac);
                }
            break;
        case devices::DeviceKind::VirtioVsock:
            dev = std::make_unique<devices::VsockDevice>(desc.vsock->guest_cid, desc.vsock->uds_path);
            break;
        default:
            break;
        }
        const std::string irq_owner = std::string(to_string(slot.kind)) + "/" + slot.id;
        if (irqs_->allocate(irq_owner) != slot.irq)
            throw Error(ErrorCode::DuplicateDevice, "IRQ plan out of step for " + irq_owner);
        virtio::IrqAllocator* irqs = irqs_.get();
        auto t = std::make_shared<virtio::MmioTransport>(slot.window, std::move(dev), *mem_,
                                                         [irqs, irq_owner] { irqs->assert_irq(irq_owner); });
        bus_.insert(t);
        registries_.push_back(std::make_unique<LoopRegistry>(*env_.loop, *t, ++id));
        t->device().attach_host(*registries_.back());
    }

    env_.loop->add(mailbox_.fd(), HandlerKind::device(kMailboxDeviceId), interest::kReadable,
                   [this](const ReadyEvent&) { mailbox_.serve([this](MmioMailbox::Call& c) { serve_mmio(c); }); });
    mailbox_registered_ = true;
}

void KvmMachine::serve_mmio(MmioMailbox::Call& c) {
    const bool handled = c.write ? bus_.write(c.addr, c.data) : bus_.read(c.addr, c.data);
    if (!handled) {
        env_.metrics->mmio_unhandled.fetch_add(1, std::memory_order_relaxed);
        if (!c.write)
            std::fill(c.data.begin(), c.data.end(), 0);
    }
}

void KvmMachine::spawn() {
    Metrics::mark_once(env_.metrics->guest_entry_us);
    for (size_t i = 0; i < vcpus_.size(); ++i)
        threads_.emplace_back([this, i] { vcpu_loop(i); });
}

void KvmMachine::guest_exit(const std::string& reason) {
    stopping_ = true;
    if (env_.on_guest_exit)
        env_.on_guest_exit(reason);
}

void KvmMachine::port_io(const VmExit& e) {
    Metrics& m = *env_.metrics;
    const auto port = static_cast<uint16_t>(e.addr);
    const bool out = e.kind == ExitKind::IoOut;
    (out ? m.pio_writes : m.pio_reads).fetch_add(1, std::memory_order_relaxed);
    // Only byte-wide access is meaningful for these devices; wider reads
    // see the byte in the low lane and zero elsewhere.
    for (size_t off = 0; off < e.data.size(); off += e.width) {
        uint8_t& b = e.data[off];
        if (serial_->owns(port)) {
            if (out)
                serial_->write(port, b);
            else
                b = serial_->read(port);
        } else if (i8042_->owns(port)) {
            if (out)
                i8042_->write(port, b);
            else
                b = i8042_->read(port);
        } else {
            m.pio_unhandled.fetch_add(1, std::memory_order_relaxed);
            if (!out)
                std::fill_n(e.data.begin() + off, e.width, 0xFF);
            continue;
        }
        if (!out)
            std::fill_n(e.data.begin() + off + 1, e.width - 1, 0);
    }
}

void KvmMachine::vcpu_loop(size_t index) {
    sigset_t kick;
    sigemptyset(&kick);
    sigaddset(&kick, SIGRTMIN + 1);
    pthread_sigmask(SIG_UNBLOCK, &kick, nullptr);

    Vcpu& v = vcpus_[index];
    std::string reason;
    try {
        while (!stopping_) {
            const auto e = v.run();
            if (!e)
                continue;
            env_.metrics->count_exit(e->kind);
            switch (e->kind) {
            case ExitKind::IoIn:
            case ExitKind::IoOut:
                port_io(*e);
                break;
            case ExitKind::MmioRead:
            case ExitKind::MmioWrite: {
                (e->kind == ExitKind::MmioWrite ? env_.metrics->mmio_writes : env_.metrics->mmio_reads)
                    .fetch_add(1, std::memory_order_relaxed);
                MmioMailbox::Call c{e->kind == ExitKind::MmioWrite, GuestAddress{e->addr}, e->data};
                mailbox_.call(c);
                break;
            }
            case ExitKind::Hlt:
                reason = "halt";
                break;
            case ExitKind::Shutdown:
                reason = "shutdown";
                break;
            case ExitKind::Unsupported:
                reason = "unsupported exit reason " + std::to_string(e->reason);
                break;
            }
            if (!reason.empty())
                break;
        }
    } catch (const std::exception& ex) {
        reason = std::string("vcpu error: ") + ex.what();
    }
    if (!reason.empty())
        guest_exit(reason);
    {
        std::lock_guard lock(done_mu_);
        ++exited_;
    }
    done_cv_.notify_all();
}

void KvmMachine::stop() {
    if (stopped_)
        return;
    stopped_ = true;
    stopping_ = true;
    mailbox_.close();
    const auto deadline = std::chrono::steady_clock::now() + env_.join_timeout;
    {
        std::unique_lock lock(done_mu_);
        while (exited_ < threads_.size()) {
            for (auto& v : vcpus_)
                v.kick();
            if (std::chrono::steady_clock::now() >= deadline) {
                std::fprintf(stderr, "kindling: %s: %zu of %zu vCPU threads still running after %lld ms\n",
                             std::string(to_string(ErrorCode::JoinTimeout)).c_str(), threads_.size() - exited_,
                             threads_.size(), static_cast<long long>(env_.join_timeout.count()));
                std::_Exit(70);
            }
            done_cv_.wait_for(lock, std::chrono::milliseconds(10));
        }
    }
    for (auto& t : threads_)
        t.join();
    for (const auto& t : bus_.transports())
        t->device().flush();
}

nlohmann::json KvmMachine::device_metrics() const {
    nlohmann::json out = nlohmann::json::object();
    for (size_t i = 0; i < slots_.size(); ++i) {
        const auto& t = bus_.transports()[i];
        const auto& dev = t->device();
        nlohmann::json j = {{"kind", to_string(slots_[i].kind)},
                            {"irq", slots_[i].irq},
                            {"notifies", t->counters().notifies},
                            {"interrupts", t->counters().interrupts},
                            {"malformed_chains", t->counters().malformed_chains}};
        if (auto* b = dynamic_cast<const devices::BlockDevice*>(&dev)) {
            const auto& c = b->counters();
            j.update({{"reads", c.reads}, {"writes", c.writes}, {"flushes", c.flushes}, {"failed", c.failed},
                      {"bytes_read", c.bytes_read}, {"bytes_written", c.bytes_written}});
        } else if (auto* n = dynamic_cast<const devices::NetDevice*>(&dev)) {
            const auto& c = n->counters();
            j.update({{"tx_frames", c.tx_frames}, {"rx_frames", c.rx_frames}, {"rx_dropped", c.rx_dropped},
                      {"tx_deferred", n->deferred()}});
        } else if (auto* v = dynamic_cast<const devices::VsockDevice*>(&dev)) {
            const auto& c = v->counters();
            j.update({{"tx_packets", c.tx_packets}, {"rx_packets", c.rx_packets}, {"resets_sent", c.resets_sent},
                      {"connections", c.connections}});
        }
        out[slots_[i].id] = std::move(j);
    }
    return out;
}

} // namespace

std::unique_ptr<Machine> boot_kvm_machine(const MachineDescription& desc, MachineEnv& env) {
    return std::make_unique<KvmMachine>(desc, env);
}

} // namespace kindling
