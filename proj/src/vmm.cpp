#include "kindling/vmm.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>

namespace kindling {

namespace {

void write_all(int fd, std::span<const uint8_t> bytes) {
    while (!bytes.empty()) {
        const ssize_t n = ::write(fd, bytes.data(), bytes.size());
        if (n < 0) {
            if (errno == EINTR)
                continue;
            return; // console output is best effort
        }
        bytes = bytes.subspan(static_cast<size_t>(n));
    }
}

bool clean_reason(const std::string& r) {
    return r == "reset" || r == "shutdown" || r == "halt" || r == "api" || r == "signal";
}

} // namespace

Vmm::Vmm(VmmOptions options) : opts_(std::move(options)), metrics_timer_(opts_.metrics_period) {
    process_start_time(); // pin the reference before anything else happens
    if (!opts_.booter)
        opts_.booter = boot_kvm_machine;
    auto sink = opts_.serial_sink ? opts_.serial_sink
                                  : [](std::span<const uint8_t> b) { write_all(STDOUT_FILENO, b); };
    env_.loop = &loop_;
    env_.metrics = &metrics_;
    env_.net_factory = opts_.net_factory;
    env_.join_timeout = opts_.join_timeout;
    env_.serial_sink = [this, sink](std::span<const uint8_t> b) {
        Metrics::mark_once(metrics_.first_serial_us);
        metrics_.serial_bytes.fetch_add(b.size(), std::memory_order_relaxed);
        sink(b);
    };
    env_.on_guest_exit = [this](const std::string& reason) {
        {
            std::lock_guard lock(exit_mu_);
            if (!exit_reason_)
                exit_reason_ = reason;
        }
        exit_event_.signal();
    };

    loop_.add(exit_event_.fd(), HandlerKind::exit(), interest::kReadable,
              [this](const ReadyEvent&) { on_guest_exit_event(); });
    loop_.add(metrics_timer_.fd(), HandlerKind::write_metrics(), interest::kReadable, [this](const ReadyEvent&) {
        metrics_timer_.consume();
        write_metrics();
    });
    if (opts_.stdin_fd >= 0) {
        ::fcntl(opts_.stdin_fd, F_SETFL, ::fcntl(opts_.stdin_fd, F_GETFL) | O_NONBLOCK);
        try {
            loop_.add(opts_.stdin_fd, HandlerKind::stdin_input(), interest::kReadable,
                      [this](const ReadyEvent&) { on_stdin(); });
        } catch (const Error&) {
            // Regular files and /dev/null cannot be polled; there is no input then.
        }
    }
}

Vmm::~Vmm() {
    if (machine_)
        machine_->stop();
    machine_.reset();
}

void Vmm::attach_api(Channel<ApiRequest>& requests, Responder respond) {
    requests_ = &requests;
    respond_ = std::move(respond);
    loop_.add(requests.fd(), HandlerKind::action_request(), interest::kReadable,
              [this](const ReadyEvent&) { on_requests(); });
}

void Vmm::on_requests() {
    for (auto& req : requests_->drain()) {
        if (!req.action) {
            respond_(req.id, {200, instance_info_body(opts_.instance_id, state_)});
            continue;
        }
        metrics_.api_requests.fetch_add(1, std::memory_order_relaxed);
        respond_(req.id, execute(*req.action));
    }
}

ActionResult Vmm::execute(const VmmAction& action) {
    const Decision d = decide(state_, desc_, action);
    if (!d.result.ok())
        return d.result;
    if (is_configuration(action)) {
        apply_action(desc_, action);
        state_ = d.next;
        return d.result;
    }
    if (std::holds_alternative<InstanceStart>(action)) {
        std::unique_ptr<Machine> m;
        try {
            m = opts_.booter(desc_, env_);
            try {
                if (opts_.before_spawn)
                    opts_.before_spawn();
                m->spawn();
            } catch (const Error& e) {
                throw StageError("spawn", e);
            }
        } catch (const Error& e) {
            m.reset(); // rolls back everything the stages built
            return ActionResult::fault(400, e.what());
        }
        machine_ = std::move(m);
        state_ = d.next;
        return d.result;
    }
    if (std::holds_alternative<SendCtrlAltDel>(action)) {
        machine_->ctrl_alt_del();
        return d.result;
    }
    write_metrics(); // FlushMetrics
    return d.result;
}

void Vmm::on_guest_exit_event() {
    exit_event_.consume();
    std::string reason;
    {
        std::lock_guard lock(exit_mu_);
        if (!exit_reason_)
            return;
        reason = *exit_reason_;
    }
    shutdown(reason);
}

void Vmm::on_stdin() {
    uint8_t buf[256];
    for (;;) {
        const ssize_t n = ::read(opts_.stdin_fd, buf, sizeof(buf));
        if (n > 0) {
            if (machine_ && state_ == InstanceState::Running)
                machine_->serial_input({buf, static_cast<size_t>(n)});
            continue;
        }
        if (n == 0 || (errno != EINTR && errno != EAGAIN))
            loop_.remove_fd(opts_.stdin_fd);
        if (n < 0 && errno == EINTR)
            continue;
        return;
    }
}

void Vmm::shutdown(const std::string& reason) {
    if (shut_down_)
        return;
    shut_down_ = true;
    {
        std::lock_guard lock(exit_mu_);
        if (!exit_reason_)
            exit_reason_ = reason;
        clean_exit_ = clean_reason(*exit_reason_);
    }
    if (machine_)
        machine_->stop();
    state_ = InstanceState::Shutdown;
    write_metrics();
    loop_.stop();
}

int Vmm::run() {
    while (!loop_.stopped())
        loop_.run_once(-1);
    return clean_exit_ ? 0 : 1;
}

std::optional<std::string> Vmm::exit_reason() const {
    std::lock_guard lock(exit_mu_);
    return exit_reason_;
}

nlohmann::json Vmm::metrics_snapshot() const {
    auto j = counters_json(metrics_);
    j["instance_id"] = opts_.instance_id;
    j["state"] = to_string(state_);
    j["uptime_us"] = micros_since_process_start();
    j["devices"] = machine_ ? machine_->device_metrics() : nlohmann::json::object();
    const auto ranges = machine_ ? machine_->guest_ranges() : std::vector<std::pair<uintptr_t, size_t>>{};
    const RssReport rss = measure_rss(ranges);
    j["rss_kib"] = {{"total", rss.total_kib}, {"guest", rss.excluded_kib}, {"overhead", rss.overhead_kib()}};
    if (auto r = exit_reason())
        j["exit_reason"] = *r;
    return j;
}

void Vmm::write_metrics() {
    metrics_.flushes.fetch_add(1, std::memory_order_relaxed);
    if (opts_.metrics_path.empty())
        return;
    const std::string line = metrics_snapshot().dump() + "\n";
    const int fd = ::open(opts_.metrics_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0640);
    if (fd < 0) {
        std::fprintf(stderr, "kindling: cannot open metrics file %s\n", opts_.metrics_path.c_str());
        return;
    }
    write_all(fd, {reinterpret_cast<const uint8_t*>(line.data()), line.size()});
    ::close(fd);
}

} // namespace kindling
