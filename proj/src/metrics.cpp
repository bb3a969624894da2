#include "kindling/metrics.hpp"

#include <time.h>
#include <unistd.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace kindling {

uint64_t Metrics::total_exits() const noexcept {
    uint64_t n = 0;
    for (const auto& e : exits)
        n += e.load(std::memory_order_relaxed);
    return n;
}

void Metrics::mark_once(std::atomic<int64_t>& slot) noexcept {
    int64_t unset = -1;
    slot.compare_exchange_strong(unset, micros_since_process_start());
}

namespace {

std::chrono::steady_clock::time_point compute_start() {
    const auto now = std::chrono::steady_clock::now();
    std::ifstream in("/proc/self/stat");
    std::string stat((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    // comm may contain spaces; fields resume after the last ')'.
    const auto close = stat.rfind(')');
    if (close == std::string::npos)
        return now;
    std::istringstream fields(stat.substr(close + 2));
    std::string f;
    // state is field 3, starttime field 22.
    for (int i = 3; i < 22 && fields >> f; ++i) {
    }
    unsigned long long ticks = 0;
    if (!(fields >> ticks))
        return now;
    timespec boot{};
    clock_gettime(CLOCK_BOOTTIME, &boot);
    const double since_boot = boot.tv_sec + boot.tv_nsec / 1e9;
    const double started = static_cast<double>(ticks) / static_cast<double>(sysconf(_SC_CLK_TCK));
    const double age = since_boot > started ? since_boot - started : 0.0;
    return now - std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(age));
}

} // namespace

std::chrono::steady_clock::time_point process_start_time() {
    static const auto start = compute_start();
    return start;
}

int64_t micros_since_process_start() {
    return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() -
                                                                 process_start_time())
        .count();
}

RssReport measure_rss(std::span<const std::pair<uintptr_t, size_t>> excluded) {
    RssReport r;
    std::ifstream in("/proc/self/smaps");
    std::string line;
    bool in_guest = false;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        // Mapping headers start with "lo-hi perms ..."; fields start with a capital letter.
        if (std::isxdigit(static_cast<unsigned char>(line[0])) && line.find('-') != std::string::npos &&
            line.find(':') > line.find('-')) {
            const uintptr_t lo = std::stoull(line.substr(0, line.find('-')), nullptr, 16);
            in_guest = false;
            for (const auto& [base, size] : excluded)
                if (lo >= base && lo < base + size)
                    in_guest = true;
            continue;
        }
        if (line.rfind("Rss:", 0) == 0) {
            const uint64_t kib = std::stoull(line.substr(4));
            r.total_kib += kib;
            if (in_guest)
                r.excluded_kib += kib;
        }
    }
    return r;
}

size_t user_thread_count(int pid) {
    constexpr unsigned long kUserWorker = 0x00004000; // PF_USER_WORKER
    constexpr unsigned long kIoWorker = 0x00000010;   // PF_IO_WORKER
    const std::filesystem::path dir =
        std::filesystem::path("/proc") / (pid ? std::to_string(pid) : std::string("self")) / "task";
    size_t n = 0;
    std::error_code ec;
    for (const auto& e : std::filesystem::directory_iterator(dir, ec)) {
        std::ifstream in(e.path() / "stat");
        std::string stat((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const auto close = stat.rfind(')');
        if (close == std::string::npos)
            continue; // exited while we looked
        std::istringstream fields(stat.substr(close + 2));
        std::string f;
        for (int i = 3; i < 9 && fields >> f; ++i) {
        }
        unsigned long flags = 0;
        fields >> flags;
        if (!(flags & (kUserWorker | kIoWorker)))
            ++n;
    }
    return n;
}

nlohmann::json counters_json(const Metrics& m) {
    nlohmann::json exits = nlohmann::json::object();
    for (size_t i = 0; i < kExitKindCount; ++i)
        exits[std::string(to_string(static_cast<ExitKind>(i)))] = m.exits[i].load();
    return {
        {"vmexits", exits},
        {"pio", {{"reads", m.pio_reads.load()}, {"writes", m.pio_writes.load()}, {"unhandled", m.pio_unhandled.load()}}},
        {"mmio",
         {{"reads", m.mmio_reads.load()}, {"writes", m.mmio_writes.load()}, {"unhandled", m.mmio_unhandled.load()}}},
        {"serial_bytes", m.serial_bytes.load()},
        {"api_requests", m.api_requests.load()},
        {"flushes", m.flushes.load()},
        {"boot",
         {{"guest_entry_us", m.guest_entry_us.load()}, {"first_serial_us", m.first_serial_us.load()}}},
    };
}

} // namespace kindling
