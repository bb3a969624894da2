#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <utility>

#include "json.hpp"
#include "kindling/kvm.hpp"

namespace kindling {

inline constexpr size_t kExitKindCount = static_cast<size_t>(ExitKind::Unsupported) + 1;

/// Counters shared by the VMM and vCPU threads. Only ever incremented;
/// timestamps are set once.
struct Metrics {
    std::array<std::atomic<uint64_t>, kExitKindCount> exits{};
    std::atomic<uint64_t> pio_reads{0};
    std::atomic<uint64_t> pio_writes{0};
    std::atomic<uint64_t> pio_unhandled{0};
    std::atomic<uint64_t> mmio_reads{0};
    std::atomic<uint64_t> mmio_writes{0};
    std::atomic<uint64_t> mmio_unhandled{0};
    std::atomic<uint64_t> serial_bytes{0};
    std::atomic<uint64_t> api_requests{0};
    std::atomic<uint64_t> flushes{0};

    // Microseconds since process start; -1 until it happens.
    std::atomic<int64_t> guest_entry_us{-1};
    std::atomic<int64_t> first_serial_us{-1};

    void count_exit(ExitKind k) noexcept { exits[static_cast<size_t>(k)].fetch_add(1, std::memory_order_relaxed); }
    uint64_t total_exits() const noexcept;
    static void mark_once(std::atomic<int64_t>& slot) noexcept;
};

/// When the process was created by the kernel, on the steady clock. Read
/// from /proc so it covers exec and dynamic loading.
std::chrono::steady_clock::time_point process_start_time();
int64_t micros_since_process_start();

struct RssReport {
    uint64_t total_kib = 0;
    uint64_t excluded_kib = 0; // resident pages inside the excluded ranges
    uint64_t overhead_kib() const noexcept { return total_kib - excluded_kib; }
};

/// Sums Rss over /proc/self/smaps, separating mappings that start inside
/// one of the given host ranges (guest RAM).
RssReport measure_rss(std::span<const std::pair<uintptr_t, size_t>> excluded);

/// Threads of a process (0: this one), leaving out workers the kernel runs
/// inside it on our behalf, such as KVM's page recovery task.
size_t user_thread_count(int pid = 0);

nlohmann::json counters_json(const Metrics& m);

} // namespace kindling
