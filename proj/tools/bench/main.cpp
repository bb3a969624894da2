// Sequential VM creation throughput. Each iteration builds a fresh monitor
// instance, configures it, starts it, and tears it down; with --run the guest
// runs until it resets (use a kernel that exits on its own).
//
//   kindling-bench --kernel PATH [--count N] [--vcpus N] [--mem-mib N] [--run]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <vector>

#include "CLI11.hpp"
#include "kindling/vmm.hpp"

using namespace kindling;
using Clock = std::chrono::steady_clock;

int main(int argc, char** argv) {
    std::string kernel;
    unsigned count = 100, vcpus = 1, mem_mib = 128;
    bool run = false;
    CLI::App app{"Sequential VM creation benchmark"};
    app.add_option("--kernel", kernel, "bzImage to load")->required()->check(CLI::ExistingFile);
    app.add_option("--count", count, "Iterations")->capture_default_str()->check(CLI::Range(1u, 100000u));
    app.add_option("--vcpus", vcpus, "vCPUs per VM")->capture_default_str()->check(CLI::Range(1u, 32u));
    app.add_option("--mem-mib", mem_mib, "Guest RAM per VM")->capture_default_str()->check(CLI::Range(16u, 65536u));
    app.add_flag("--run", run, "Run each guest until it resets instead of stopping right after start");
    CLI11_PARSE(app, argc, argv);

    std::vector<double> ms;
    ms.reserve(count);
    const auto t0 = Clock::now();
    for (unsigned i = 0; i < count; ++i) {
        const auto start = Clock::now();
        VmmOptions o;
        o.serial_sink = [](std::span<const uint8_t>) {};
        Vmm vmm(o);
        vmm.execute(MachineConfig{vcpus, mem_mib});
        vmm.execute(BootSource{kernel, "console=ttyS0 reboot=k panic=1", std::nullopt});
        const ActionResult r = vmm.execute(InstanceStart{});
        if (!r.ok()) {
            std::fprintf(stderr, "kindling-bench: iteration %u: %s\n", i, r.body.c_str());
            return 1;
        }
        if (run)
            vmm.run();
        else
            vmm.shutdown("api");
        ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - start).count());
    }
    const double total = std::chrono::duration<double>(Clock::now() - t0).count();
    std::sort(ms.begin(), ms.end());
    const auto pct = [&](double p) { return ms[std::min(ms.size() - 1, static_cast<size_t>(p * ms.size()))]; };
    std::printf("%u VMs in %.3f s: %.1f VMs/s, per VM p50 %.2f ms, p99 %.2f ms, max %.2f ms\n", count, total,
                count / total, pct(0.5), pct(0.99), ms.back());
    return 0;
}
