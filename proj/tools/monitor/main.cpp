#include <signal.h>
#include <sys/signalfd.h>
#include <unistd.h>

#include <cstdio>
#include <memory>

#include "kindling/api_server.hpp"
#include "kindling/cli.hpp"
#include "kindling/jailer/seccomp.hpp"
#include "kindling/metrics.hpp"
#include "kindling/vmm.hpp"

using namespace kindling;

namespace {

int run(const LaunchOptions& o) {
    // Termination arrives through the dispatch loop. Blocked before any
    // thread exists so every thread inherits the mask.
    sigset_t term;
    sigemptyset(&term);
    sigaddset(&term, SIGINT);
    sigaddset(&term, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &term, nullptr);
    signal(SIGPIPE, SIG_IGN);
    UniqueFd sigfd(::signalfd(-1, &term, SFD_NONBLOCK | SFD_CLOEXEC));

    const jail::SeccompPolicy policy = jail::policy_for_level(o.seccomp_level);
    VmmOptions vo;
    vo.instance_id = o.id;
    vo.metrics_path = o.metrics_path;
    vo.metrics_period = std::chrono::milliseconds(o.metrics_period);
    vo.stdin_fd = STDIN_FILENO;
    vo.before_spawn = [&policy] { jail::install_seccomp(policy); };
    Vmm vmm(vo);
    vmm.loop().add(sigfd.get(), HandlerKind::exit(), interest::kReadable, [&](const ReadyEvent&) {
        signalfd_siginfo si;
        while (::read(sigfd.get(), &si, sizeof(si)) == sizeof(si)) {
        }
        vmm.shutdown("signal");
    });

    Channel<ApiRequest> requests;
    std::unique_ptr<ApiServer> api;
    if (!o.no_api) {
        api = std::make_unique<ApiServer>(o.api_socket_path, requests);
        vmm.attach_api(requests, [&api](uint64_t id, ActionResult r) { api->respond(id, std::move(r)); });
        api->start();
    }
    if (o.config_file) {
        for (const auto& action : load_config_file(*o.config_file)) {
            const ActionResult r = vmm.execute(action);
            if (!r.ok()) {
                std::fprintf(stderr, "kindling: %s: %s\n", std::string(action_name(action)).c_str(), r.body.c_str());
                if (api)
                    api->stop();
                return 1;
            }
        }
    }
    const int rc = vmm.run();
    if (api)
        api->stop();
    return rc;
}

} // namespace

int main(int argc, char** argv) {
    process_start_time();
    try {
        const LaunchOptions o = parse_args(argc, argv);
        if (o.help) {
            std::fputs(usage().c_str(), stdout);
            return 0;
        }
        return run(o);
    } catch (const Error& e) {
        std::fprintf(stderr, "kindling: %s\n", e.what());
        if (e.code() == ErrorCode::UsageError)
            std::fputs(usage().c_str(), stderr);
        return 2;
    }
}
