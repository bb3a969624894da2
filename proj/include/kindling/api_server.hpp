#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>

#include "kindling/event_loop.hpp"
#include "kindling/fd.hpp"
#include "kindling/http.hpp"
#include "kindling/vmm_action.hpp"

namespace kindling {

/// A parsed request on its way to the VMM thread. No action means GET /.
struct ApiRequest {
    uint64_t id = 0;
    std::optional<VmmAction> action;
};

struct RouteResult {
    std::optional<VmmAction> action;
    bool instance_info = false;
    std::optional<ActionResult> error; // set when the request never reaches the VMM
};

/// Maps method, path and body to an action.
RouteResult route(std::string_view method, std::string_view target, std::string_view body);

/// Body of GET /.
std::string instance_info_body(std::string_view id, InstanceState state);

struct ApiCounters {
    std::atomic<uint64_t> connections{0};
    std::atomic<uint64_t> requests{0};     // forwarded to the VMM
    std::atomic<uint64_t> responses{0};    // written back, any status
    std::atomic<uint64_t> rejected{0};     // answered by the API thread itself
    std::atomic<uint64_t> orphaned{0};     // VMM answers for closed connections
    std::atomic<uint64_t> dispatches{0};   // API loop handler invocations
};

/// HTTP/1.1 server on a Unix stream socket, running on its own thread with
/// its own epoll loop. Requests are forwarded to the VMM over `to_vmm`; the
/// VMM answers each through respond().
class ApiServer {
public:
    /// Binds the socket (replacing a stale one). Throws HostRejected.
    ApiServer(std::string socket_path, Channel<ApiRequest>& to_vmm);
    ~ApiServer();
    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    void start();
    /// Stops the thread and removes the socket file. Idempotent.
    void stop();

    /// Thread-safe. Delivers the VMM's answer for request id.
    void respond(uint64_t id, ActionResult result);

    const std::string& socket_path() const noexcept { return path_; }
    const ApiCounters& counters() const noexcept { return counters_; }

private:
    struct Connection {
        UniqueFd fd;
        http::Parser parser;
        std::string out;
        bool awaiting = false;
        bool keep_alive = true;
        bool peer_closed = false;
    };

    void run();
    void on_accept();
    void on_connection(Token token, uint32_t events);
    void advance(Token token);
    void send(Token token, const ActionResult& r, bool keep_alive);
    void flush(Token token);
    void close_connection(Token token);
    void on_mailbox();

    std::string path_;
    Channel<ApiRequest>& to_vmm_;
    UniqueFd listener_;
    EventLoop loop_;
    EventFd stop_evt_;
    Channel<std::pair<uint64_t, ActionResult>> mailbox_;
    std::unordered_map<Token, Connection> conns_;
    std::unordered_map<uint64_t, Token> pending_;
    uint64_t next_id_ = 1;
    std::thread thread_;
    bool stopped_ = false;
    ApiCounters counters_;
};

} // namespace kindling
