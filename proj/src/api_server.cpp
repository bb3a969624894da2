#include "kindling/api_server.hpp"

#include <sys/epoll.h>
#include <sys/socket.h>
#include <sys/un.h>

#include <cstring>

#include "kindling/error.hpp"

namespace kindling {

using nlohmann::json;

namespace {

constexpr std::string_view kDrivesPrefix = "/drives/";
constexpr std::string_view kNetPrefix = "/network-interfaces/";

RouteResult fail(int status, std::string_view why) { return {std::nullopt, false, ActionResult::fault(status, why)}; }

} // namespace

RouteResult route(std::string_view method, std::string_view target, std::string_view body) {
    if (auto q = target.find('?'); q != std::string_view::npos)
        target = target.substr(0, q);
    if (method == "GET") {
        if (target == "/")
            return {std::nullopt, true, std::nullopt};
        return fail(404, "no such route");
    }
    if (method != "PUT")
        return fail(404, "no such route");

    // Path-keyed resources carry their id in the body as well; they must agree.
    std::string path_id;
    enum { Machine, Boot, Drive, Net, Vsock, Actions } which;
    if (target == "/machine-config") {
        which = Machine;
    } else if (target == "/boot-source") {
        which = Boot;
    } else if (target == "/vsock") {
        which = Vsock;
    } else if (target == "/actions") {
        which = Actions;
    } else if (target.starts_with(kDrivesPrefix) && target.size() > kDrivesPrefix.size()) {
        which = Drive;
        path_id = target.substr(kDrivesPrefix.size());
    } else if (target.starts_with(kNetPrefix) && target.size() > kNetPrefix.size()) {
        which = Net;
        path_id = target.substr(kNetPrefix.size());
    } else {
        return fail(404, "no such route");
    }
    if (path_id.find('/') != std::string::npos)
        return fail(404, "no such route");

    json j = json::parse(body, nullptr, false);
    if (j.is_discarded())
        return fail(400, "body is not valid JSON");
    try {
        switch (which) {
        case Machine:
            return {parse_machine_config(j)};
        case Boot:
            return {parse_boot_source(j)};
        case Vsock:
            return {parse_vsock(j)};
        case Actions:
            return {parse_action_type(j)};
        case Drive: {
            DriveConfig d = parse_drive(j);
            if (d.drive_id != path_id)
                return fail(400, "drive_id does not match the path");
            return {std::move(d)};
        }
        case Net: {
            NetConfig n = parse_net(j);
            if (n.iface_id != path_id)
                return fail(400, "iface_id does not match the path");
            return {std::move(n)};
        }
        }
    } catch (const Error& e) {
        return fail(400, e.what());
    }
    return fail(404, "no such route");
}

std::string instance_info_body(std::string_view id, InstanceState state) {
    return json{{"id", id}, {"state", to_string(state)}}.dump();
}

ApiServer::ApiServer(std::string socket_path, Channel<ApiRequest>& to_vmm)
    : path_(std::move(socket_path)), to_vmm_(to_vmm) {
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path_.empty() || path_.size() >= sizeof(addr.sun_path))
        throw Error(ErrorCode::HostRejected, "bad API socket path: " + path_);
    std::memcpy(addr.sun_path, path_.data(), path_.size());
    listener_.reset(::socket(AF_UNIX, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
    if (!listener_)
        throw_errno(ErrorCode::HostRejected, "API socket");
    ::unlink(path_.c_str());
    if (::bind(listener_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listener_.get(), 64) != 0)
        throw_errno(ErrorCode::HostRejected, "bind API socket " + path_);

    loop_.add(listener_.get(), HandlerKind::action_request(), interest::kReadable, [this](const ReadyEvent&) {
        ++counters_.dispatches;
        on_accept();
    });
    loop_.add(mailbox_.fd(), HandlerKind::action_request(), interest::kReadable, [this](const ReadyEvent&) {
        ++counters_.dispatches;
        on_mailbox();
    });
    loop_.add(stop_evt_.fd(), HandlerKind::exit(), interest::kReadable, [this](const ReadyEvent&) {
        ++counters_.dispatches;
        loop_.stop();
    });
}

ApiServer::~ApiServer() { stop(); }

void ApiServer::start() {
    thread_ = std::thread([this] { run(); });
}

void ApiServer::stop() {
    if (stopped_)
        return;
    stopped_ = true;
    stop_evt_.signal();
    if (thread_.joinable())
        thread_.join();
    conns_.clear();
    ::unlink(path_.c_str());
}

void ApiServer::respond(uint64_t id, ActionResult result) { mailbox_.push({id, std::move(result)}); }

void ApiServer::run() {
    while (!loop_.stopped())
        loop_.run_once(-1);
}

void ApiServer::on_accept() {
    for (;;) {
        const int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
        if (fd < 0)
            return;
        ++counters_.connections;
        // The token is only known after add(), so the handler looks it up from the event.
        const Token token = loop_.add(fd, HandlerKind::action_request(), interest::kReadable | interest::kWritable,
                                      [this](const ReadyEvent& ev) {
                                          ++counters_.dispatches;
                                          on_connection(ev.token, ev.events);
                                      });
        conns_[token].fd.reset(fd);
    }
}

void ApiServer::on_connection(Token token, uint32_t events) {
    auto it = conns_.find(token);
    if (it == conns_.end())
        return;
    Connection& c = it->second;
    if (events & EPOLLOUT)
        flush(token);
    if (!conns_.count(token))
        return;
    if (events & (EPOLLIN | EPOLLRDHUP | EPOLLHUP | EPOLLERR)) {
        char buf[4096];
        for (;;) {
            const ssize_t n = ::recv(c.fd.get(), buf, sizeof(buf), 0);
            if (n > 0) {
                c.parser.feed({buf, static_cast<size_t>(n)});
                continue;
            }
            if (n == 0 || (errno != EAGAIN && errno != EINTR))
                c.peer_closed = true;
            if (n < 0 && errno == EINTR)
                continue;
            break;
        }
    }
    advance(token);
}

void ApiServer::advance(Token token) {
    auto it = conns_.find(token);
    if (it == conns_.end())
        return;
    Connection& c = it->second;
    // One request in flight per connection; later pipelined ones wait in the parser.
    while (!c.awaiting && c.keep_alive) {
        http::Request req;
        const auto state = c.parser.next(&req);
        if (state == http::Parser::State::NeedMore)
            break;
        if (state == http::Parser::State::Error) {
            ++counters_.rejected;
            send(token, ActionResult::fault(400, c.parser.error()), false);
            return;
        }
        RouteResult r = route(req.method, req.target, req.body);
        if (r.error) {
            ++counters_.rejected;
            send(token, *r.error, req.keep_alive);
            if (!conns_.count(token))
                return;
            continue;
        }
        const uint64_t id = next_id_++;
        pending_[id] = token;
        c.awaiting = true;
        c.keep_alive = req.keep_alive;
        ++counters_.requests;
        to_vmm_.push(ApiRequest{id, std::move(r.action)});
    }
    if (c.peer_closed && !c.awaiting && c.out.empty())
        close_connection(token);
}

void ApiServer::send(Token token, const ActionResult& r, bool keep_alive) {
    Connection& c = conns_.at(token);
    c.out += http::format_response(r.status, r.body, keep_alive);
    c.keep_alive = c.keep_alive && keep_alive;
    ++counters_.responses;
    flush(token);
}

void ApiServer::flush(Token token) {
    Connection& c = conns_.at(token);
    while (!c.out.empty()) {
        const ssize_t n = ::send(c.fd.get(), c.out.data(), c.out.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            if (errno == EAGAIN)
                return; // EPOLLOUT will resume
            c.out.clear();
            c.peer_closed = true;
            break;
        }
        c.out.erase(0, static_cast<size_t>(n));
    }
    if (!c.keep_alive)
        close_connection(token);
}

void ApiServer::close_connection(Token token) {
    auto it = conns_.find(token);
    if (it == conns_.end())
        return;
    loop_.remove(token);
    conns_.erase(it);
}

void ApiServer::on_mailbox() {
    for (auto& [id, result] : mailbox_.drain()) {
        auto p = pending_.find(id);
        if (p == pending_.end())
            continue;
        const Token token = p->second;
        pending_.erase(p);
        auto it = conns_.find(token);
        if (it == conns_.end()) {
            ++counters_.orphaned;
            continue;
        }
        it->second.awaiting = false;
        send(token, result, it->second.keep_alive);
        advance(token);
    }
}

} // namespace kindling
