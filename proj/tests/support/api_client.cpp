#include "api_client.hpp"

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cstring>

#include "httplib.h"

namespace kindling::test {

struct ApiClient::Impl {
    httplib::Client cli;
    explicit Impl(const std::string& path) : cli(path) {
        cli.set_address_family(AF_UNIX);
        cli.set_keep_alive(true);
        cli.set_read_timeout(10, 0);
    }
};

ApiClient::ApiClient(std::string socket_path) : impl_(new Impl(socket_path)) {}
ApiClient::~ApiClient() { delete impl_; }

HttpReply ApiClient::put(const std::string& path, const nlohmann::json& body) { return put_raw(path, body.dump()); }

HttpReply ApiClient::put_raw(const std::string& path, const std::string& body) {
    auto res = impl_->cli.Put(path, body, "application/json");
    if (!res)
        return {};
    return {res->status, res->body};
}

HttpReply ApiClient::get(const std::string& path) {
    auto res = impl_->cli.Get(path);
    if (!res)
        return {};
    return {res->status, res->body};
}

int connect_unix(const std::string& path) {
    const int fd = ::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd);
        return -1;
    }
    return fd;
}

std::string raw_exchange(const std::string& socket_path, const std::string& bytes) {
    const int fd = connect_unix(socket_path);
    if (fd < 0)
        return {};
    timeval tv{5, 0};
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    ::send(fd, bytes.data(), bytes.size(), MSG_NOSIGNAL);
    ::shutdown(fd, SHUT_WR);
    std::string out;
    char buf[4096];
    ssize_t n;
    while ((n = ::recv(fd, buf, sizeof(buf), 0)) > 0)
        out.append(buf, static_cast<size_t>(n));
    ::close(fd);
    return out;
}

} // namespace kindling::test
