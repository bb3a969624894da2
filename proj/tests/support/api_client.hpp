#pragma once

#include <string>

#include "json.hpp"

namespace kindling::test {

struct HttpReply {
    int status = 0; // 0: transport failure
    std::string body;
};

/// Minimal client for the monitor's Unix-socket API.
class ApiClient {
public:
    explicit ApiClient(std::string socket_path);
    ~ApiClient();
    HttpReply put(const std::string& path, const nlohmann::json& body);
    HttpReply put_raw(const std::string& path, const std::string& body);
    HttpReply get(const std::string& path);

private:
    struct Impl;
    Impl* impl_;
};

/// Writes raw bytes to the socket, half-closes, and returns everything read back.
std::string raw_exchange(const std::string& socket_path, const std::string& bytes);

/// Connects and returns the fd, or -1.
int connect_unix(const std::string& path);

} // namespace kindling::test
