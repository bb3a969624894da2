#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace kindling::http {

struct Request {
    std::string method;
    std::string target;
    std::map<std::string, std::string> headers; // names lowercased
    std::string body;
    bool keep_alive = true;
};

inline constexpr size_t kMaxHeaderBytes = 8192;
inline constexpr size_t kMaxBodyBytes = 64 * 1024;

/// Incremental HTTP/1.1 request parser. Feed bytes as they arrive; each
/// complete request is handed out by next().
class Parser {
public:
    enum class State { NeedMore, Ready, Error };

    void feed(std::string_view bytes) { buf_.append(bytes); }
    /// Ready: *out holds a request and its bytes are consumed.
    State next(Request* out);
    const std::string& error() const noexcept { return error_; }
    size_t buffered() const noexcept { return buf_.size(); }

private:
    std::string buf_;
    std::string error_;
};

std::string_view reason_phrase(int status);
/// Serializes a response; a non-empty body is sent as application/json.
std::string format_response(int status, std::string_view body, bool keep_alive);

} // namespace kindling::http
