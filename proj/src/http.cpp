#include "kindling/http.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

namespace kindling::http {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t'))
        s.remove_suffix(1);
    return s;
}

} // namespace

Parser::State Parser::next(Request* out) {
    const size_t end = buf_.find("\r\n\r\n");
    if (end == std::string::npos) {
        if (buf_.size() > kMaxHeaderBytes) {
            error_ = "header section too large";
            return State::Error;
        }
        return State::NeedMore;
    }
    if (end > kMaxHeaderBytes) {
        error_ = "header section too large";
        return State::Error;
    }
    std::string_view head(buf_.data(), end);
    const size_t line_end = head.find("\r\n");
    std::string_view line = head.substr(0, line_end);

    Request req;
    const size_t sp1 = line.find(' ');
    const size_t sp2 = sp1 == std::string_view::npos ? sp1 : line.find(' ', sp1 + 1);
    if (sp2 == std::string_view::npos || line.find(' ', sp2 + 1) != std::string_view::npos) {
        error_ = "malformed request line";
        return State::Error;
    }
    req.method = line.substr(0, sp1);
    req.target = line.substr(sp1 + 1, sp2 - sp1 - 1);
    const std::string_view version = line.substr(sp2 + 1);
    if (version != "HTTP/1.1" && version != "HTTP/1.0") {
        error_ = "unsupported HTTP version";
        return State::Error;
    }
    if (req.method.empty() || req.target.empty() || req.target.front() != '/') {
        error_ = "malformed request line";
        return State::Error;
    }
    req.keep_alive = version == "HTTP/1.1";

    size_t pos = line_end == std::string_view::npos ? head.size() : line_end + 2;
    while (pos < head.size()) {
        size_t eol = head.find("\r\n", pos);
        if (eol == std::string_view::npos)
            eol = head.size();
        std::string_view h = head.substr(pos, eol - pos);
        const size_t colon = h.find(':');
        if (colon == std::string_view::npos || colon == 0) {
            error_ = "malformed header";
            return State::Error;
        }
        req.headers[lower(trim(h.substr(0, colon)))] = std::string(trim(h.substr(colon + 1)));
        pos = eol + 2;
    }

    if (req.headers.count("transfer-encoding")) {
        error_ = "chunked bodies are not supported";
        return State::Error;
    }
    size_t body_len = 0;
    if (auto it = req.headers.find("content-length"); it != req.headers.end()) {
        const std::string& v = it->second;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), body_len);
        if (ec != std::errc{} || p != v.data() + v.size()) {
            error_ = "bad Content-Length";
            return State::Error;
        }
        if (body_len > kMaxBodyBytes) {
            error_ = "body too large";
            return State::Error;
        }
    }
    if (auto it = req.headers.find("connection"); it != req.headers.end()) {
        const std::string v = lower(it->second);
        if (v == "close")
            req.keep_alive = false;
        else if (v == "keep-alive")
            req.keep_alive = true;
    }
    const size_t total = end + 4 + body_len;
    if (buf_.size() < total)
        return State::NeedMore;
    req.body = buf_.substr(end + 4, body_len);
    buf_.erase(0, total);
    *out = std::move(req);
    return State::Ready;
}

std::string_view reason_phrase(int status) {
    switch (status) {
    case 200:
        return "OK";
    case 204:
        return "No Content";
    case 400:
        return "Bad Request";
    case 404:
        return "Not Found";
    case 405:
        return "Method Not Allowed";
    case 409:
        return "Conflict";
    case 500:
        return "Internal Server Error";
    case 503:
        return "Service Unavailable";
    default:
        return "Unknown";
    }
}

std::string format_response(int status, std::string_view body, bool keep_alive) {
    std::string out = "HTTP/1.1 " + std::to_string(status) + " " + std::string(reason_phrase(status)) + "\r\n";
    if (!body.empty())
        out += "Content-Type: application/json\r\n";
    if (status != 204)
        out += "Content-Length: " + std::to_string(body.size()) + "\r\n";
    out += keep_alive ? "Connection: keep-alive\r\n" : "Connection: close\r\n";
    out += "\r\n";
    out += body;
    return out;
}

} // namespace kindling::http
