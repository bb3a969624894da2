#include "kindling/event_loop.hpp"

#include <sys/epoll.h>
#include <sys/eventfd.h>
#include <sys/timerfd.h>

#include <cerrno>

#include "kindling/error.hpp"

namespace kindling {

std::string to_string(const HandlerKind& kind) {
    switch (kind.tag) {
    case HandlerTag::Exit:
        return "Exit";
    case HandlerTag::Stdin:
        return "Stdin";
    case HandlerTag::DeviceHandler:
        return "DeviceHandler(" + std::to_string(kind.device_id) + ")";
    case HandlerTag::VmmActionRequest:
        return "VMMActionRequest";
    case HandlerTag::WriteMetrics:
        return "WriteMetrics";
    }
    return "?";
}

EventLoop::EventLoop() : epfd_(::epoll_create1(EPOLL_CLOEXEC)) {
    if (!epfd_)
        throw_errno(ErrorCode::HostRejected, "epoll_create1");
}

Token EventLoop::add(int fd, HandlerKind kind, uint32_t interest_mask, Handler handler) {
    if (by_fd_.count(fd))
        throw Error(ErrorCode::DuplicateRegistration, "fd " + std::to_string(fd) + " already registered");
    const Token token = next_token_++;
    epoll_event ev{};
    ev.events = EPOLLET | EPOLLRDHUP;
    if (interest_mask & interest::kReadable)
        ev.events |= EPOLLIN;
    if (interest_mask & interest::kWritable)
        ev.events |= EPOLLOUT;
    ev.data.u64 = token;
    if (::epoll_ctl(epfd_.get(), EPOLL_CTL_ADD, fd, &ev) != 0)
        throw_errno(errno == EEXIST ? ErrorCode::DuplicateRegistration : ErrorCode::HostRejected,
                    "epoll_ctl add fd " + std::to_string(fd));
    table_.emplace(token, Entry{fd, kind, interest_mask, std::move(handler)});
    by_fd_[fd] = token;
    return token;
}

void EventLoop::remove(Token token) {
    auto it = table_.find(token);
    if (it == table_.end())
        throw Error(ErrorCode::UnknownToken, "token " + std::to_string(token) + " not registered");
    // The fd may already be closed, in which case the kernel dropped it.
    ::epoll_ctl(epfd_.get(), EPOLL_CTL_DEL, it->second.fd, nullptr);
    by_fd_.erase(it->second.fd);
    table_.erase(it);
}

void EventLoop::remove_fd(int fd) {
    if (auto it = by_fd_.find(fd); it != by_fd_.end())
        remove(it->second);
}

size_t EventLoop::run_once(int timeout_ms) {
    epoll_event events[64];
    int n;
    do {
        n = ::epoll_wait(epfd_.get(), events, 64, timeout_ms);
    } while (n < 0 && errno == EINTR);
    if (n < 0)
        throw_errno(ErrorCode::HostRejected, "epoll_wait");
    ++counters_.waits;
    counters_.ready_events += static_cast<uint64_t>(n);
    for (int i = 0; i < n; ++i) {
        const Token token = events[i].data.u64;
        ++counters_.lookups;
        auto it = table_.find(token);
        if (it == table_.end()) {
            ++counters_.unknown_tokens;
            continue;
        }
        // Copy out: the handler may remove its own entry.
        const ReadyEvent ev{token, it->second.fd, it->second.kind, events[i].events};
        Handler handler = it->second.handler;
        ++counters_.dispatches;
        handler(ev);
    }
    return static_cast<size_t>(n);
}

void EventLoop::run() {
    stopped_ = false;
    while (!stopped_)
        run_once(-1);
}

EventFd::EventFd() : fd_(::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC)) {
    if (!fd_)
        throw_errno(ErrorCode::HostRejected, "eventfd");
}

void EventFd::signal() const {
    const uint64_t one = 1;
    while (::write(fd_.get(), &one, sizeof(one)) < 0 && errno == EINTR) {
    }
}

uint64_t EventFd::consume() const {
    uint64_t v = 0;
    while (::read(fd_.get(), &v, sizeof(v)) < 0) {
        if (errno != EINTR)
            return 0;
    }
    return v;
}

IntervalTimer::IntervalTimer(std::chrono::milliseconds period)
    : fd_(::timerfd_create(CLOCK_MONOTONIC, TFD_NONBLOCK | TFD_CLOEXEC)) {
    if (!fd_)
        throw_errno(ErrorCode::HostRejected, "timerfd_create");
    itimerspec spec{};
    spec.it_interval.tv_sec = period.count() / 1000;
    spec.it_interval.tv_nsec = (period.count() % 1000) * 1000000;
    spec.it_value = spec.it_interval;
    if (::timerfd_settime(fd_.get(), 0, &spec, nullptr) != 0)
        throw_errno(ErrorCode::HostRejected, "timerfd_settime");
}

uint64_t IntervalTimer::consume() const {
    uint64_t v = 0;
    if (::read(fd_.get(), &v, sizeof(v)) < 0)
        return 0;
    return v;
}

} // namespace kindling
