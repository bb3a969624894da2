#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "kindling/fd.hpp"

namespace kindling {

using Token = uint64_t;

enum class HandlerTag { Exit, Stdin, DeviceHandler, VmmActionRequest, WriteMetrics };

struct HandlerKind {
    HandlerTag tag = HandlerTag::Exit;
    uint32_t device_id = 0; // DeviceHandler only

    static HandlerKind exit() { return {HandlerTag::Exit}; }
    static HandlerKind stdin_input() { return {HandlerTag::Stdin}; }
    static HandlerKind device(uint32_t id) { return {HandlerTag::DeviceHandler, id}; }
    static HandlerKind action_request() { return {HandlerTag::VmmActionRequest}; }
    static HandlerKind write_metrics() { return {HandlerTag::WriteMetrics}; }
    bool operator==(const HandlerKind&) const = default;
};

std::string to_string(const HandlerKind& kind);

namespace interest {
inline constexpr uint32_t kReadable = 1;
inline constexpr uint32_t kWritable = 2;
} // namespace interest

struct ReadyEvent {
    Token token;
    int fd;
    HandlerKind kind;
    uint32_t events; // epoll mask
};

struct LoopCounters {
    uint64_t waits = 0;          // returns from the readiness wait
    uint64_t ready_events = 0;
    uint64_t lookups = 0;        // dispatch-table lookups
    uint64_t dispatches = 0;     // handler invocations
    uint64_t unknown_tokens = 0;
};

/// Edge-triggered epoll loop with a token-keyed dispatch table.
///
/// Not thread-safe: every call happens on the loop's thread. A handler may
/// remove registrations (including its own); events already fetched for a
/// removed token are dropped and counted as unknown.
class EventLoop {
public:
    using Handler = std::function<void(const ReadyEvent&)>;

    EventLoop();

    /// Throws DuplicateRegistration if fd is already registered.
    Token add(int fd, HandlerKind kind, uint32_t interest_mask, Handler handler);
    /// Throws UnknownToken.
    void remove(Token token);
    /// Removes whatever registration holds fd; no-op if none.
    void remove_fd(int fd);

    /// Waits up to timeout (negative: forever) and dispatches what is ready.
    /// Returns the number of events fetched.
    size_t run_once(int timeout_ms);
    /// Runs until stop() is called from a handler.
    void run();
    void stop() noexcept { stopped_ = true; }
    bool stopped() const noexcept { return stopped_; }

    int epoll_fd() const noexcept { return epfd_.get(); }
    size_t size() const noexcept { return table_.size(); }
    bool has_fd(int fd) const { return by_fd_.count(fd) != 0; }
    const LoopCounters& counters() const noexcept { return counters_; }

private:
    struct Entry {
        int fd;
        HandlerKind kind;
        uint32_t interest;
        Handler handler;
    };

    UniqueFd epfd_;
    Token next_token_ = 1;
    std::unordered_map<Token, Entry> table_;
    std::unordered_map<int, Token> by_fd_;
    LoopCounters counters_;
    bool stopped_ = false;
};

/// Nonblocking eventfd used as a wakeup edge.
class EventFd {
public:
    EventFd();
    int fd() const noexcept { return fd_.get(); }
    void signal() const;
    /// Clears the counter; returns its value (0 if nothing was pending).
    uint64_t consume() const;

private:
    UniqueFd fd_;
};

/// Periodic timerfd.
class IntervalTimer {
public:
    explicit IntervalTimer(std::chrono::milliseconds period);
    int fd() const noexcept { return fd_.get(); }
    uint64_t consume() const;

private:
    UniqueFd fd_;
};

/// Multi-producer, single-consumer queue paired with an eventfd so the
/// consumer's epoll loop can watch it.
template <typename T>
class Channel {
public:
    void push(T item) {
        {
            std::lock_guard lock(mu_);
            items_.push_back(std::move(item));
        }
        wake_.signal();
    }

    /// Takes everything queued. Clear the wakeup first: anything pushed after
    /// this point either lands in this batch or raises a fresh edge.
    std::deque<T> drain() {
        wake_.consume();
        std::lock_guard lock(mu_);
        return std::exchange(items_, {});
    }

    int fd() const noexcept { return wake_.fd(); }
    size_t size() const {
        std::lock_guard lock(mu_);
        return items_.size();
    }

private:
    mutable std::mutex mu_;
    std::deque<T> items_;
    EventFd wake_;
};

} // namespace kindling
