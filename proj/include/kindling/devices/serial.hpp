#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <span>

namespace kindling::devices {

inline constexpr uint16_t kCom1Base = 0x3F8;
inline constexpr uint32_t kCom1Irq = 4;

/// 16550A UART on eight I/O ports. Safe to call from any thread.
class SerialConsole {
public:
    using Sink = std::function<void(std::span<const uint8_t>)>;

    SerialConsole(Sink sink, std::function<void()> raise_irq, uint16_t base = kCom1Base);

    uint16_t base() const noexcept { return base_; }
    bool owns(uint16_t port) const noexcept { return port >= base_ && port < base_ + 8; }

    uint8_t read(uint16_t port);
    void write(uint16_t port, uint8_t value);

    /// Host input for the guest (e.g. stdin).
    void enqueue_input(std::span<const uint8_t> bytes);
    size_t input_pending() const;

private:
    uint8_t iir_locked() const;
    void update_irq_locked(bool& raise);

    mutable std::mutex mu_;
    Sink sink_;
    std::function<void()> raise_irq_;
    uint16_t base_;

    std::deque<uint8_t> input_;
    uint8_t ier_ = 0;
    uint8_t lcr_ = 0x03;
    uint8_t mcr_ = 0x08;
    uint8_t scr_ = 0;
    uint8_t dll_ = 0x0C;
    uint8_t dlm_ = 0;
    bool fifo_enabled_ = false;
    bool thr_empty_pending_ = false;
};

} // namespace kindling::devices
