#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>

namespace kindling::devices {

inline constexpr uint16_t kI8042Data = 0x60;
inline constexpr uint16_t kI8042Command = 0x64;
inline constexpr uint32_t kI8042Irq = 1;

/// Just enough of a PS/2 controller for a guest to probe it, to reboot
/// through it, and to receive ctrl-alt-del.
class KeyboardController {
public:
    KeyboardController(std::function<void()> reset_event, std::function<void()> raise_irq);

    bool owns(uint16_t port) const noexcept { return port == kI8042Data || port == kI8042Command; }
    uint8_t read(uint16_t port);
    void write(uint16_t port, uint8_t value);

    /// Queues the ctrl, alt, del make codes and interrupts the guest.
    void inject_ctrl_alt_del();

    uint64_t resets() const;

private:
    void push_locked(uint8_t b);

    mutable std::mutex mu_;
    std::function<void()> reset_event_;
    std::function<void()> raise_irq_;
    std::deque<uint8_t> out_;
    uint8_t ctr_ = 0x45; // kbd interrupt, system flag, translation
    uint8_t pending_cmd_ = 0;
    uint64_t resets_ = 0;
};

} // namespace kindling::devices
