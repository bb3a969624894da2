#include "kindling/devices/i8042.hpp"

namespace kindling::devices {

namespace {
constexpr uint8_t kStatusOutputFull = 0x01;
constexpr uint8_t kStatusSystem = 0x04;
constexpr uint8_t kStatusCommand = 0x08;

constexpr uint8_t kCmdReadCtr = 0x20;
constexpr uint8_t kCmdWriteCtr = 0x60;
constexpr uint8_t kCmdSelfTest = 0xAA;
constexpr uint8_t kCmdKbdTest = 0xAB;
constexpr uint8_t kCmdWriteOutPort = 0xD1;
constexpr uint8_t kCmdPulseReset = 0xFE;

constexpr uint8_t kAck = 0xFA;
constexpr size_t kBufferLimit = 16;

constexpr uint8_t kScanCtrl = 0x14;
constexpr uint8_t kScanAlt = 0x11;
constexpr uint8_t kScanDel[] = {0xE0, 0x71};
} // namespace

KeyboardController::KeyboardController(std::function<void()> reset_event, std::function<void()> raise_irq)
    : reset_event_(std::move(reset_event)), raise_irq_(std::move(raise_irq)) {}

void KeyboardController::push_locked(uint8_t b) {
    if (out_.size() < kBufferLimit)
        out_.push_back(b);
}

uint8_t KeyboardController::read(uint16_t port) {
    bool raise = false;
    uint8_t v = 0;
    {
        std::lock_guard lock(mu_);
        if (port == kI8042Command) {
            v = kStatusSystem | (pending_cmd_ ? kStatusCommand : 0) | (out_.empty() ? 0 : kStatusOutputFull);
        } else if (!out_.empty()) {
            v = out_.front();
            out_.pop_front();
            raise = !out_.empty() && (ctr_ & 0x01);
        }
    }
    if (raise && raise_irq_)
        raise_irq_();
    return v;
}

void KeyboardController::write(uint16_t port, uint8_t value) {
    bool reset = false;
    {
        std::lock_guard lock(mu_);
        if (port == kI8042Command) {
            pending_cmd_ = 0;
            switch (value) {
            case kCmdReadCtr:
                push_locked(ctr_);
                break;
            case kCmdWriteCtr:
            case kCmdWriteOutPort:
                pending_cmd_ = value;
                break;
            case kCmdSelfTest:
                push_locked(0x55);
                break;
            case kCmdKbdTest:
                push_locked(0x00);
                break;
            case kCmdPulseReset:
                ++resets_;
                reset = true;
                break;
            default:
                break;
            }
        } else if (pending_cmd_ == kCmdWriteCtr) {
            ctr_ = value;
            pending_cmd_ = 0;
        } else if (pending_cmd_ == kCmdWriteOutPort) {
            pending_cmd_ = 0; // bit 0 clear would reset; guests use 0xFE instead
        } else {
            // Any byte sent to the keyboard itself is acknowledged.
            out_.clear();
            push_locked(kAck);
            if (value == 0xFF)
                push_locked(0xAA);
        }
    }
    if (reset && reset_event_)
        reset_event_();
}

void KeyboardController::inject_ctrl_alt_del() {
    {
        std::lock_guard lock(mu_);
        push_locked(kScanCtrl);
        push_locked(kScanAlt);
        for (uint8_t b : kScanDel)
            push_locked(b);
    }
    if (raise_irq_)
        raise_irq_();
}

uint64_t KeyboardController::resets() const {
    std::lock_guard lock(mu_);
    return resets_;
}

} // namespace kindling::devices
