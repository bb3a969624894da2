#include "kindling/devices/serial.hpp"

namespace kindling::devices {

namespace {
constexpr uint8_t kIerRxData = 0x01;
constexpr uint8_t kIerThrEmpty = 0x02;

constexpr uint8_t kIirNone = 0x01;
constexpr uint8_t kIirThrEmpty = 0x02;
constexpr uint8_t kIirRxData = 0x04;
constexpr uint8_t kIirFifoBits = 0xC0;

constexpr uint8_t kLcrDlab = 0x80;
constexpr uint8_t kLsrDataReady = 0x01;
constexpr uint8_t kLsrThrEmpty = 0x20;
constexpr uint8_t kLsrIdle = 0x40;

constexpr uint8_t kMcrDtr = 0x01;
constexpr uint8_t kMcrRts = 0x02;
constexpr uint8_t kMcrOut1 = 0x04;
constexpr uint8_t kMcrOut2 = 0x08;
constexpr uint8_t kMcrLoop = 0x10;

constexpr uint8_t kMsrCts = 0x10;
constexpr uint8_t kMsrDsr = 0x20;
constexpr uint8_t kMsrRi = 0x40;
constexpr uint8_t kMsrDcd = 0x80;

constexpr size_t kInputLimit = 4096;
} // namespace

SerialConsole::SerialConsole(Sink sink, std::function<void()> raise_irq, uint16_t base)
    : sink_(std::move(sink)), raise_irq_(std::move(raise_irq)), base_(base) {}

uint8_t SerialConsole::iir_locked() const {
    const uint8_t fifo = fifo_enabled_ ? kIirFifoBits : 0;
    if ((ier_ & kIerRxData) && !input_.empty())
        return fifo | kIirRxData;
    if ((ier_ & kIerThrEmpty) && thr_empty_pending_)
        return fifo | kIirThrEmpty;
    return fifo | kIirNone;
}

void SerialConsole::update_irq_locked(bool& raise) {
    raise = (iir_locked() & kIirNone) == 0;
}

uint8_t SerialConsole::read(uint16_t port) {
    bool raise = false;
    uint8_t v = 0;
    {
        std::lock_guard lock(mu_);
        switch (port - base_) {
        case 0:
            if (lcr_ & kLcrDlab) {
                v = dll_;
            } else if (!input_.empty()) {
                v = input_.front();
                input_.pop_front();
                update_irq_locked(raise);
            }
            break;
        case 1:
            v = (lcr_ & kLcrDlab) ? dlm_ : ier_;
            break;
        case 2:
            v = iir_locked();
            // Reading IIR acknowledges a transmitter-empty interrupt.
            if ((v & 0x0F) == kIirThrEmpty)
                thr_empty_pending_ = false;
            break;
        case 3:
            v = lcr_;
            break;
        case 4:
            v = mcr_;
            break;
        case 5:
            v = kLsrThrEmpty | kLsrIdle | (input_.empty() ? 0 : kLsrDataReady);
            break;
        case 6:
            if (mcr_ & kMcrLoop) {
                v = ((mcr_ & kMcrRts) ? kMsrCts : 0) | ((mcr_ & kMcrDtr) ? kMsrDsr : 0) |
                    ((mcr_ & kMcrOut1) ? kMsrRi : 0) | ((mcr_ & kMcrOut2) ? kMsrDcd : 0);
            } else {
                v = kMsrCts | kMsrDsr | kMsrDcd;
            }
            break;
        case 7:
            v = scr_;
            break;
        }
    }
    if (raise && raise_irq_)
        raise_irq_();
    return v;
}

void SerialConsole::write(uint16_t port, uint8_t value) {
    bool raise = false;
    bool emit = false;
    {
        std::lock_guard lock(mu_);
        switch (port - base_) {
        case 0:
            if (lcr_ & kLcrDlab) {
                dll_ = value;
                break;
            }
            if (mcr_ & kMcrLoop) {
                if (input_.size() < kInputLimit)
                    input_.push_back(value);
            } else {
                emit = true;
            }
            thr_empty_pending_ = true;
            update_irq_locked(raise);
            break;
        case 1:
            if (lcr_ & kLcrDlab) {
                dlm_ = value;
                break;
            }
            // Enabling the THR interrupt with an empty transmitter fires at once.
            if ((value & kIerThrEmpty) && !(ier_ & kIerThrEmpty))
                thr_empty_pending_ = true;
            ier_ = value & 0x0F;
            update_irq_locked(raise);
            break;
        case 2:
            fifo_enabled_ = value & 0x01;
            if (value & 0x02)
                input_.clear();
            break;
        case 3:
            lcr_ = value;
            break;
        case 4:
            mcr_ = value & 0x1F;
            break;
        case 7:
            scr_ = value;
            break;
        default:
            break;
        }
        // Emit under the lock so concurrent vCPUs keep byte order.
        if (emit && sink_)
            sink_({&value, 1});
    }
    if (raise && raise_irq_)
        raise_irq_();
}

void SerialConsole::enqueue_input(std::span<const uint8_t> bytes) {
    bool raise = false;
    {
        std::lock_guard lock(mu_);
        for (uint8_t b : bytes)
            if (input_.size() < kInputLimit)
                input_.push_back(b);
        update_irq_locked(raise);
    }
    if (raise && raise_irq_)
        raise_irq_();
}

size_t SerialConsole::input_pending() const {
    std::lock_guard lock(mu_);
    return input_.size();
}

} // namespace kindling::devices
