#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>

namespace kindling::virtio {

/// Hands out one dedicated interrupt line per device from a fixed budget of
/// ten legacy lines. Lines are never shared.
class IrqAllocator {
public:
    using Sink = std::function<void(uint32_t line)>;

    static constexpr uint32_t kFirstLine = 5;
    static constexpr uint32_t kBudget = 10;

    explicit IrqAllocator(Sink sink = {}) : sink_(std::move(sink)) {}

    /// Throws IrqExhausted when all ten lines are taken, DuplicateDevice if
    /// the device already holds one.
    uint32_t allocate(const std::string& device_id);
    void release(const std::string& device_id);

    /// Raises the device's line. Throws DeviceUnregistered.
    void assert_irq(const std::string& device_id) const;

    std::optional<uint32_t> line_of(const std::string& device_id) const;
    size_t allocated() const noexcept { return lines_.size(); }

private:
    Sink sink_;
    std::map<std::string, uint32_t> lines_;
};

} // namespace kindling::virtio
