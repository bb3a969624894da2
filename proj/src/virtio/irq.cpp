#include "kindling/virtio/irq.hpp"

#include <set>

#include "kindling/error.hpp"

namespace kindling::virtio {

uint32_t IrqAllocator::allocate(const std::string& device_id) {
    if (lines_.contains(device_id))
        throw Error(ErrorCode::DuplicateDevice, "device '" + device_id + "' already has an IRQ");
    if (lines_.size() >= kBudget)
        throw Error(ErrorCode::IrqExhausted, "all " + std::to_string(kBudget) +
                                                 " device interrupt lines are in use; cannot add '" +
                                                 device_id + "'");
    std::set<uint32_t> used;
    for (const auto& [id, line] : lines_)
        used.insert(line);
    uint32_t line = kFirstLine;
    while (used.contains(line))
        ++line;
    lines_.emplace(device_id, line);
    return line;
}

void IrqAllocator::release(const std::string& device_id) { lines_.erase(device_id); }

void IrqAllocator::assert_irq(const std::string& device_id) const {
    auto it = lines_.find(device_id);
    if (it == lines_.end())
        throw Error(ErrorCode::DeviceUnregistered, "device '" + device_id + "' has no IRQ");
    if (sink_)
        sink_(it->second);
}

std::optional<uint32_t> IrqAllocator::line_of(const std::string& device_id) const {
    auto it = lines_.find(device_id);
    if (it == lines_.end())
        return std::nullopt;
    return it->second;
}

} // namespace kindling::virtio
