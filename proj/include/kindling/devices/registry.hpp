#pragma once

#include <array>
#include <string>
#include <string_view>

namespace kindling::devices {

enum class DeviceKind { VirtioNet, VirtioBlock, VirtioVsock, Serial, I8042 };

inline constexpr std::array<DeviceKind, 5> kAllDeviceKinds = {
    DeviceKind::VirtioNet, DeviceKind::VirtioBlock, DeviceKind::VirtioVsock, DeviceKind::Serial, DeviceKind::I8042};

std::string_view to_string(DeviceKind kind);
/// Throws UnknownDeviceKind for anything but the five supported models.
DeviceKind parse_device_kind(std::string_view name);
/// True for the kinds that take an IRQ from the virtio budget.
bool is_virtio(DeviceKind kind);

} // namespace kindling::devices
