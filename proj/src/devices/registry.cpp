#include "kindling/devices/registry.hpp"

#include "kindling/error.hpp"

namespace kindling::devices {

std::string_view to_string(DeviceKind kind) {
    switch (kind) {
    case DeviceKind::VirtioNet:
        return "virtio-net";
    case DeviceKind::VirtioBlock:
        return "virtio-blk";
    case DeviceKind::VirtioVsock:
        return "virtio-vsock";
    case DeviceKind::Serial:
        return "serial";
    case DeviceKind::I8042:
        return "i8042";
    }
    return "?";
}

DeviceKind parse_device_kind(std::string_view name) {
    for (DeviceKind k : kAllDeviceKinds)
        if (to_string(k) == name)
            return k;
    throw Error(ErrorCode::UnknownDeviceKind, "unsupported device kind: " + std::string(name));
}

bool is_virtio(DeviceKind kind) {
    return kind == DeviceKind::VirtioNet || kind == DeviceKind::VirtioBlock || kind == DeviceKind::VirtioVsock;
}

} // namespace kindling::devices
