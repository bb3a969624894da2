#include "kindling/error.hpp"

#include <cerrno>
#include <cstring>

namespace kindling {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::OverlappingRegions: return "OverlappingRegions";
    case ErrorCode::ZeroSizeRegion: return "ZeroSizeRegion";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::CrossesRegionBoundary: return "CrossesRegionBoundary";
    case ErrorCode::HypervisorUnavailable: return "HypervisorUnavailable";
    case ErrorCode::HostRejected: return "HostRejected";
    case ErrorCode::AlreadyRegistered: return "AlreadyRegistered";
    case ErrorCode::DuplicateIndex: return "DuplicateIndex";
    case ErrorCode::WrongThread: return "WrongThread";
    case ErrorCode::VmAlreadyExists: return "VmAlreadyExists";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedProtocolVersion: return "UnsupportedProtocolVersion";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::ImageTooLarge: return "ImageTooLarge";
    case ErrorCode::CmdlineTooLong: return "CmdlineTooLong";
    case ErrorCode::MalformedChain: return "MalformedChain";
    case ErrorCode::UnknownHead: return "UnknownHead";
    case ErrorCode::IrqExhausted: return "IrqExhausted";
    case ErrorCode::DeviceUnregistered: return "DeviceUnregistered";
    case ErrorCode::DuplicateDevice: return "DuplicateDevice";
    case ErrorCode::InvalidQueue: return "InvalidQueue";
    case ErrorCode::UnknownDeviceKind: return "UnknownDeviceKind";
    case ErrorCode::DeviceIo: return "DeviceIo";
    case ErrorCode::DuplicateRegistration: return "DuplicateRegistration";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::SchemaViolation: return "SchemaViolation";
    case ErrorCode::InvalidTransition: return "InvalidTransition";
    case ErrorCode::MissingBootSource: return "MissingBootSource";
    case ErrorCode::InsufficientPrivilege: return "InsufficientPrivilege";
    case ErrorCode::PathOutsideRoot: return "PathOutsideRoot";
    case ErrorCode::InvalidJailConfig: return "InvalidJailConfig";
    case ErrorCode::CgroupUnsupported: return "CgroupUnsupported";
    case ErrorCode::ExecFailed: return "ExecFailed";
    case ErrorCode::FilterRejected: return "FilterRejected";
    case ErrorCode::UsageError: return "UsageError";
    case ErrorCode::JoinTimeout: return "JoinTimeout";
    }
    return "Unknown";
}

void throw_errno(ErrorCode code, const std::string& what) {
    int err = errno;
    throw Error(code, what + ": " + std::strerror(err) + " (errno " + std::to_string(err) + ")");
}

} // namespace kindling
