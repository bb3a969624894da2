#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kindling {

enum class ErrorCode {
    // guest_memory
    OverlappingRegions,
    ZeroSizeRegion,
    OutOfBounds,
    CrossesRegionBoundary,
    // kvm_facade
    HypervisorUnavailable,
    HostRejected,
    AlreadyRegistered,
    DuplicateIndex,
    WrongThread,
    VmAlreadyExists,
    // boot_protocol
    BadMagic,
    UnsupportedProtocolVersion,
    Truncated,
    ImageTooLarge,
    CmdlineTooLong,
    // virtio_core
    MalformedChain,
    UnknownHead,
    IrqExhausted,
    DeviceUnregistered,
    DuplicateDevice,
    InvalidQueue,
    // device_models
    UnknownDeviceKind,
    DeviceIo,
    // event_loop
    DuplicateRegistration,
    UnknownToken,
    // api_server
    SchemaViolation,
    InvalidTransition,
    MissingBootSource,
    // jailer
    InsufficientPrivilege,
    PathOutsideRoot,
    InvalidJailConfig,
    CgroupUnsupported,
    ExecFailed,
    FilterRejected,
    // cli
    UsageError,
    // vmm_orchestrator
    JoinTimeout,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure surfaced by the library. The code is the contract; the
/// message is for humans.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Throws Error(code) with errno text appended.
[[noreturn]] void throw_errno(ErrorCode code, const std::string& what);

} // namespace kindling
