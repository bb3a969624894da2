#pragma once

#include <linux/filter.h>

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

namespace kindling::jail {

/// Argument `index` (low 32 bits) must equal one of `allowed`.
struct ArgPredicate {
    unsigned index = 0;
    std::vector<uint32_t> allowed;
};

struct SyscallRule {
    long nr = 0;
    std::optional<ArgPredicate> predicate;
};

/// Level 0 installs nothing. Level 1 allows syscalls by number only.
/// Level 2 allows a subset of those and constrains arguments of some.
/// Anything else kills the process.
struct SeccompPolicy {
    int level = 0;
    std::vector<SyscallRule> rules;

    std::set<long> syscalls() const;
};

/// Throws InvalidJailConfig for a level outside 0..2.
SeccompPolicy policy_for_level(int level);

std::vector<sock_filter> compile(const SeccompPolicy& policy);

/// Sets no_new_privs and loads the filter on every thread of the process.
/// Level 0 only records the install point. Throws FilterRejected.
void install_seccomp(const SeccompPolicy& policy);

} // namespace kindling::jail
