#pragma once

#include <cstdint>
#include <string>

namespace kindling::test {

struct ScheduleResult {
    bool ok = true;
    std::string divergence;
    uint64_t published = 0;
    uint64_t popped = 0;
    uint64_t completed = 0;
    bool ended_malformed = false;
};

/// One randomized guest-publication / device-completion schedule on a queue
/// of 2, 4 or 8 entries, checked step by step against SplitRingOracle.
ScheduleResult run_ring_schedule(uint64_t seed);

} // namespace kindling::test
