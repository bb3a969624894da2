#include "kindling/virtio/mmio.hpp"

#include <algorithm>
#include <cstdio>

#include "kindling/error.hpp"

namespace kindling::virtio {

MmioTransport::MmioTransport(GuestAddress base, std::unique_ptr<VirtioDevice> device, GuestMemoryMap& mem,
                             std::function<void()> raise_irq)
    : base_(base), device_(std::move(device)), mem_(mem), raise_irq_(std::move(raise_irq)) {
    for (uint16_t max : device_->queue_max_sizes())
        queues_.emplace_back(max);
}

Virtqueue* MmioTransport::selected_queue() {
    if (queue_sel_ >= queues_.size())
        return nullptr;
    return &queues_[queue_sel_];
}

uint64_t MmioTransport::read(uint64_t offset, unsigned width) {
    if (offset >= reg::kConfig) {
        uint8_t buf[8] = {};
        if (width > 8) {
            ++counters_.unknown_accesses;
            return 0;
        }
        device_->read_config(offset - reg::kConfig, std::span<uint8_t>(buf, width));
        uint64_t v = 0;
        for (unsigned i = 0; i < width; ++i)
            v |= static_cast<uint64_t>(buf[i]) << (8 * i);
        return v;
    }
    if (width != 4) {
        ++counters_.unknown_accesses;
        return 0;
    }
    const uint64_t features = device_->features() | kFeatureVersion1;
    Virtqueue* q = selected_queue();
    switch (offset) {
    case reg::kMagic: return kMmioMagic;
    case reg::kVersion: return kMmioVersion;
    case reg::kDeviceId: return device_->device_type();
    case reg::kVendorId: return kVendorId;
    case reg::kDeviceFeatures:
        return device_features_sel_ == 0 ? (features & 0xffffffff)
             : device_features_sel_ == 1 ? (features >> 32)
                                         : 0;
    case reg::kQueueNumMax: return q ? q->max_size() : 0;
    case reg::kQueueReady: return q && q->ready() ? 1 : 0;
    case reg::kInterruptStatus: return interrupt_status_;
    case reg::kStatus: return status_;
    case reg::kConfigGeneration: return 0;
    default:
        ++counters_.unknown_accesses;
        return 0;
    }
}

void MmioTransport::set_queue_half(uint64_t offset, uint32_t value) {
    Virtqueue* q = selected_queue();
    if (!q || q->ready()) {
        ++counters_.unknown_accesses;
        return;
    }
    auto merge = [&](GuestAddress old, bool high) {
        return high ? GuestAddress{(old.value & 0xffffffffull) | (static_cast<uint64_t>(value) << 32)}
                    : GuestAddress{(old.value & ~0xffffffffull) | value};
    };
    switch (offset) {
    case reg::kQueueDescLow: q->set_desc_table(merge(q->desc_table(), false)); break;
    case reg::kQueueDescHigh: q->set_desc_table(merge(q->desc_table(), true)); break;
    case reg::kQueueDriverLow: q->set_avail_ring(merge(q->avail_ring(), false)); break;
    case reg::kQueueDriverHigh: q->set_avail_ring(merge(q->avail_ring(), true)); break;
    case reg::kQueueDeviceLow: q->set_used_ring(merge(q->used_ring(), false)); break;
    case reg::kQueueDeviceHigh: q->set_used_ring(merge(q->used_ring(), true)); break;
    default: break;
    }
}

void MmioTransport::write(uint64_t offset, unsigned width, uint64_t value) {
    if (offset >= reg::kConfig) {
        uint8_t buf[8];
        if (width > 8) {
            ++counters_.unknown_accesses;
            return;
        }
        for (unsigned i = 0; i < width; ++i)
            buf[i] = static_cast<uint8_t>(value >> (8 * i));
        device_->write_config(offset - reg::kConfig, std::span<const uint8_t>(buf, width));
        return;
    }
    if (width != 4) {
        ++counters_.unknown_accesses;
        return;
    }
    const auto v = static_cast<uint32_t>(value);
    const bool configuring_queues =
        status_ == (status::kAcknowledge | status::kDriver | status::kFeaturesOk);
    switch (offset) {
    case reg::kDeviceFeaturesSel: device_features_sel_ = v; break;
    case reg::kDriverFeaturesSel: driver_features_sel_ = v; break;
    case reg::kDriverFeatures:
        if (status_ != (status::kAcknowledge | status::kDriver) || driver_features_sel_ > 1) {
            ++counters_.unknown_accesses;
            break;
        }
        if (driver_features_sel_ == 0)
            driver_features_ = (driver_features_ & ~0xffffffffull) | v;
        else
            driver_features_ = (driver_features_ & 0xffffffffull) | (static_cast<uint64_t>(v) << 32);
        break;
    case reg::kQueueSel: queue_sel_ = v; break;
    case reg::kQueueNum:
        if (Virtqueue* q = selected_queue(); q && configuring_queues && !q->ready())
            q->set_size(static_cast<uint16_t>(std::min<uint32_t>(v, 0xffff)));
        else
            ++counters_.unknown_accesses;
        break;
    case reg::kQueueReady:
        if (Virtqueue* q = selected_queue(); q && configuring_queues) {
            if (v == 1) {
                if (!q->enable(mem_))
                    ++counters_.rejected_queues;
            } else {
                q->reset();
            }
        } else {
            ++counters_.unknown_accesses;
        }
        break;
    case reg::kQueueDescLow:
    case reg::kQueueDescHigh:
    case reg::kQueueDriverLow:
    case reg::kQueueDriverHigh:
    case reg::kQueueDeviceLow:
    case reg::kQueueDeviceHigh:
        if (configuring_queues)
            set_queue_half(offset, v);
        else
            ++counters_.unknown_accesses;
        break;
    case reg::kQueueNotify: {
        ++counters_.notifies;
        const bool live = (status_ & status::kDriverOk) && device_->active() && !broken_;
        if (!live || v >= queues_.size() || !queues_[v].ready()) {
            ++counters_.ignored_notifies;
            break;
        }
        guarded([&] { device_->process_queue(v); });
        break;
    }
    case reg::kInterruptAck: interrupt_status_ &= ~v; break;
    case reg::kStatus: write_status(v); break;
    default: ++counters_.unknown_accesses; break;
    }
}

void MmioTransport::write_status(uint32_t value) {
    using namespace status;
    if (value == 0) {
        reset();
        return;
    }
    if (value & kFailed) {
        status_ |= kFailed;
        return;
    }
    const uint32_t acked = kAcknowledge;
    const uint32_t driver = acked | kDriver;
    const uint32_t features_ok = driver | kFeaturesOk;
    const uint32_t driver_ok = features_ok | kDriverOk;
    if (status_ == 0 && value == acked) {
        status_ = value;
    } else if (status_ == acked && value == driver) {
        status_ = value;
    } else if (status_ == driver && value == features_ok) {
        const uint64_t offered = device_->features() | kFeatureVersion1;
        // Leaving FEATURES_OK clear tells the driver its subset was refused.
        if ((driver_features_ & ~offered) == 0 && (driver_features_ & kFeatureVersion1)) {
            status_ = value;
            device_->set_acked_features(driver_features_);
        } else {
            ++counters_.invalid_status_writes;
        }
    } else if (status_ == features_ok && value == driver_ok) {
        status_ = value;
        DeviceContext ctx;
        ctx.mem = &mem_;
        ctx.queues = queues_;
        ctx.signal_used = [this](size_t queue) {
            if (queue < queues_.size() && !queues_[queue].needs_notification(mem_))
                return;
            signal_used();
        };
        guarded([&] { device_->activate(ctx); });
    } else if (value != status_) {
        ++counters_.invalid_status_writes;
    }
}

void MmioTransport::reset() {
    if (device_->active())
        device_->reset();
    for (auto& q : queues_)
        q.reset();
    status_ = 0;
    interrupt_status_ = 0;
    device_features_sel_ = 0;
    driver_features_sel_ = 0;
    driver_features_ = 0;
    queue_sel_ = 0;
    broken_ = false;
    device_->set_acked_features(0);
}

void MmioTransport::signal_used() {
    interrupt_status_ |= kInterruptUsedBuffer;
    ++counters_.interrupts;
    if (raise_irq_)
        raise_irq_();
}

void MmioTransport::guarded(const std::function<void()>& fn) {
    if (broken_)
        return;
    try {
        fn();
    } catch (const Error& e) {
        if (e.code() != ErrorCode::MalformedChain && e.code() != ErrorCode::OutOfBounds &&
            e.code() != ErrorCode::CrossesRegionBoundary)
            throw;
        ++counters_.malformed_chains;
        status_ |= status::kFailed;
        broken_ = true;
    }
}

void MmioTransport::handle_host_event(int fd, uint32_t events) {
    guarded([&] { device_->handle_host_event(fd, events); });
}

std::string MmioTransport::discovery_arg(uint32_t irq) const {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "virtio_mmio.device=4K@0x%llx:%u",
                  static_cast<unsigned long long>(base_.value), irq);
    return buf;
}

void MmioBus::insert(std::shared_ptr<MmioTransport> transport) {
    const uint64_t lo = transport->base().value;
    const uint64_t hi = lo + kMmioWindow;
    for (const auto& t : transports_) {
        const uint64_t tlo = t->base().value;
        if (lo < tlo + kMmioWindow && tlo < hi)
            throw Error(ErrorCode::DuplicateDevice, "MMIO window overlaps an existing device");
    }
    auto pos = std::lower_bound(transports_.begin(), transports_.end(), transport,
                                [](const auto& a, const auto& b) { return a->base() < b->base(); });
    transports_.insert(pos, std::move(transport));
}

MmioTransport* MmioBus::find(GuestAddress addr) const {
    auto it = std::upper_bound(transports_.begin(), transports_.end(), addr,
                               [](GuestAddress a, const auto& t) { return a < t->base(); });
    if (it == transports_.begin())
        return nullptr;
    --it;
    if (addr.value - (*it)->base().value >= kMmioWindow)
        return nullptr;
    return it->get();
}

bool MmioBus::read(GuestAddress addr, std::span<uint8_t> data) const {
    MmioTransport* t = find(addr);
    if (!t) {
        std::fill(data.begin(), data.end(), 0);
        return false;
    }
    const uint64_t v = t->read(addr.value - t->base().value, static_cast<unsigned>(data.size()));
    for (size_t i = 0; i < data.size() && i < 8; ++i)
        data[i] = static_cast<uint8_t>(v >> (8 * i));
    return true;
}

bool MmioBus::write(GuestAddress addr, std::span<const uint8_t> data) const {
    MmioTransport* t = find(addr);
    if (!t)
        return false;
    uint64_t v = 0;
    for (size_t i = 0; i < data.size() && i < 8; ++i)
        v |= static_cast<uint64_t>(data[i]) << (8 * i);
    t->write(addr.value - t->base().value, static_cast<unsigned>(data.size()), v);
    return true;
}

} // namespace kindling::virtio
