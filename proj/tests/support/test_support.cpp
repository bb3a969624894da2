#include "test_support.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "kindling/boot.hpp"

namespace kindling::test {

std::optional<ErrorCode> error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return std::nullopt;
}

TempDir::TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "kindling-test-XXXXXX").string();
    if (!::mkdtemp(tmpl.data()))
        throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

namespace {

// objcopy -O binary of tests/fixtures/guest.S
constexpr uint8_t kGuestCode[] = {
    0x48, 0x89, 0xf3, 0x48, 0x8d, 0x35, 0x6d, 0x00, 0x00, 0x00, 0xe8, 0x5a,
    0x00, 0x00, 0x00, 0x48, 0x8d, 0x35, 0x76, 0x00, 0x00, 0x00, 0xe8, 0x4e,
    0x00, 0x00, 0x00, 0x8b, 0xb3, 0x28, 0x02, 0x00, 0x00, 0xe8, 0x43, 0x00,
    0x00, 0x00, 0xb0, 0x0a, 0x66, 0xba, 0xf8, 0x03, 0xee, 0x80, 0x3d, 0x42,
    0x00, 0x00, 0x00, 0x00, 0x74, 0x1d, 0x66, 0xba, 0x64, 0x00, 0xec, 0xa8,
    0x01, 0x74, 0x09, 0x66, 0xba, 0x60, 0x00, 0xec, 0x3c, 0x71, 0x74, 0x0b,
    0xb9, 0x20, 0x4e, 0x00, 0x00, 0xf3, 0x90, 0xe2, 0xfc, 0xeb, 0xe3, 0x48,
    0x8d, 0x35, 0x3c, 0x00, 0x00, 0x00, 0xe8, 0x0a, 0x00, 0x00, 0x00, 0xb0,
    0xfe, 0x66, 0xba, 0x64, 0x00, 0xee, 0xf4, 0xeb, 0xfd, 0x66, 0xba, 0xf8,
    0x03, 0xac, 0x84, 0xc0, 0x74, 0x03, 0xee, 0xeb, 0xf8, 0xc3, 0x00, 0x4b,
    0x69, 0x6e, 0x64, 0x6c, 0x69, 0x6e, 0x67, 0x20, 0x67, 0x75, 0x65, 0x73,
    0x74, 0x20, 0x69, 0x6e, 0x69, 0x74, 0x0a, 0x00, 0x63, 0x6d, 0x64, 0x6c,
    0x69, 0x6e, 0x65, 0x3a, 0x20, 0x00, 0x67, 0x75, 0x65, 0x73, 0x74, 0x20,
    0x72, 0x65, 0x71, 0x75, 0x65, 0x73, 0x74, 0x69, 0x6e, 0x67, 0x20, 0x72,
    0x65, 0x73, 0x65, 0x74, 0x0a, 0x00,
};
constexpr size_t kModeOffset = 0x76;

void put(std::vector<uint8_t>& b, size_t off, uint64_t v, unsigned width) {
    for (unsigned i = 0; i < width; ++i)
        b[off + i] = static_cast<uint8_t>(v >> (8 * i));
}

} // namespace

std::vector<uint8_t> make_bzimage(const SyntheticKernel& spec) {
    const unsigned sects = spec.setup_sects == 0 ? 4 : spec.setup_sects;
    const size_t setup_len = (sects + 1) * 512;
    std::vector<uint8_t> image(setup_len + spec.payload_len, 0);

    image[boot::hdr::kSetupSects] = static_cast<uint8_t>(spec.setup_sects);
    put(image, boot::hdr::kBootFlag, boot::kBootFlag, 2);
    image[boot::hdr::kJump] = 0xEB; // short jmp over the header
    image[boot::hdr::kJump + 1] = 0x66;
    put(image, boot::hdr::kHeaderMagic, boot::kHeaderMagic, 4);
    put(image, boot::hdr::kVersion, spec.version, 2);
    image[boot::hdr::kLoadFlags] = 0x01; // LOADED_HIGH
    put(image, boot::hdr::kInitrdAddrMax, 0x7fffffff, 4);
    put(image, boot::hdr::kKernelAlignment, 0x200000, 4);
    put(image, boot::hdr::kXLoadFlags, spec.kernel64 ? boot::kXlfKernel64 : 0, 2);
    put(image, boot::hdr::kCmdlineSize, 2047, 4);
    put(image, boot::hdr::kInitSize, spec.init_size, 4);

    // Anything jumping to the 32-bit entry halts.
    std::fill(image.begin() + static_cast<ptrdiff_t>(setup_len),
              image.begin() + static_cast<ptrdiff_t>(setup_len + boot::kEntryOffset64), 0xF4);
    const size_t entry = setup_len + boot::kEntryOffset64;
    if (spec.payload_len >= boot::kEntryOffset64 + sizeof(kGuestCode)) {
        std::copy(std::begin(kGuestCode), std::end(kGuestCode), image.begin() + static_cast<ptrdiff_t>(entry));
        image[entry + kModeOffset] = static_cast<uint8_t>(spec.mode);
    }
    return image;
}

void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw std::runtime_error("cannot write " + path.string());
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool kvm_available() {
    int fd = ::open("/dev/kvm", O_RDWR | O_CLOEXEC);
    if (fd < 0)
        return false;
    ::close(fd);
    return true;
}

} // namespace kindling::test
