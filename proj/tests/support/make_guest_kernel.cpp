// Writes the synthetic guest kernel to a file: make_guest_kernel OUT [reset|wait]
#include <cstdio>
#include <string>

#include "test_support.hpp"

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: %s OUT [reset|wait]\n", argv[0]);
        return 2;
    }
    kindling::test::SyntheticKernel k;
    if (argc > 2 && std::string(argv[2]) == "wait")
        k.mode = kindling::test::GuestMode::WaitForCtrlAltDel;
    kindling::test::write_file(argv[1], kindling::test::make_bzimage(k));
    return 0;
}
