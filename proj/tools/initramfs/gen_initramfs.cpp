// Emits a C++ fragment holding an empty newc cpio archive (just the
// TRAILER!!! record), used as the built-in default initramfs.
#include <cstdio>
#include <string>
#include <vector>

int main(int argc, char** argv) {
    if (argc != 2) {
        std::fprintf(stderr, "usage: %s <output.inc>\n", argv[0]);
        return 2;
    }
    const std::string name = "TRAILER!!!";
    char header[111];
    // magic, ino, mode, uid, gid, nlink, mtime, filesize, devmajor, devminor,
    // rdevmajor, rdevminor, namesize, check
    std::snprintf(header, sizeof(header), "070701%08X%08X%08X%08X%08X%08X%08X%08X%08X%08X%08X%08X%08X",
                  0u, 0u, 0u, 0u, 1u, 0u, 0u, 0u, 0u, 0u, 0u,
                  static_cast<unsigned>(name.size() + 1), 0u);
    std::vector<unsigned char> archive(header, header + 110);
    archive.insert(archive.end(), name.begin(), name.end());
    archive.push_back(0);
    while (archive.size() % 4 != 0)
        archive.push_back(0);

    FILE* out = std::fopen(argv[1], "w");
    if (!out) {
        std::perror(argv[1]);
        return 1;
    }
    std::fprintf(out, "// generated by gen_initramfs; do not edit\n");
    for (size_t i = 0; i < archive.size(); ++i)
        std::fprintf(out, "0x%02x,%s", archive[i], (i % 12 == 11) ? "\n" : " ");
    std::fprintf(out, "\n");
    return std::fclose(out) == 0 ? 0 : 1;
}
