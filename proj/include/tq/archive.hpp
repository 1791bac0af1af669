#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <zlib.h>

#include "tq/error.hpp"

namespace tq {

inline std::string gzip_decompress(const std::string& in) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 32) != Z_OK)  // accept gzip and zlib wrappers
        throw integrity_error("gzip: inflateInit failed");
    std::string out;
    out.reserve(in.size() * 4);
    char buf[65536];
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = uInt(in.size());
    int ret = Z_OK;
    do {
        zs.next_out = reinterpret_cast<Bytef*>(buf);
        zs.avail_out = sizeof(buf);
        ret = inflate(&zs, Z_NO_FLUSH);
        if (ret != Z_OK && ret != Z_STREAM_END) {
            inflateEnd(&zs);
            throw integrity_error(std::string("gzip: corrupt stream (") + (zs.msg ? zs.msg : "?") + ")");
        }
        out.append(buf, sizeof(buf) - zs.avail_out);
    } while (ret != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
    inflateEnd(&zs);
    if (ret != Z_STREAM_END) throw integrity_error("gzip: truncated stream");
    return out;
}

inline std::string gzip_compress(const std::string& in) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_BEST_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw numeric_error("gzip: deflateInit failed");
    std::string out;
    char buf[65536];
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = uInt(in.size());
    int ret;
    do {
        zs.next_out = reinterpret_cast<Bytef*>(buf);
        zs.avail_out = sizeof(buf);
        ret = deflate(&zs, Z_FINISH);
        out.append(buf, sizeof(buf) - zs.avail_out);
    } while (ret != Z_STREAM_END);
    deflateEnd(&zs);
    return out;
}

struct TarEntry {
    std::string name;
    std::string bytes;
};

// Minimal ustar reader: regular files only, prefix field honored.
inline std::vector<TarEntry> tar_extract(const std::string& tar) {
    std::vector<TarEntry> out;
    size_t pos = 0;
    auto octal = [](const char* p, size_t n) {
        uint64_t v = 0;
        for (size_t i = 0; i < n && p[i]; ++i) {
            if (p[i] == ' ') continue;
            if (p[i] < '0' || p[i] > '7') break;
            v = v * 8 + uint64_t(p[i] - '0');
        }
        return v;
    };
    while (pos + 512 <= tar.size()) {
        const char* hdr = tar.data() + pos;
        bool empty = true;
        for (int i = 0; i < 512; ++i)
            if (hdr[i] != 0) {
                empty = false;
                break;
            }
        if (empty) break;  // end-of-archive blocks
        char namebuf[101] = {0}, prefixbuf[156] = {0};
        std::memcpy(namebuf, hdr, 100);
        std::memcpy(prefixbuf, hdr + 345, 155);
        uint64_t size = octal(hdr + 124, 12);
        char type = hdr[156];
        std::string name = prefixbuf[0] ? std::string(prefixbuf) + "/" + namebuf : std::string(namebuf);
        pos += 512;
        if (pos + size > tar.size()) throw integrity_error("tar: truncated entry " + name);
        if (type == '0' || type == '\0') out.push_back({name, tar.substr(pos, size)});
        pos += (size + 511) / 512 * 512;
    }
    return out;
}

// ustar writer for fixtures and tests.
inline std::string tar_create(const std::vector<TarEntry>& entries) {
    std::string out;
    for (const TarEntry& e : entries) {
        char hdr[512] = {0};
        std::snprintf(hdr, 100, "%s", e.name.c_str());
        std::snprintf(hdr + 100, 8, "%07o", 0644);
        std::snprintf(hdr + 108, 8, "%07o", 0);
        std::snprintf(hdr + 116, 8, "%07o", 0);
        std::snprintf(hdr + 124, 12, "%011llo", static_cast<unsigned long long>(e.bytes.size()));
        std::snprintf(hdr + 136, 12, "%011o", 0);
        hdr[156] = '0';
        std::memcpy(hdr + 257, "ustar", 5);
        hdr[263] = '0';
        hdr[264] = '0';
        std::memset(hdr + 148, ' ', 8);
        unsigned sum = 0;
        for (int i = 0; i < 512; ++i) sum += static_cast<unsigned char>(hdr[i]);
        std::snprintf(hdr + 148, 8, "%06o", sum);
        hdr[154] = 0;
        hdr[155] = ' ';
        out.append(hdr, 512);
        out.append(e.bytes);
        size_t pad = (512 - e.bytes.size() % 512) % 512;
        out.append(pad, '\0');
    }
    out.append(1024, '\0');
    return out;
}

}  // namespace tq
