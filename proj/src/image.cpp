#include "cortex/image.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace cortex {

namespace {

// Reads one whitespace/comment-delimited PPM header token.
std::string next_token(const std::string& s, std::size_t& pos) {
    while (pos < s.size()) {
        if (std::isspace(static_cast<unsigned char>(s[pos]))) {
            ++pos;
        } else if (s[pos] == '#') {
            while (pos < s.size() && s[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
    std::size_t start = pos;
    while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos])))
        ++pos;
    if (start == pos) throw InputError("ppm: truncated header");
    return s.substr(start, pos - start);
}

int parse_dim(const std::string& tok, const char* what) {
    int v = 0;
    for (char c : tok) {
        if (c < '0' || c > '9')
            throw InputError(std::string("ppm: bad ") + what + " '" + tok + "'");
        v = v * 10 + (c - '0');
        if (v > 1 << 20) throw InputError(std::string("ppm: ") + what + " too large");
    }
    return v;
}

}  // namespace

std::string encode_ppm(const Image& img) {
    if (img.height < 1 || img.width < 1 ||
        img.rgb.size() != static_cast<std::size_t>(img.height) * img.width * 3)
        throw ShapeError("encode_ppm: inconsistent image buffer");
    std::ostringstream os;
    os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
    return os.str();
}

Image decode_ppm(const std::string& bytes) {
    std::size_t pos = 0;
    if (next_token(bytes, pos) != "P6") throw InputError("ppm: not a P6 file");
    Image img;
    img.width = parse_dim(next_token(bytes, pos), "width");
    img.height = parse_dim(next_token(bytes, pos), "height");
    if (img.width < 1 || img.height < 1) throw InputError("ppm: empty raster");
    if (parse_dim(next_token(bytes, pos), "maxval") != 255)
        throw InputError("ppm: only maxval 255 supported");
    ++pos;  // single whitespace byte after maxval
    std::size_t need = static_cast<std::size_t>(img.height) * img.width * 3;
    if (bytes.size() - pos < need) throw InputError("ppm: truncated pixel data");
    img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    std::string bytes = encode_ppm(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_ppm: cannot open " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write_ppm: short write to " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_ppm: cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return decode_ppm(os.str());
}

}  // namespace cortex
