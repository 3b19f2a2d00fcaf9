#ifndef FOCALCONV_IMAGE_IO_HPP
#define FOCALCONV_IMAGE_IO_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace focalconv {

// Interleaved 8-bit RGB rows, top to bottom.
struct DecodedImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;
};

// Detects PNG/JPEG by signature; throws DataError (naming `context`) on
// anything undecodable.
DecodedImage decode_image(const std::vector<std::uint8_t>& bytes, const std::string& context);

}  // namespace focalconv

#endif
