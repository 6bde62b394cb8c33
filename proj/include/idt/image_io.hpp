#pragma once

#include <filesystem>
#include <string>

#include "idt/image.hpp"

namespace idt {

// PNG and baseline JPEG, always returned as 3-channel RGB. Grey and RGBA
// inputs are expanded or stripped.
Image8 read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Image8& image);
std::string encode_png(const Image8& image);
void write_jpeg(const std::filesystem::path& path, const Image8& image, int quality = 95);

bool is_image_file(const std::filesystem::path& path);

}  // namespace idt
