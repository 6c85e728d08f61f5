#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fesnet/data.hpp"

namespace fesnet {

/// Fundus-like test image: a bright disc (the field of view) on black with
/// thin dark curvilinear "vessels" and pixel noise. Pixel values 0..255;
/// mask marks vessel pixels inside the disc, roi the disc itself.
Sample make_synthetic_sample(const std::string& id, std::size_t height,
                             std::size_t width, std::uint64_t seed);

/// Writes images/, masks/ and roi/ PNGs with the file count and naming of
/// `kind` (DRIVE 01..40, STARE im0001.., CHASE Image_01L.., HRF 01_h..).
void write_synthetic_dataset(const std::filesystem::path& root, DatasetKind kind,
                             std::size_t height, std::size_t width,
                             std::uint64_t seed);

}  // namespace fesnet
