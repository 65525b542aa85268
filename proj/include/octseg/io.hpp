#pragma once

#include <filesystem>
#include <string>

#include "octseg/core_types.hpp"

namespace octseg::io {

// Volume container "OCTV1": a JSON header (shape, dtype f32, spacing, axis
// order "a,b,r", id, payload file name) next to a raw little-endian f32
// payload, row-major in the declared order. Surface container "SURF1" is the
// analogous pair with shape (K, N_B, N_A) and 1-based row positions.
//
// Functions take the header path; the payload lives next to it under the
// name recorded in the header (by default the header name with the ".json"
// suffix replaced by ".raw").

void write_octv(const OctVolume& v, const std::filesystem::path& header_path);
OctVolume read_octv(const std::filesystem::path& header_path);

void write_surf(const SurfaceSet& s, const std::filesystem::path& header_path);
SurfaceSet read_surf(const std::filesystem::path& header_path);

// Small JSON helpers shared by the tools.
std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, const std::string& content);

} // namespace octseg::io
