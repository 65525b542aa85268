#include "octseg/io.hpp"

#include <bit>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts are not supported");

namespace octseg::io {

using nlohmann::json;

namespace {

std::filesystem::path payload_path_for(const std::filesystem::path& header_path) {
    std::filesystem::path p = header_path;
    p.replace_extension(".raw");
    return p;
}

void write_raw_f32(const std::filesystem::path& p, const float* data, size_t count) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + p.string());
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
    if (!f) throw std::runtime_error("write failed: " + p.string());
}

std::vector<float> read_raw_f32(const std::filesystem::path& p, size_t count) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + p.string());
    std::vector<float> out(count);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<size_t>(f.gcount()) != count * sizeof(float))
        throw std::runtime_error("payload too short: " + p.string());
    return out;
}

json read_json_file(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("cannot open for reading: " + p.string());
    json j;
    f >> j;
    return j;
}

} // namespace

void write_octv(const OctVolume& v, const std::filesystem::path& header_path) {
    v.validate();
    const auto raw = payload_path_for(header_path);
    json h;
    h["format"] = "OCTV1";
    h["shape"] = {v.n_a, v.n_b, v.n_r};
    h["dtype"] = "f32";
    h["spacing_um"] = {v.spacing_um[0], v.spacing_um[1], v.spacing_um[2]};
    h["order"] = "a,b,r";
    h["id"] = v.id;
    h["payload"] = raw.filename().string();
    write_text_file(header_path, h.dump(2) + "\n");
    write_raw_f32(raw, v.intensities.data(), v.intensities.size());
}

OctVolume read_octv(const std::filesystem::path& header_path) {
    const json h = read_json_file(header_path);
    if (h.value("format", "") != "OCTV1")
        throw std::runtime_error("not an OCTV1 header: " + header_path.string());
    if (h.value("dtype", "") != "f32")
        throw std::runtime_error("unsupported dtype in " + header_path.string());
    if (h.value("order", "") != "a,b,r")
        throw std::runtime_error("unsupported axis order in " + header_path.string());
    const auto shape = h.at("shape");
    OctVolume v(shape.at(0).get<int64_t>(), shape.at(1).get<int64_t>(), shape.at(2).get<int64_t>());
    const auto sp = h.at("spacing_um");
    v.spacing_um = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
    v.id = h.value("id", "");
    const auto raw = header_path.parent_path() / h.at("payload").get<std::string>();
    v.intensities = read_raw_f32(raw, static_cast<size_t>(v.n_a * v.n_b * v.n_r));
    v.validate();
    return v;
}

void write_surf(const SurfaceSet& s, const std::filesystem::path& header_path) {
    const auto raw = payload_path_for(header_path);
    json h;
    h["format"] = "SURF1";
    h["K"] = s.n_surfaces;
    h["names"] = s.names;
    h["shape"] = {s.n_surfaces, s.n_b, s.n_a};
    h["payload"] = raw.filename().string();
    write_text_file(header_path, h.dump(2) + "\n");
    std::vector<float> buf(s.positions.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(s.positions[i]);
    write_raw_f32(raw, buf.data(), buf.size());
}

SurfaceSet read_surf(const std::filesystem::path& header_path) {
    const json h = read_json_file(header_path);
    if (h.value("format", "") != "SURF1")
        throw std::runtime_error("not a SURF1 header: " + header_path.string());
    const auto shape = h.at("shape");
    SurfaceSet s(shape.at(0).get<int64_t>(), shape.at(1).get<int64_t>(), shape.at(2).get<int64_t>());
    if (h.at("K").get<int64_t>() != s.n_surfaces)
        throw std::runtime_error("SURF1 K/shape mismatch in " + header_path.string());
    if (h.contains("names")) s.names = h.at("names").get<std::vector<std::string>>();
    const auto raw = header_path.parent_path() / h.at("payload").get<std::string>();
    const auto buf = read_raw_f32(raw, s.positions.size());
    for (size_t i = 0; i < buf.size(); ++i) s.positions[i] = static_cast<double>(buf[i]);
    return s;
}

std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for reading: " + p.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_text_file(const std::filesystem::path& p, const std::string& content) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + p.string());
    f << content;
    if (!f) throw std::runtime_error("write failed: " + p.string());
}

} // namespace octseg::io
