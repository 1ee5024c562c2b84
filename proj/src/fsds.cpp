#include <sstream>

#include "binio.hpp"
#include "tpn/episodes.hpp"
#include "tpn/errors.hpp"

namespace tpn {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_fsds(const Dataset& ds) {
  ds.validate();
  binio::Writer w;
  w.raw(std::string_view(kMagic, 4));
  w.u16(kVersion);
  w.u16(0);
  w.u32(static_cast<std::uint32_t>(ds.classes.size()));
  for (const auto& c : ds.classes) {
    if (c.name.size() > 0xffff) throw ConfigError("class name too long: " + c.name.substr(0, 32) + "...");
    w.u16(static_cast<std::uint16_t>(c.name.size()));
    w.raw(c.name);
    w.u32(static_cast<std::uint32_t>(c.count));
    w.u8(static_cast<std::uint8_t>(ds.example_shape.size()));
    for (auto d : ds.example_shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : c.values) w.f32(static_cast<float>(v));
  }
  w.crc32_trailer();
  return std::move(w.bytes());
}

Dataset decode_fsds(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes, "FSDS file");
  if (r.str(4) != std::string_view(kMagic, 4)) r.fail("bad FSDS magic", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u16(); v != kVersion)
    r.fail("unsupported FSDS version " + std::to_string(v), version_at);
  const std::size_t flags_at = r.offset();
  if (const auto f = r.u16(); f != 0) r.fail("unsupported FSDS flags " + std::to_string(f), flags_at);
  const std::uint32_t class_count = r.u32();

  Dataset ds;
  for (std::uint32_t c = 0; c < class_count; ++c) {
    ClassRecord rec;
    rec.id = c;
    rec.name = r.str(r.u16());
    rec.count = r.u32();
    const std::size_t shape_at = r.offset();
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    if (shape.empty() || shape_numel(shape) == 0) r.fail("class '" + rec.name + "' has an empty example shape", shape_at);
    if (c == 0) {
      ds.example_shape = shape;
    } else if (shape != ds.example_shape) {
      r.fail("class '" + rec.name + "' shape " + shape_str(shape) + " differs from " + shape_str(ds.example_shape),
             shape_at);
    }
    const std::size_t n = rec.count * shape_numel(shape);
    if (r.remaining() < n * 4) r.fail("truncated FSDS payload for class '" + rec.name + "'");
    rec.values.resize(n);
    for (auto& v : rec.values) v = static_cast<double>(r.f32());
    ds.classes.push_back(std::move(rec));
  }
  r.expect_crc32_trailer();
  return ds;
}

std::string encode_split_manifest(const Dataset& ds) {
  std::string out;
  for (const auto& c : ds.classes) out += c.name + "\t" + to_string(c.split) + "\n";
  return out;
}

void apply_split_manifest(Dataset& ds, const std::string& manifest) {
  std::istringstream in(manifest);
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t line_at = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("split manifest line without a tab", line_at);
    const std::string name = line.substr(0, tab);
    Split split;
    try {
      split = parse_split(line.substr(tab + 1));
    } catch (const ConfigError& e) {
      throw FormatError(e.what(), line_at + tab + 1);
    }
    bool found = false;
    for (auto& c : ds.classes)
      if (c.name == name) {
        c.split = split;
        found = true;
      }
    if (!found) throw FormatError("split manifest names unknown class '" + name + "'", line_at);
  }
}

std::filesystem::path manifest_path(const std::filesystem::path& fsds_path) {
  auto p = fsds_path;
  return p.replace_extension(".split");
}

void save_fsds(const Dataset& ds, const std::filesystem::path& path) {
  binio::write_file(path, encode_fsds(ds));
  const auto manifest = encode_split_manifest(ds);
  binio::write_file(manifest_path(path), std::span(reinterpret_cast<const std::uint8_t*>(manifest.data()), manifest.size()));
}

Dataset load_fsds(const std::filesystem::path& path) {
  auto ds = decode_fsds(binio::read_file(path));
  const auto mpath = manifest_path(path);
  if (!std::filesystem::exists(mpath)) throw FormatError("missing split manifest " + mpath.string(), 0);
  const auto mbytes = binio::read_file(mpath);
  apply_split_manifest(ds, std::string(mbytes.begin(), mbytes.end()));
  return ds;
}

}  // namespace tpn
