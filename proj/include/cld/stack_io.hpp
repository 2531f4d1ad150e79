#pragma once

// Layer stack manifests:
//   {"format_version": 1, "frame": [H, W],
//    "composite": "composite.png", "background": "background.png",
//    "background_prompt": [...],
//    "layers": [{"path": "layer_1.png", "bbox": [x_l, y_l, x_r, y_r],
//                "prompt": [...]}, ...],          // bottom-to-top
//    "global_prompt": [...]}
// Paths are relative to the manifest's directory.

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cld/imaging.hpp"
#include "cld/png_io.hpp"

namespace cld {

inline constexpr int kManifestFormatVersion = 1;

inline nlohmann::json bbox_to_json(const BBox& b) {
  return nlohmann::json::array({b.x_l, b.y_l, b.x_r, b.y_r});
}

inline BBox bbox_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) {
    throw ValidationError(what + ": bbox must be [x_l, y_l, x_r, y_r], got " + j.dump());
  }
  for (const auto& v : j) {
    if (!v.is_number_integer()) {
      throw ValidationError(what + ": bbox coordinates must be integers, got " + j.dump());
    }
  }
  return BBox{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// Writes PNGs plus manifest.json into `dir` and returns the manifest path.
inline std::filesystem::path save_stack(const LayerStack& stack,
                                        const std::filesystem::path& dir,
                                        const nlohmann::json& extra = nlohmann::json::object(),
                                        const std::string& composite_name = "composite.png") {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  validate_stack(stack);
  write_png((dir / composite_name).string(), stack.composite);
  write_png((dir / "background.png").string(), stack.background);
  nlohmann::json m;
  m["format_version"] = kManifestFormatVersion;
  m["frame"] = {stack.height(), stack.width()};
  m["composite"] = composite_name;
  m["background"] = "background.png";
  m["background_prompt"] = stack.background_prompt;
  m["layers"] = nlohmann::json::array();
  for (std::size_t i = 0; i < stack.foregrounds.size(); ++i) {
    const auto& fg = stack.foregrounds[i];
    const std::string name = "layer_" + std::to_string(i + 1) + ".png";
    write_png((dir / name).string(), fg.image);
    m["layers"].push_back({{"path", name}, {"bbox", bbox_to_json(fg.bbox)}, {"prompt", fg.prompt}});
  }
  m["global_prompt"] = stack.global_prompt;
  for (const auto& [key, value] : extra.items()) m[key] = value;
  const auto manifest = dir / "manifest.json";
  write_json_file(manifest, m);
  return manifest;
}

inline LayerStack load_stack(const std::filesystem::path& manifest_path) {
  const nlohmann::json m = read_json_file(manifest_path);
  const auto dir = manifest_path.parent_path();
  const std::string where = manifest_path.string();
  LayerStack stack;
  try {
    if (m.value("format_version", 0) != kManifestFormatVersion) {
      throw ValidationError(where + ": unsupported format_version");
    }
    const auto frame = m.at("frame").get<std::vector<std::size_t>>();
    if (frame.size() != 2) throw ValidationError(where + ": frame must be [H, W]");
    stack.composite = read_png<3>((dir / m.at("composite").get<std::string>()).string());
    stack.background = read_png<4>((dir / m.at("background").get<std::string>()).string());
    if (!stack.background.same_size(frame[0], frame[1]) ||
        !stack.composite.same_size(frame[0], frame[1])) {
      throw ValidationError(where + ": image sizes do not match frame");
    }
    stack.background_prompt = m.value("background_prompt", std::vector<std::string>{});
    stack.global_prompt = m.value("global_prompt", std::vector<std::string>{});
    const auto& layers = m.at("layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& entry = layers[i];
      const std::string what = where + ": layer " + std::to_string(i + 1);
      ForegroundLayer fg;
      fg.bbox = bbox_from_json(entry.at("bbox"), what);
      require_valid_bbox(fg.bbox, frame[0], frame[1], what);
      fg.image = read_png<4>((dir / entry.at("path").get<std::string>()).string());
      fg.prompt = entry.value("prompt", std::vector<std::string>{});
      stack.foregrounds.push_back(std::move(fg));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + ": malformed manifest: " + e.what());
  }
  validate_stack(stack);
  return stack;
}

// Dataset index: {"format_version": 1, "stacks": [{"id": ..., "manifest": ...}]}
// with manifest paths relative to the index directory.
struct IndexEntry {
  std::string id;
  std::filesystem::path manifest;  // absolute or relative to the working directory
};

inline void write_index(const std::filesystem::path& dir, const std::vector<IndexEntry>& entries) {
  nlohmann::json j;
  j["format_version"] = kManifestFormatVersion;
  j["stacks"] = nlohmann::json::array();
  for (const auto& e : entries) {
    j["stacks"].push_back(
        {{"id", e.id}, {"manifest", e.manifest.lexically_relative(dir).generic_string()}});
  }
  write_json_file(dir / "index.json", j);
}

inline std::vector<IndexEntry> read_index(const std::filesystem::path& dir) {
  const auto path = dir / "index.json";
  const nlohmann::json j = read_json_file(path);
  std::vector<IndexEntry> out;
  try {
    for (const auto& e : j.at("stacks")) {
      out.push_back(IndexEntry{e.at("id").get<std::string>(), dir / e.at("manifest").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed index: " + e.what());
  }
  return out;
}

}  // namespace cld
