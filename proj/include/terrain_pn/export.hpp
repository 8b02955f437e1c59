#pragma once

// ASCII PLY for point clouds and CSV for training histories.

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "terrain_pn/datagen.hpp"
#include "terrain_pn/geometry.hpp"
#include "terrain_pn/train.hpp"

namespace terrain_pn {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Color&, const Color&) = default;
  friend auto operator<=>(const Color&, const Color&) = default;
};

namespace colors {
inline constexpr Color kBase{160, 160, 160};
inline constexpr Color kCritical{220, 30, 30};
inline constexpr Color kUpperBound{30, 90, 220};
}  // namespace colors

struct ColoredCloud {
  PointCloud cloud;
  std::vector<Color> colors;  // one per point
};

namespace detail {

inline std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(static_cast<float>(v)));
  return buf;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

/// ASCII PLY with x y z (float) and red green blue (uchar) per vertex.
inline std::string ply_text(const PointCloud& cloud, const std::vector<Color>& colors) {
  if (cloud.empty()) throw EmptyCloudError("export_ply: empty cloud");
  if (colors.size() != cloud.size()) throw DimensionError("export_ply: colors", cloud.size(), colors.size());
  std::string out;
  out += "ply\nformat ascii 1.0\ncomment terrain_pn export\n";
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  out += "property float x\nproperty float y\nproperty float z\n";
  out += "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    const auto& c = colors[i];
    out += detail::format_float(p[0]) + ' ' + detail::format_float(p[1]) + ' ' + detail::format_float(p[2]) + ' ' +
           std::to_string(c.r) + ' ' + std::to_string(c.g) + ' ' + std::to_string(c.b) + '\n';
  }
  return out;
}

inline void export_ply(const PointCloud& cloud, const std::filesystem::path& path, const std::vector<Color>& colors) {
  const std::string text = ply_text(cloud, colors);
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

inline void export_ply(const PointCloud& cloud, const std::filesystem::path& path, Color color = colors::kBase) {
  export_ply(cloud, path, std::vector<Color>(cloud.size(), color));
}

/// Reads the subset of PLY written by export_ply (ASCII, xyz + optional rgb).
inline ColoredCloud read_ply(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "ply") throw IoError(path.string() + ": not a PLY file");
  std::size_t count = 0;
  std::vector<std::string> props;
  bool ascii = false;
  while (std::getline(f, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = fmt == "ascii";
    } else if (key == "element") {
      std::string name;
      ls >> name >> count;
    } else if (key == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    }
  }
  if (!ascii) throw IoError(path.string() + ": only ASCII PLY is supported");
  auto index_of = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < props.size(); ++i)
      if (props[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
  const int ir = index_of("red"), ig = index_of("green"), ib = index_of("blue");
  if (ix < 0 || iy < 0 || iz < 0) throw IoError(path.string() + ": missing x/y/z properties");
  ColoredCloud out;
  out.cloud.points.reserve(count);
  for (std::size_t v = 0; v < count; ++v) {
    if (!std::getline(f, line)) throw IoError(path.string() + ": truncated vertex list");
    std::istringstream ls(line);
    std::vector<double> vals(props.size());
    for (auto& val : vals)
      if (!(ls >> val)) throw IoError(path.string() + ": malformed vertex line");
    out.cloud.points.push_back({vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)],
                                vals[static_cast<std::size_t>(iz)]});
    Color c;
    if (ir >= 0 && ig >= 0 && ib >= 0)
      c = {static_cast<std::uint8_t>(vals[static_cast<std::size_t>(ir)]),
           static_cast<std::uint8_t>(vals[static_cast<std::size_t>(ig)]),
           static_cast<std::uint8_t>(vals[static_cast<std::size_t>(ib)])};
    out.colors.push_back(c);
  }
  return out;
}

/// Columns: epoch, step, lr, train_loss, test_loss, test_acc.
inline std::string history_csv(const TrainHistory& h) {
  std::string out = "epoch,step,lr,train_loss,test_loss,test_acc\n";
  for (const auto& e : h.epochs)
    out += std::to_string(e.epoch) + ',' + std::to_string(e.step) + ',' + detail::format_double(e.lr) + ',' +
           detail::format_double(e.train_loss) + ',' + detail::format_double(e.test_loss) + ',' +
           detail::format_double(e.test_accuracy) + '\n';
  return out;
}

/// Per optimizer step: step, lr, batch_loss.
inline std::string steps_csv(const TrainHistory& h) {
  std::string out = "step,lr,batch_loss\n";
  for (const auto& s : h.steps)
    out += std::to_string(s.step) + ',' + detail::format_double(s.lr) + ',' + detail::format_double(s.batch_loss) + '\n';
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace terrain_pn
