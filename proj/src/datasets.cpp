#include "ddpls/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ddpls/nn.hpp"

namespace ddpls {

namespace {

using json = nlohmann::json;

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

struct Rgb {
  double r = 0, g = 0, b = 0;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// Color of a class motif at normalized box-local coordinates (un, vn) in [-1, 1].
Rgb motif_color(int class_id, const Rgb& base, const Rgb& accent, double un, double vn) {
  switch (class_id % 3) {
    case 0:  // solid body with a highlighted front end
      return un > 0.55 ? accent : base;
    case 1:  // frame around a contrasting core
      return (std::abs(un) > 0.65 || std::abs(vn) > 0.55) ? base : accent;
    default: {  // bands across the long axis
      const int band = static_cast<int>(std::floor((un + 1.0) * 2.5));
      return band % 2 == 0 ? base : accent;
    }
  }
}

void render_box(Image& img, const OrientedBox& box, const Rgb& base, const Rgb& accent) {
  const auto cs = corners(box);
  double xmin = cs[0].x, xmax = cs[0].x, ymin = cs[0].y, ymax = cs[0].y;
  for (const auto& p : cs) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const int x0 = std::max(0, static_cast<int>(std::floor(xmin)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(xmax)));
  const int y0 = std::max(0, static_cast<int>(std::floor(ymin)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(ymax)));
  const double c = std::cos(box.theta);
  const double s = std::sin(box.theta);
  constexpr int kSub = 3;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      int inside = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const Point q{x + (sx + 0.5) / kSub, y + (sy + 0.5) / kSub};
          if (point_in_box(q, box)) ++inside;
        }
      }
      if (inside == 0) continue;
      const double cov = static_cast<double>(inside) / (kSub * kSub);
      const double dx = x + 0.5 - box.cx;
      const double dy = y + 0.5 - box.cy;
      const double un = std::clamp((dx * c + dy * s) / (box.w / 2.0), -1.0, 1.0);
      const double vn = std::clamp((-dx * s + dy * c) / (box.h / 2.0), -1.0, 1.0);
      const Rgb col = motif_color(box.class_id, base, accent, un, vn);
      const double vals[3] = {col.r, col.g, col.b};
      for (int ch = 0; ch < 3; ++ch) {
        float& px = img.at(ch, y, x);
        px = static_cast<float>(px * (1.0 - cov) + vals[ch] * cov);
      }
    }
  }
}

Rgb random_color_near(std::mt19937_64& rng, double target_lum) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Rgb c{u(rng), u(rng), u(rng)};
  const double lum = luminance(c.r, c.g, c.b);
  const double shift = target_lum - lum;
  c.r = std::clamp(c.r + shift, 0.0, 1.0);
  c.g = std::clamp(c.g + shift, 0.0, 1.0);
  c.b = std::clamp(c.b + shift, 0.0, 1.0);
  return c;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

const std::vector<OrientedBox>& SceneSample::labeled_boxes() const {
  static const std::vector<OrientedBox> kEmpty;
  return is_labeled ? boxes : kEmpty;
}

SceneSample generate_scene(const DensityProfile& profile, const std::string& id) {
  if (profile.image_size < 16) throw DatasetError("image_size must be at least 16");
  if (profile.num_clusters < 0) throw DatasetError("num_clusters must be >= 0");
  if (profile.class_count < 1) throw DatasetError("class_count must be >= 1");
  if (profile.objects_per_cluster.first < 0 || profile.objects_per_cluster.second < profile.objects_per_cluster.first) {
    throw DatasetError("invalid objects_per_cluster range");
  }
  if (profile.scale_range.first <= 0.0 || profile.scale_range.second < profile.scale_range.first) {
    throw DatasetError("invalid scale_range");
  }
  if (profile.num_clusters > 0 && profile.cluster_radius < profile.scale_range.second) {
    throw DatasetError("cluster_radius " + format_double(profile.cluster_radius) +
                       " is smaller than the largest object scale " + format_double(profile.scale_range.second));
  }
  if (profile.background_fraction < 0.0 || profile.background_fraction > 1.0) {
    throw DatasetError("background_fraction must be in [0, 1]");
  }

  std::mt19937_64 rng(fnv1a(id, fnv1a(std::to_string(profile.seed))));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int size = profile.image_size;

  SceneSample sample;
  sample.id = id;
  sample.image = Image(size, size, 3);

  // Background: per-scene base color, a linear ramp and a few soft blobs.
  const Rgb bg = random_color_near(rng, 0.25 + 0.5 * unit(rng));
  const double ramp_x = (unit(rng) - 0.5) * 0.2;
  const double ramp_y = (unit(rng) - 0.5) * 0.2;
  struct Blob {
    double x, y, sigma, amp;
    int channel;
  };
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) {
    b = {unit(rng) * size, unit(rng) * size, 8.0 + unit(rng) * 24.0, (unit(rng) - 0.5) * 0.25,
         static_cast<int>(unit(rng) * 3.0) % 3};
  }
  const double bg_vals[3] = {bg.r, bg.g, bg.b};
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        double v = bg_vals[ch] + ramp_x * (x / double(size) - 0.5) + ramp_y * (y / double(size) - 0.5);
        for (const auto& b : blobs) {
          const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
          v += (b.channel == ch ? 1.0 : 0.4) * b.amp * std::exp(-d2 / (2 * b.sigma * b.sigma));
        }
        sample.image.at(ch, y, x) = static_cast<float>(v);
      }
    }
  }

  // Object layout.
  struct Placement {
    Point center;
    bool clustered;
  };
  std::vector<Point> cluster_centers;
  std::vector<int> per_cluster;
  for (int c = 0; c < profile.num_clusters; ++c) {
    const double margin = std::min(profile.cluster_radius / 2.0, size / 4.0);
    cluster_centers.push_back({margin + unit(rng) * (size - 2 * margin), margin + unit(rng) * (size - 2 * margin)});
    std::uniform_int_distribution<int> count(profile.objects_per_cluster.first, profile.objects_per_cluster.second);
    per_cluster.push_back(count(rng));
  }

  const double edge = 2.0;
  auto draw_box = [&](int cluster, bool scattered) {
    OrientedBox b;
    const double long_side = profile.scale_range.first + unit(rng) * (profile.scale_range.second - profile.scale_range.first);
    const double aspect = profile.aspect_range.first + unit(rng) * (profile.aspect_range.second - profile.aspect_range.first);
    b.w = long_side;
    b.h = long_side * aspect;
    b.theta = -kHalfPi + unit(rng) * kPi;
    b.class_id = static_cast<int>(unit(rng) * profile.class_count) % profile.class_count;
    if (scattered) {
      b.cx = edge + unit(rng) * (size - 2 * edge);
      b.cy = edge + unit(rng) * (size - 2 * edge);
    } else {
      std::normal_distribution<double> spread(0.0, profile.cluster_radius / 2.0);
      const Point c = cluster_centers[cluster];
      double dx, dy;
      do {
        dx = spread(rng);
        dy = spread(rng);
      } while (dx * dx + dy * dy > profile.cluster_radius * profile.cluster_radius);
      b.cx = std::clamp(c.x + dx, edge, size - edge);
      b.cy = std::clamp(c.y + dy, edge, size - edge);
    }
    return normalized(b);
  };

  auto max_overlap = [&](const OrientedBox& b) {
    double worst = 0.0;
    for (const auto& o : sample.boxes) {
      if (point_in_box({b.cx, b.cy}, o) || point_in_box({o.cx, o.cy}, b)) return 1.0;
      worst = std::max(worst, rotated_iou(b, o));
    }
    return worst;
  };

  for (int c = 0; c < profile.num_clusters; ++c) {
    const int n = per_cluster[c];
    const int scattered = static_cast<int>(std::floor(profile.background_fraction * n + 0.5));
    for (int k = 0; k < n; ++k) {
      const bool scatter = k < scattered;
      OrientedBox best;
      double best_overlap = 2.0;
      for (int attempt = 0; attempt < 60; ++attempt) {
        OrientedBox cand = draw_box(c, scatter);
        const double ov = max_overlap(cand);
        if (ov < best_overlap) {
          best = cand;
          best_overlap = ov;
        }
        if (ov <= 0.0) break;
      }
      sample.boxes.push_back(best);
    }
  }

  for (const auto& b : sample.boxes) {
    const double bg_lum = luminance(bg.r, bg.g, bg.b);
    const double sign = bg_lum > 0.6 ? -1.0 : (bg_lum < 0.4 ? 1.0 : (unit(rng) < 0.5 ? -1.0 : 1.0));
    const double target = std::clamp(bg_lum + sign * (0.25 + 0.2 * unit(rng)), 0.05, 0.95);
    const Rgb base = random_color_near(rng, target);
    const Rgb accent = mix(base, sign > 0 ? Rgb{0.05, 0.05, 0.05} : Rgb{0.95, 0.95, 0.95}, 0.6);
    render_box(sample.image, b, base, accent);
  }

  std::normal_distribution<double> noise(0.0, profile.noise);
  for (float& v : sample.image.data) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  return sample;
}

int ClassTable::id_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<int>(i);
  }
  return -1;
}

ClassTable ClassTable::synthetic(int class_count) {
  static const std::vector<std::string> kNames{"small-vehicle", "ship", "storage-tank", "plane", "harbor",
                                               "large-vehicle", "bridge", "helicopter"};
  ClassTable t;
  for (int i = 0; i < class_count; ++i) {
    t.names.push_back(i < static_cast<int>(kNames.size()) ? kNames[i] : "class-" + std::to_string(i));
  }
  return t;
}

DotaParseResult parse_dota_annotations(const std::string& text, const ClassTable& classes) {
  DotaParseResult result;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields_in(line);
    std::vector<std::string> fields;
    for (std::string f; fields_in >> f;) fields.push_back(f);
    if (fields.empty() || fields[0][0] == '#') continue;
    if (fields[0].rfind("imagesource:", 0) == 0 || fields[0].rfind("gsd:", 0) == 0) continue;
    if (fields.size() < 9) {
      throw ParseError(line_no, "expected at least 9 fields, found " + std::to_string(fields.size()));
    }
    std::array<Point, 4> quad;
    for (int i = 0; i < 8; ++i) {
      double v = 0.0;
      const auto& f = fields[i];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(v)) {
        throw ParseError(line_no, "field " + std::to_string(i + 1) + " is not a number: '" + f + "'");
      }
      (i % 2 == 0 ? quad[i / 2].x : quad[i / 2].y) = v;
    }
    const int cls = classes.id_of(fields[8]);
    if (cls < 0) {
      result.rejected.push_back({line_no, "unknown category '" + fields[8] + "'"});
      continue;
    }
    if (!is_strictly_convex(quad)) {
      result.rejected.push_back({line_no, "non-convex or self-intersecting quadrilateral"});
      continue;
    }
    if (signed_area(quad) < 0) std::reverse(quad.begin(), quad.end());
    OrientedBox box = min_area_rect(quad);
    box.class_id = cls;
    box.score = 1.0;
    result.boxes.push_back(box);
  }
  return result;
}

std::string serialize_dota_annotations(const std::vector<OrientedBox>& boxes, const ClassTable& classes) {
  std::string out;
  for (const auto& b : boxes) {
    if (b.class_id < 0 || b.class_id >= static_cast<int>(classes.names.size())) {
      throw DatasetError("class id " + std::to_string(b.class_id) + " missing from class table");
    }
    for (const auto& p : corners(b)) {
      out += format_double(p.x) + ' ' + format_double(p.y) + ' ';
    }
    out += classes.names[b.class_id] + " 0\n";
  }
  return out;
}

void TileSpec::validate() const {
  if (tile_size < 1 || overlap < 0 || overlap >= tile_size) {
    throw DatasetError("tile spec requires 0 <= overlap < tile_size");
  }
}

std::vector<int> tile_offsets_1d(int image_dim, const TileSpec& spec) {
  spec.validate();
  std::vector<int> offsets{0};
  const int stride = spec.tile_size - spec.overlap;
  while (offsets.back() + spec.tile_size < image_dim) {
    int next = offsets.back() + stride;
    if (next + spec.tile_size >= image_dim) next = image_dim - spec.tile_size;
    offsets.push_back(next);
  }
  return offsets;
}

std::vector<std::pair<int, int>> tile_offsets(int image_w, int image_h, const TileSpec& spec) {
  if (image_w < 1 || image_h < 1) throw DatasetError("image dimensions must be >= 1");
  const auto xs = tile_offsets_1d(image_w, spec);
  const auto ys = tile_offsets_1d(image_h, spec);
  std::vector<std::pair<int, int>> out;
  for (int y : ys) {
    for (int x : xs) out.emplace_back(x, y);
  }
  return out;
}

DensityHistogram density_histogram(const std::vector<SceneSample>& samples, const TileSpec& spec) {
  DensityHistogram h;
  std::size_t total = 0;
  std::size_t empty = 0;
  for (const auto& s : samples) {
    for (const auto& [ox, oy] : tile_offsets(s.image.width, s.image.height, spec)) {
      std::size_t n = 0;
      for (const auto& b : s.boxes) {
        if (b.cx >= ox && b.cx <= ox + spec.tile_size && b.cy >= oy && b.cy <= oy + spec.tile_size) ++n;
      }
      if (h.counts.size() <= n) h.counts.resize(n + 1, 0);
      ++h.counts[n];
      ++h.tiles;
      total += n;
      h.max = std::max(h.max, n);
      if (n == 0) ++empty;
    }
  }
  if (h.tiles > 0) {
    h.mean = static_cast<double>(total) / static_cast<double>(h.tiles);
    h.empty_fraction = static_cast<double>(empty) / static_cast<double>(h.tiles);
  }
  return h;
}

void split_labeled(std::vector<SceneSample>& samples, double fraction_percent, std::uint64_t seed) {
  if (fraction_percent < 0.0 || fraction_percent > 100.0) throw DatasetError("fraction must be in [0, 100]");
  const std::size_t n = samples.size();
  const auto k = static_cast<std::size_t>(std::floor(fraction_percent / 100.0 * static_cast<double>(n) + 0.5));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  for (auto& s : samples) s.is_labeled = false;
  for (std::size_t i = 0; i < std::min(k, n); ++i) samples[order[i]].is_labeled = true;
}

bool is_fraction_preset(int fraction_percent) {
  return fraction_percent == 1 || fraction_percent == 5 || fraction_percent == 10 || fraction_percent == 20 ||
         fraction_percent == 30;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
  json j;
  j["classes"] = manifest.classes;
  j["image_size"] = manifest.image_size;
  j["samples"] = json::array();
  for (const auto& e : manifest.samples) {
    j["samples"].push_back({{"id", e.id},
                            {"image", e.image},
                            {"annotation", e.annotation},
                            {"is_labeled", e.is_labeled},
                            {"split", e.split}});
  }
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write manifest: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw DatasetError("failed writing manifest: " + path);
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot read manifest: " + path);
  Manifest m;
  try {
    const json j = json::parse(in);
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.image_size = j.value("image_size", 128);
    for (const auto& s : j.at("samples")) {
      ManifestEntry e;
      e.id = s.at("id").get<std::string>();
      e.image = s.at("image").get<std::string>();
      e.annotation = s.value("annotation", std::string());
      e.is_labeled = s.at("is_labeled").get<bool>();
      e.split = s.value("split", std::string("train"));
      m.samples.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw DatasetError("malformed manifest " + path + ": " + ex.what());
  }
  return m;
}

std::vector<SceneSample> load_split(const Manifest& manifest, const std::string& manifest_path,
                                    const std::string& split) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(manifest_path).parent_path();
  ClassTable classes{manifest.classes};
  std::vector<SceneSample> out;
  for (const auto& e : manifest.samples) {
    if (e.split != split) continue;
    SceneSample s;
    s.id = e.id;
    s.is_labeled = e.is_labeled;
    s.image = read_png((root / e.image).string());
    if (s.image.width > manifest.image_size || s.image.height > manifest.image_size) {
      throw DatasetError("image " + e.image + " exceeds manifest image_size; tile it first");
    }
    s.image = pad_or_crop(s.image, manifest.image_size, manifest.image_size);
    if (!e.annotation.empty()) {
      std::ifstream in(root / e.annotation);
      if (!in) throw DatasetError("cannot read annotation: " + e.annotation);
      std::stringstream buf;
      buf << in.rdbuf();
      s.boxes = parse_dota_annotations(buf.str(), classes).boxes;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ddpls
