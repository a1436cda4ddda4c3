// Synthetic multi-domain retinal-style dataset: class identity is carried by
// blob counts drawn on a fundus-like disc, domain identity by a rendering
// style (tint, brightness, contrast, blur, vignette) applied afterwards. The
// two factors are independent by construction, so ground-truth
// disentanglement exists.
//
// On-disk layout:
//   root/domain-<d>/class-<c>/img-<k>.ppm     binary P6, 8-bit RGB
//   root/manifest.csv
// manifest.csv format (field order is fixed):
//   line 1:            <seed>,<domains>,<classes>,<image_size>
//   one line/record:   <relative path>,<label>,<domain>,<split>
//   one line/(d,c):    #count,<d>,<c>,<n>

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deco/prototypes.hpp"
#include "deco/rng.hpp"
#include "deco/tensor.hpp"

namespace deco {

// Style parameters, sampled once per domain from the ranges below.
struct DomainStyle {
  double tint_r, tint_g, tint_b;  // [0.55, 1.15] each
  double brightness;              // [-0.10, 0.12]
  double contrast;                // [0.65, 1.35]
  double blur_sigma;              // [0.0, 1.1]
  double vignette;                // [0.0, 0.45]
};

inline DomainStyle sample_domain_style(SeededRng& rng) {
  DomainStyle s;
  s.tint_r = rng.uniform(0.55, 1.15);
  s.tint_g = rng.uniform(0.55, 1.15);
  s.tint_b = rng.uniform(0.55, 1.15);
  s.brightness = rng.uniform(-0.10, 0.12);
  s.contrast = rng.uniform(0.65, 1.35);
  s.blur_sigma = rng.uniform(0.0, 1.1);
  s.vignette = rng.uniform(0.0, 0.45);
  return s;
}

// Expected blob counts per grade: bright lesions 3c, dark lesions 2c, both
// with a +0/+1 jitter, so the expectation is strictly increasing in c.
inline std::size_t bright_blob_base(std::size_t grade) { return 3 * grade; }
inline std::size_t dark_blob_base(std::size_t grade) { return 2 * grade; }

struct GeneratorConfig {
  std::size_t domains = 4;
  std::size_t classes = 5;
  std::size_t per_cell = 40;     // images per (domain, class) cell
  std::size_t image_size = 64;
  std::uint64_t seed = 20240611;
  // 0 disables the long-tail profile; otherwise per-class counts are
  // max(1, round(per_cell * ratio^c)).
  double longtail_ratio = 0.0;

  std::size_t cell_count(std::size_t c) const {
    if (longtail_ratio <= 0.0) return per_cell;
    const double raw = double(per_cell) * std::pow(longtail_ratio, double(c));
    return std::max<std::size_t>(1, std::size_t(std::llround(raw)));
  }
};

struct SampleRecord {
  std::string path;  // relative to the dataset root
  std::size_t label = 0;
  std::size_t domain = 0;
  std::string split = "train";
};

struct Manifest {
  std::string root;
  std::uint64_t seed = 0;
  std::size_t domains = 0;
  std::size_t classes = 0;
  std::size_t image_size = 0;
  std::vector<SampleRecord> records;

  CountMatrix count_matrix() const {
    CountMatrix m(domains, classes);
    for (const auto& r : records) ++m.n.at(r.domain).at(r.label);
    return m;
  }

  CountMatrix count_matrix(const std::vector<std::size_t>& indices) const {
    CountMatrix m(domains, classes);
    for (std::size_t i : indices)
      ++m.n.at(records[i].domain).at(records[i].label);
    return m;
  }
};

// ---------------------------------------------------------------------------
// PPM codec
// ---------------------------------------------------------------------------

namespace ppm {

inline void write(const std::filesystem::path& path,
                  const std::vector<std::uint8_t>& rgb, std::size_t w,
                  std::size_t h) {
  detail::require(rgb.size() == 3 * w * h, "ppm::write: buffer size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("ppm: cannot write " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()),
            std::streamsize(rgb.size()));
  if (!out) throw std::runtime_error("ppm: short write to " + path.string());
}

inline std::vector<std::uint8_t> read(const std::filesystem::path& path,
                                      std::size_t* w_out, std::size_t* h_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("ppm: cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6")
    throw std::runtime_error("ppm: bad magic in " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w == 0 || h == 0 || maxval != 255)
    throw std::runtime_error("ppm: corrupt header in " + path.string());
  in.get();  // single whitespace after maxval
  std::vector<std::uint8_t> rgb(3 * w * h);
  in.read(reinterpret_cast<char*>(rgb.data()), std::streamsize(rgb.size()));
  if (std::size_t(in.gcount()) != rgb.size())
    throw std::runtime_error("ppm: truncated pixel data in " + path.string());
  *w_out = w;
  *h_out = h;
  return rgb;
}

}  // namespace ppm

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace imaging {

// Planar RGB float image in [0,1], channel-major like the tensors.
struct Canvas {
  std::size_t size;
  std::vector<double> px;  // 3 * size * size

  explicit Canvas(std::size_t s) : size(s), px(3 * s * s, 0.0) {}
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return px[(c * size + y) * size + x];
  }
};

inline void draw_soft_blob(Canvas& img, double cx, double cy, double radius,
                           const double color[3], double opacity) {
  const int lo_y = std::max(0, int(cy - radius - 1));
  const int hi_y = std::min(int(img.size) - 1, int(cy + radius + 1));
  const int lo_x = std::max(0, int(cx - radius - 1));
  const int hi_x = std::min(int(img.size) - 1, int(cx + radius + 1));
  for (int y = lo_y; y <= hi_y; ++y)
    for (int x = lo_x; x <= hi_x; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double a =
          opacity * std::clamp(1.5 * (1.0 - d / radius), 0.0, 1.0);
      if (a <= 0) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        double& v = img.at(c, std::size_t(y), std::size_t(x));
        v = (1.0 - a) * v + a * color[c];
      }
    }
}

inline void gaussian_blur(Canvas& img, double sigma) {
  if (sigma <= 0.05) return;
  const int radius = std::max(1, int(std::ceil(2.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (auto& k : kernel) k /= norm;

  const int s = int(img.size);
  std::vector<double> tmp(img.px.size());
  for (std::size_t c = 0; c < 3; ++c) {
    // horizontal
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const int xx = std::clamp(x + i, 0, s - 1);
          acc += kernel[i + radius] * img.at(c, y, xx);
        }
        tmp[(c * img.size + y) * img.size + x] = acc;
      }
    // vertical
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          const int yy = std::clamp(y + i, 0, s - 1);
          acc += kernel[i + radius] * tmp[(c * img.size + yy) * img.size + x];
        }
        img.at(c, y, x) = acc;
      }
  }
}

// Disc + vessels + grade-dependent blobs, before any domain styling.
inline Canvas render_fundus(std::size_t size, std::size_t grade,
                            SeededRng& rng) {
  Canvas img(size);
  const double s = double(size);

  // background with faint sensor noise
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double n = rng.uniform(-0.01, 0.01);
      img.at(0, y, x) = 0.04 + n;
      img.at(1, y, x) = 0.04 + n;
      img.at(2, y, x) = 0.05 + n;
    }

  const double cx = s / 2 + rng.uniform(-2.0, 2.0);
  const double cy = s / 2 + rng.uniform(-2.0, 2.0);
  const double radius = 0.42 * s + rng.uniform(-1.5, 1.5);

  // disc with a radial falloff
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (d >= radius) continue;
      const double fall = 1.0 - 0.35 * (d / radius) * (d / radius);
      img.at(0, y, x) = 0.70 * fall;
      img.at(1, y, x) = 0.34 * fall;
      img.at(2, y, x) = 0.15 * fall;
    }

  // vessels: dark random walks from the centre
  const double vessel_color[3] = {0.30, 0.10, 0.07};
  for (int v = 0; v < 4; ++v) {
    double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    double px = cx, py = cy;
    const int steps = int(radius * rng.uniform(0.7, 0.95));
    for (int t = 0; t < steps; ++t) {
      angle += rng.uniform(-0.25, 0.25);
      px += std::cos(angle);
      py += std::sin(angle);
      if (px < 1 || py < 1 || px >= s - 1 || py >= s - 1) break;
      draw_soft_blob(img, px, py, 1.1, vessel_color, 0.55);
    }
  }

  // lesions; counts strictly increase with the grade in expectation
  auto place = [&](std::size_t count, double rmin, double rmax,
                   const double color[3]) {
    for (std::size_t b = 0; b < count; ++b) {
      const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double dist = radius * 0.85 * std::sqrt(rng.uniform());
      draw_soft_blob(img, cx + dist * std::cos(ang), cy + dist * std::sin(ang),
                     rng.uniform(rmin, rmax), color, 0.9);
    }
  };
  const double exudate[3] = {0.98, 0.92, 0.55};
  const double hemorrhage[3] = {0.22, 0.04, 0.04};
  if (grade > 0) {
    place(bright_blob_base(grade) + rng.below(2), 1.2, 2.4, exudate);
    place(dark_blob_base(grade) + rng.below(2), 1.4, 2.8, hemorrhage);
  }
  return img;
}

// tint -> brightness -> contrast -> blur -> vignette, then clamp.
inline void apply_style(Canvas& img, const DomainStyle& st) {
  const double tint[3] = {st.tint_r, st.tint_g, st.tint_b};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.size; ++y)
      for (std::size_t x = 0; x < img.size; ++x) {
        double v = img.at(c, y, x) * tint[c] + st.brightness;
        v = (v - 0.5) * st.contrast + 0.5;
        img.at(c, y, x) = v;
      }
  gaussian_blur(img, st.blur_sigma);
  const double half = double(img.size) / 2.0;
  const double maxd2 = 2.0 * half * half;
  for (std::size_t y = 0; y < img.size; ++y)
    for (std::size_t x = 0; x < img.size; ++x) {
      const double d2 =
          (x - half) * (x - half) + (y - half) * (y - half);
      const double f = 1.0 - st.vignette * (d2 / maxd2);
      for (std::size_t c = 0; c < 3; ++c) {
        double& v = img.at(c, y, x);
        v = std::clamp(v * f, 0.0, 1.0);
      }
    }
}

inline std::vector<std::uint8_t> quantize(const Canvas& img) {
  std::vector<std::uint8_t> rgb(3 * img.size * img.size);
  // interleave RGB for the pixmap
  std::size_t i = 0;
  for (std::size_t y = 0; y < img.size; ++y)
    for (std::size_t x = 0; x < img.size; ++x) {
      const std::size_t base = y * img.size + x;
      rgb[i++] = std::uint8_t(std::lround(
          img.px[0 * img.size * img.size + base] * 255.0));
      rgb[i++] = std::uint8_t(std::lround(
          img.px[1 * img.size * img.size + base] * 255.0));
      rgb[i++] = std::uint8_t(std::lround(
          img.px[2 * img.size * img.size + base] * 255.0));
    }
  return rgb;
}

}  // namespace imaging

// ---------------------------------------------------------------------------
// Generation / manifest IO / loading
// ---------------------------------------------------------------------------

inline void save_manifest(const Manifest& m) {
  const auto path = std::filesystem::path(m.root) / "manifest.csv";
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("manifest: cannot write " + path.string());
  out << m.seed << "," << m.domains << "," << m.classes << "," << m.image_size
      << "\n";
  for (const auto& r : m.records)
    out << r.path << "," << r.label << "," << r.domain << "," << r.split
        << "\n";
  const CountMatrix counts = m.count_matrix();
  for (std::size_t d = 0; d < m.domains; ++d)
    for (std::size_t c = 0; c < m.classes; ++c)
      out << "#count," << d << "," << c << "," << counts.n[d][c] << "\n";
}

inline Manifest generate_dataset(const GeneratorConfig& cfg,
                                 const std::string& root) {
  detail::require(cfg.domains >= 1 && cfg.classes >= 2,
                  "generate_dataset: need >= 1 domain and >= 2 classes");
  detail::require(cfg.image_size >= 32, "generate_dataset: image size >= 32");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec)
    throw std::runtime_error("generate_dataset: cannot create " + root + ": " +
                             ec.message());

  SeededRng base(cfg.seed);
  std::vector<DomainStyle> styles;
  for (std::size_t d = 0; d < cfg.domains; ++d) {
    SeededRng srng = base.fork(500000 + d);
    styles.push_back(sample_domain_style(srng));
  }

  Manifest m;
  m.root = root;
  m.seed = cfg.seed;
  m.domains = cfg.domains;
  m.classes = cfg.classes;
  m.image_size = cfg.image_size;

  for (std::size_t d = 0; d < cfg.domains; ++d) {
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      const fs::path dir = fs::path(root) / ("domain-" + std::to_string(d)) /
                           ("class-" + std::to_string(c));
      fs::create_directories(dir, ec);
      if (ec)
        throw std::runtime_error("generate_dataset: cannot create " +
                                 dir.string());
      const std::size_t count = cfg.cell_count(c);
      for (std::size_t k = 0; k < count; ++k) {
        SeededRng irng =
            base.fork((d * cfg.classes + c) * 1000000ULL + k);
        imaging::Canvas img =
            imaging::render_fundus(cfg.image_size, c, irng);
        imaging::apply_style(img, styles[d]);
        const std::string rel = "domain-" + std::to_string(d) + "/class-" +
                                std::to_string(c) + "/img-" +
                                std::to_string(k) + ".ppm";
        ppm::write(fs::path(root) / rel, imaging::quantize(img),
                   cfg.image_size, cfg.image_size);
        m.records.push_back({rel, c, d, "train"});
      }
    }
  }
  save_manifest(m);
  return m;
}

inline Manifest load_manifest(const std::string& root) {
  namespace fs = std::filesystem;
  const auto path = fs::path(root) / "manifest.csv";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("manifest: cannot open " + path.string());

  auto split_line = [](const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    return fields;
  };

  Manifest m;
  m.root = root;
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("manifest: empty file " + path.string());
  auto head = split_line(line);
  if (head.size() != 4)
    throw std::runtime_error("manifest: malformed header in " + path.string());
  m.seed = std::stoull(head[0]);
  m.domains = std::stoul(head[1]);
  m.classes = std::stoul(head[2]);
  m.image_size = std::stoul(head[3]);

  CountMatrix stored(m.domains, m.classes);
  bool has_stored = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("#count,", 0) == 0) {
      auto f = split_line(line.substr(1));
      if (f.size() != 4)
        throw std::runtime_error("manifest: malformed count line: " + line);
      stored.n.at(std::stoul(f[1])).at(std::stoul(f[2])) = std::stoull(f[3]);
      has_stored = true;
      continue;
    }
    auto f = split_line(line);
    if (f.size() != 4)
      throw std::runtime_error("manifest: malformed record line: " + line);
    SampleRecord r;
    r.path = f[0];
    r.label = std::stoul(f[1]);
    r.domain = std::stoul(f[2]);
    r.split = f[3];
    if (r.label >= m.classes || r.domain >= m.domains)
      throw std::runtime_error("manifest: record out of range: " + line);
    m.records.push_back(std::move(r));
  }

  if (has_stored) {
    const CountMatrix actual = m.count_matrix();
    for (std::size_t d = 0; d < m.domains; ++d)
      for (std::size_t c = 0; c < m.classes; ++c)
        if (actual.n[d][c] != stored.n[d][c])
          throw std::runtime_error(
              "manifest: count mismatch at domain " + std::to_string(d) +
              " class " + std::to_string(c) + ": stored " +
              std::to_string(stored.n[d][c]) + ", recounted " +
              std::to_string(actual.n[d][c]));
  }
  return m;
}

// Decode one image to a {3, H, W} tensor scaled to [0, 1].
template <typename T>
Tensor<T> load_image(const std::string& root, const SampleRecord& rec) {
  std::size_t w = 0, h = 0;
  const auto rgb = ppm::read(std::filesystem::path(root) / rec.path, &w, &h);
  Tensor<T> out(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out[(c * h + y) * w + x] =
            T(rgb[(y * w + x) * 3 + c]) / T(255);
  return out;
}

template <typename T>
struct LoadedDataset {
  Manifest manifest;
  std::vector<Tensor<T>> images;  // aligned with manifest.records

  const Tensor<T>& image(std::size_t i) const { return images[i]; }
  std::size_t size() const { return images.size(); }
};

template <typename T>
LoadedDataset<T> load_dataset(const std::string& root) {
  LoadedDataset<T> ds;
  ds.manifest = load_manifest(root);
  ds.images.reserve(ds.manifest.records.size());
  for (const auto& rec : ds.manifest.records) {
    Tensor<T> img = load_image<T>(root, rec);
    if (img.dim(1) != ds.manifest.image_size ||
        img.dim(2) != ds.manifest.image_size)
      throw std::runtime_error("dataset: image size mismatch for " + rec.path);
    ds.images.push_back(std::move(img));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Protocol splits (index-based, disjoint and exhaustive)
// ---------------------------------------------------------------------------

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

inline Split split_leave_one_domain_out(const Manifest& m,
                                        std::size_t held_out) {
  detail::require(held_out < m.domains,
                  "split: unknown domain " + std::to_string(held_out));
  Split s;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (m.records[i].domain == held_out)
      s.test.push_back(i);
    else
      s.train.push_back(i);
  }
  return s;
}

inline Split split_single_source(const Manifest& m, std::size_t source) {
  detail::require(source < m.domains,
                  "split: unknown domain " + std::to_string(source));
  Split s;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (m.records[i].domain == source)
      s.train.push_back(i);
    else
      s.test.push_back(i);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Batch iteration with cross-domain pairing
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<std::size_t> indices;  // record indices
  std::vector<std::size_t> pair;     // position of the partner within batch
};

class BatchIterator {
 public:
  BatchIterator(std::vector<std::size_t> record_indices,
                const Manifest& manifest, std::size_t batch_size,
                SeededRng rng)
      : indices_(std::move(record_indices)),
        batch_(batch_size),
        rng_(rng) {
    detail::require(batch_ >= 2, "BatchIterator: batch size must be >= 2");
    detail::require(batch_ <= indices_.size(),
                    "BatchIterator: batch size exceeds dataset size");
    domains_.reserve(indices_.size());
    for (std::size_t i : indices_)
      domains_.push_back(manifest.records.at(i).domain);
  }

  // Deterministic shuffled batches for a 1-based epoch. Each batch carries a
  // pairing j(i) != i that prefers a partner from another domain. A trailing
  // remainder of size 1 is dropped (it cannot be paired).
  std::vector<Batch> epoch_batches(std::size_t epoch) {
    SeededRng rng = rng_.fork(epoch);
    std::vector<std::size_t> order(indices_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i-- > 1;)
      std::swap(order[i], order[rng.below(i + 1)]);

    std::vector<Batch> batches;
    for (std::size_t start = 0; start + 2 <= order.size(); start += batch_) {
      const std::size_t n = std::min(batch_, order.size() - start);
      if (n < 2) break;
      Batch b;
      b.indices.reserve(n);
      for (std::size_t i = 0; i < n; ++i)
        b.indices.push_back(indices_[order[start + i]]);
      b.pair.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t di = domains_[order[start + i]];
        std::vector<std::size_t> cross, any;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          any.push_back(j);
          if (domains_[order[start + j]] != di) cross.push_back(j);
        }
        const auto& pool = cross.empty() ? any : cross;
        b.pair[i] = pool[rng.below(pool.size())];
      }
      batches.push_back(std::move(b));
    }
    return batches;
  }

  std::size_t dataset_size() const { return indices_.size(); }

 private:
  std::vector<std::size_t> indices_;
  std::vector<std::size_t> domains_;
  std::size_t batch_;
  SeededRng rng_;
};

}  // namespace deco
