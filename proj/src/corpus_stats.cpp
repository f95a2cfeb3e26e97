#include "manipshield/corpus_stats.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "manipshield/error.hpp"
#include "manipshield/parallel.hpp"

namespace manipshield::corpus {

namespace {

void check_size(const RgbImage& img) {
  if (img.width < 3 || img.height < 3) {
    fail(ErrorKind::kShape, "image must be at least 3x3, got " + std::to_string(img.width) + "x" +
                                std::to_string(img.height));
  }
  if (img.pixels.size() != img.width * img.height * 3) {
    fail(ErrorKind::kShape, "pixel buffer does not match image size");
  }
}

// Luminance scaled by 1000 so the BT.601 weights stay integral.
inline std::int64_t luma1000(const std::uint8_t* p) {
  return 299 * std::int64_t{p[0]} + 587 * std::int64_t{p[1]} + 114 * std::int64_t{p[2]};
}

// Population variance from exact integer moments: (n*sum_sq - sum^2) / n^2.
double exact_variance(__int128 sum, __int128 sum_sq, std::int64_t n) {
  const __int128 num = static_cast<__int128>(n) * sum_sq - sum * sum;
  return static_cast<double>(num) / (static_cast<double>(n) * static_cast<double>(n));
}

struct Neumaier {
  double sum = 0.0;
  double comp = 0.0;
  void add(double v) {
    const double t = sum + v;
    if (std::abs(sum) >= std::abs(v)) comp += (sum - t) + v;
    else comp += (v - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

struct RowMoments {
  __int128 y = 0, y2 = 0;
  std::int64_t rg = 0, yb = 0;
  __int128 rg2 = 0, yb2 = 0;
};

}  // namespace

ImageStats image_stats(const RgbImage& img) {
  check_size(img);
  const std::size_t w = img.width;
  const std::size_t h = img.height;
  const auto rows = static_cast<std::int64_t>(h);
  const bool par = w * h >= (1u << 16);

  std::vector<RowMoments> moments(h);
  std::vector<std::int64_t> luma(w * h);
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t r = 0; r < rows; ++r) {
    RowMoments m;
    for (std::size_t c = 0; c < w; ++c) {
      const std::uint8_t* p = img.pixels.data() + img.index(static_cast<std::size_t>(r), c);
      const std::int64_t y = luma1000(p);
      luma[static_cast<std::size_t>(r) * w + c] = y;
      m.y += y;
      m.y2 += static_cast<__int128>(y) * y;
      const std::int64_t rg = std::int64_t{p[0]} - p[1];
      const std::int64_t yb2 = std::int64_t{p[0]} + p[1] - 2 * std::int64_t{p[2]};  // 2 * yb
      m.rg += rg;
      m.rg2 += rg * rg;
      m.yb += yb2;
      m.yb2 += yb2 * yb2;
    }
    moments[static_cast<std::size_t>(r)] = m;
  }
  RowMoments t;
  for (const auto& m : moments) {
    t.y += m.y;
    t.y2 += m.y2;
    t.rg += m.rg;
    t.rg2 += m.rg2;
    t.yb += m.yb;
    t.yb2 += m.yb2;
  }
  const auto n = static_cast<std::int64_t>(w * h);
  ImageStats s;
  s.brightness = static_cast<double>(t.y) / (1000.0 * static_cast<double>(n));
  s.contrast = std::sqrt(exact_variance(t.y, t.y2, n)) / 1000.0;
  const double var_rg = exact_variance(t.rg, t.rg2, n);
  const double var_yb = exact_variance(t.yb, t.yb2, n) / 4.0;
  const double mu_rg = static_cast<double>(t.rg) / static_cast<double>(n);
  const double mu_yb = static_cast<double>(t.yb) / (2.0 * static_cast<double>(n));
  s.colorfulness = std::sqrt(var_rg + var_yb) + 0.3 * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb);

  // Sobel magnitude over interior pixels; two passes with compensated row sums.
  const std::size_t iw = w - 2;
  const auto inner_rows = static_cast<std::int64_t>(h - 2);
  std::vector<double> mag(iw * (h - 2));
  std::vector<Neumaier> row_sum(h - 2);
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t rr = 0; rr < inner_rows; ++rr) {
    const std::size_t r = static_cast<std::size_t>(rr) + 1;
    Neumaier acc;
    for (std::size_t c = 1; c + 1 < w; ++c) {
      const std::int64_t* up = luma.data() + (r - 1) * w;
      const std::int64_t* mid = luma.data() + r * w;
      const std::int64_t* dn = luma.data() + (r + 1) * w;
      const std::int64_t gx = (up[c + 1] + 2 * mid[c + 1] + dn[c + 1]) - (up[c - 1] + 2 * mid[c - 1] + dn[c - 1]);
      const std::int64_t gy = (dn[c - 1] + 2 * dn[c] + dn[c + 1]) - (up[c - 1] + 2 * up[c] + up[c + 1]);
      const double m = std::sqrt(static_cast<double>(gx * gx + gy * gy)) / 1000.0;
      mag[(r - 1) * iw + (c - 1)] = m;
      acc.add(m);
    }
    row_sum[r - 1] = acc;
  }
  Neumaier total;
  for (const auto& rs : row_sum) {
    total.add(rs.sum);
    total.add(rs.comp);
  }
  const double count = static_cast<double>(mag.size());
  const double mean = total.value() / count;
  std::vector<Neumaier> row_sq(h - 2);
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t rr = 0; rr < inner_rows; ++rr) {
    Neumaier acc;
    const double* row = mag.data() + static_cast<std::size_t>(rr) * iw;
    for (std::size_t c = 0; c < iw; ++c) acc.add((row[c] - mean) * (row[c] - mean));
    row_sq[static_cast<std::size_t>(rr)] = acc;
  }
  Neumaier sq;
  for (const auto& rs : row_sq) {
    sq.add(rs.sum);
    sq.add(rs.comp);
  }
  s.si = std::sqrt(std::max(0.0, sq.value() / count));
  return s;
}

ImageStats image_stats_reference(const RgbImage& img) {
  check_size(img);
  const std::size_t w = img.width;
  const std::size_t h = img.height;
  auto at = [&](std::size_t r, std::size_t c, int ch) {
    return static_cast<double>(img.pixels[img.index(r, c) + static_cast<std::size_t>(ch)]);
  };
  auto lum = [&](std::size_t r, std::size_t c) {
    return 0.299 * at(r, c, 0) + 0.587 * at(r, c, 1) + 0.114 * at(r, c, 2);
  };
  const double n = static_cast<double>(w * h);
  double sy = 0.0, srg = 0.0, syb = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      sy += lum(r, c);
      srg += at(r, c, 0) - at(r, c, 1);
      syb += 0.5 * (at(r, c, 0) + at(r, c, 1)) - at(r, c, 2);
    }
  }
  const double my = sy / n, mrg = srg / n, myb = syb / n;
  double vy = 0.0, vrg = 0.0, vyb = 0.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      vy += (lum(r, c) - my) * (lum(r, c) - my);
      const double rg = at(r, c, 0) - at(r, c, 1) - mrg;
      const double yb = 0.5 * (at(r, c, 0) + at(r, c, 1)) - at(r, c, 2) - myb;
      vrg += rg * rg;
      vyb += yb * yb;
    }
  }
  ImageStats s;
  s.brightness = my;
  s.contrast = std::sqrt(vy / n);
  s.colorfulness = std::sqrt(vrg / n + vyb / n) + 0.3 * std::sqrt(mrg * mrg + myb * myb);

  std::vector<double> mags;
  static constexpr int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  for (std::size_t r = 1; r + 1 < h; ++r) {
    for (std::size_t c = 1; c + 1 < w; ++c) {
      double gx = 0.0, gy = 0.0;
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          const double v = lum(r + static_cast<std::size_t>(i) - 1, c + static_cast<std::size_t>(j) - 1);
          gx += kx[i][j] * v;
          gy += ky[i][j] * v;
        }
      }
      mags.push_back(std::sqrt(gx * gx + gy * gy));
    }
  }
  double ms = 0.0;
  for (double m : mags) ms += m;
  const double mm = ms / static_cast<double>(mags.size());
  double mv = 0.0;
  for (double m : mags) mv += (m - mm) * (m - mm);
  s.si = std::sqrt(mv / static_cast<double>(mags.size()));
  return s;
}

std::vector<ImageStats> batch_stats(std::span<const RgbImage> images) {
  std::vector<ImageStats> out(images.size());
  const auto n = static_cast<std::int64_t>(images.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = image_stats(images[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<ImageStats> batch_stats_serial(std::span<const RgbImage> images) {
  std::vector<ImageStats> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(image_stats_reference(img));
  return out;
}

RgbImage rotate90(const RgbImage& img) {
  RgbImage out;
  out.width = img.height;
  out.height = img.width;
  out.pixels.resize(img.pixels.size());
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      // (r, c) -> (c, H - 1 - r)
      const std::size_t dst = out.index(c, img.height - 1 - r);
      std::memcpy(&out.pixels[dst], &img.pixels[img.index(r, c)], 3);
    }
  }
  return out;
}

namespace {

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open image '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

RgbImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    fail(ErrorKind::kFormat, "cannot decode PNG '" + path + "': " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = image.width;
  out.height = image.height;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    fail(ErrorKind::kFormat, "cannot decode PNG '" + path + "': " + image.message);
  }
  return out;
}

}  // namespace

RgbImage decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_ws();
    std::size_t v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) fail(ErrorKind::kFormat, "malformed PPM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    fail(ErrorKind::kFormat, "not a binary PPM (P6)");
  }
  pos = 2;
  RgbImage img;
  img.width = number();
  img.height = number();
  const std::size_t maxval = number();
  if (maxval == 0 || maxval > 255) fail(ErrorKind::kFormat, "PPM maxval must be 1..255");
  ++pos;  // single whitespace before the raster
  const std::size_t need = img.width * img.height * 3;
  if (bytes.size() < pos + need) fail(ErrorKind::kLength, "truncated PPM raster");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255 + maxval / 2) / maxval);
  }
  return img;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  const std::string header =
      "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

void write_ppm(const RgbImage& image, const std::string& path) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path + "'");
}

RgbImage read_image(const std::string& path) {
  const auto bytes = slurp(path);
  static constexpr std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) return decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
  fail(ErrorKind::kFormat, "'" + path + "' is neither PNG nor binary PPM");
}

Distribution describe(std::span<const double> values) {
  Distribution d;
  d.count = values.size();
  if (values.empty()) return d;
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  d.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - d.mean) * (x - d.mean);
  d.std = std::sqrt(ss / static_cast<double>(v.size()));
  // Linear interpolation between order statistics.
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  d.q1 = quantile(0.25);
  d.median = quantile(0.5);
  d.q3 = quantile(0.75);
  return d;
}

namespace {

GroupSummary summarize(std::span<const ImageStats> stats) {
  std::vector<double> b, c, col, si;
  for (const auto& s : stats) {
    b.push_back(s.brightness);
    c.push_back(s.contrast);
    col.push_back(s.colorfulness);
    si.push_back(s.si);
  }
  return {describe(b), describe(c), describe(col), describe(si)};
}

ImageStats mean_delta(const GroupSummary& g, const GroupSummary& ref) {
  return {g.brightness.mean - ref.brightness.mean, g.contrast.mean - ref.contrast.mean,
          g.colorfulness.mean - ref.colorfulness.mean, g.si.mean - ref.si.mean};
}

nlohmann::ordered_json dist_json(const Distribution& d) {
  return {{"count", d.count}, {"mean", d.mean},     {"std", d.std},
          {"q1", d.q1},       {"median", d.median}, {"q3", d.q3}};
}

}  // namespace

CorpusSummary corpus_summary(const std::map<std::string, std::vector<ImageStats>>& groups,
                             const std::string& reference_group) {
  if (groups.empty()) fail(ErrorKind::kShape, "corpus summary needs at least one group");
  CorpusSummary out;
  out.reference_group = reference_group;
  std::vector<ImageStats> pooled;
  for (const auto& [name, stats] : groups) {
    if (stats.empty()) {
      out.warnings.push_back("group '" + name + "' is empty and was skipped");
      continue;
    }
    out.groups[name] = summarize(stats);
    if (name != reference_group) pooled.insert(pooled.end(), stats.begin(), stats.end());
  }
  auto ref = out.groups.find(reference_group);
  if (ref == out.groups.end()) {
    out.warnings.push_back("reference group '" + reference_group + "' missing; no deltas computed");
    return out;
  }
  for (const auto& [name, g] : out.groups) {
    if (name != reference_group) out.deltas[name] = mean_delta(g, ref->second);
  }
  if (!pooled.empty()) out.deltas["manipulated"] = mean_delta(summarize(pooled), ref->second);
  return out;
}

nlohmann::ordered_json to_json(const CorpusSummary& s) {
  nlohmann::ordered_json j;
  j["kind"] = "corpus_summary";
  j["reference_group"] = s.reference_group;
  nlohmann::ordered_json groups = nlohmann::ordered_json::object();
  for (const auto& [name, g] : s.groups) {
    groups[name] = {{"brightness", dist_json(g.brightness)},
                    {"contrast", dist_json(g.contrast)},
                    {"colorfulness", dist_json(g.colorfulness)},
                    {"si", dist_json(g.si)}};
  }
  j["groups"] = std::move(groups);
  nlohmann::ordered_json deltas = nlohmann::ordered_json::object();
  for (const auto& [name, d] : s.deltas) {
    deltas[name] = {{"brightness", d.brightness},
                    {"contrast", d.contrast},
                    {"colorfulness", d.colorfulness},
                    {"si", d.si}};
  }
  j["deltas"] = std::move(deltas);
  j["warnings"] = s.warnings;
  return j;
}

}  // namespace manipshield::corpus
