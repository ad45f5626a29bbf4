#include "dsba/plot.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>

#include "dsba/errors.hpp"

namespace dsba {

namespace {

// Column-major 5x7 glyphs for ' ' .. '_', bit 0 at the top.
constexpr std::array<std::array<std::uint8_t, 5>, 64> kFont{{
    {0x00, 0x00, 0x00, 0x00, 0x00}, {0x00, 0x00, 0x5F, 0x00, 0x00}, {0x00, 0x07, 0x00, 0x07, 0x00},
    {0x14, 0x7F, 0x14, 0x7F, 0x14}, {0x24, 0x2A, 0x7F, 0x2A, 0x12}, {0x23, 0x13, 0x08, 0x64, 0x62},
    {0x36, 0x49, 0x56, 0x20, 0x50}, {0x00, 0x08, 0x07, 0x03, 0x00}, {0x00, 0x1C, 0x22, 0x41, 0x00},
    {0x00, 0x41, 0x22, 0x1C, 0x00}, {0x2A, 0x1C, 0x7F, 0x1C, 0x2A}, {0x08, 0x08, 0x3E, 0x08, 0x08},
    {0x00, 0x50, 0x30, 0x00, 0x00}, {0x08, 0x08, 0x08, 0x08, 0x08}, {0x00, 0x00, 0x60, 0x60, 0x00},
    {0x20, 0x10, 0x08, 0x04, 0x02}, {0x3E, 0x51, 0x49, 0x45, 0x3E}, {0x00, 0x42, 0x7F, 0x40, 0x00},
    {0x72, 0x49, 0x49, 0x49, 0x46}, {0x21, 0x41, 0x49, 0x4D, 0x33}, {0x18, 0x14, 0x12, 0x7F, 0x10},
    {0x27, 0x45, 0x45, 0x45, 0x39}, {0x3C, 0x4A, 0x49, 0x49, 0x31}, {0x41, 0x21, 0x11, 0x09, 0x07},
    {0x36, 0x49, 0x49, 0x49, 0x36}, {0x46, 0x49, 0x49, 0x29, 0x1E}, {0x00, 0x00, 0x14, 0x00, 0x00},
    {0x00, 0x40, 0x34, 0x00, 0x00}, {0x00, 0x08, 0x14, 0x22, 0x41}, {0x14, 0x14, 0x14, 0x14, 0x14},
    {0x00, 0x41, 0x22, 0x14, 0x08}, {0x02, 0x01, 0x59, 0x09, 0x06}, {0x3E, 0x41, 0x5D, 0x59, 0x4E},
    {0x7C, 0x12, 0x11, 0x12, 0x7C}, {0x7F, 0x49, 0x49, 0x49, 0x36}, {0x3E, 0x41, 0x41, 0x41, 0x22},
    {0x7F, 0x41, 0x41, 0x41, 0x3E}, {0x7F, 0x49, 0x49, 0x49, 0x41}, {0x7F, 0x09, 0x09, 0x09, 0x01},
    {0x3E, 0x41, 0x41, 0x51, 0x73}, {0x7F, 0x08, 0x08, 0x08, 0x7F}, {0x00, 0x41, 0x7F, 0x41, 0x00},
    {0x20, 0x40, 0x41, 0x3F, 0x01}, {0x7F, 0x08, 0x14, 0x22, 0x41}, {0x7F, 0x40, 0x40, 0x40, 0x40},
    {0x7F, 0x02, 0x1C, 0x02, 0x7F}, {0x7F, 0x04, 0x08, 0x10, 0x7F}, {0x3E, 0x41, 0x41, 0x41, 0x3E},
    {0x7F, 0x09, 0x09, 0x09, 0x06}, {0x3E, 0x41, 0x51, 0x21, 0x5E}, {0x7F, 0x09, 0x19, 0x29, 0x46},
    {0x26, 0x49, 0x49, 0x49, 0x32}, {0x03, 0x01, 0x7F, 0x01, 0x03}, {0x3F, 0x40, 0x40, 0x40, 0x3F},
    {0x1F, 0x20, 0x40, 0x20, 0x1F}, {0x3F, 0x40, 0x38, 0x40, 0x3F}, {0x63, 0x14, 0x08, 0x14, 0x63},
    {0x03, 0x04, 0x78, 0x04, 0x03}, {0x61, 0x59, 0x49, 0x4D, 0x43}, {0x00, 0x7F, 0x41, 0x41, 0x41},
    {0x02, 0x04, 0x08, 0x10, 0x20}, {0x00, 0x41, 0x41, 0x41, 0x7F}, {0x04, 0x02, 0x01, 0x02, 0x04},
    {0x40, 0x40, 0x40, 0x40, 0x40},
}};

constexpr std::array<Rgb, 8> kPalette{{{31, 119, 180},
                                       {255, 127, 14},
                                       {44, 160, 44},
                                       {214, 39, 40},
                                       {148, 103, 189},
                                       {140, 86, 75},
                                       {227, 119, 194},
                                       {127, 127, 127}}};

constexpr Rgb kBlack{0, 0, 0};
constexpr Rgb kGrid{225, 225, 225};

std::string tick_label(double v) {
  std::ostringstream os;
  if (v != 0.0 && (std::abs(v) >= 1e4 || std::abs(v) < 1e-2))
    os << std::setprecision(1) << std::scientific << v;
  else
    os << std::setprecision(3) << v;
  return os.str();
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

// Plot frame: a canvas with a data rectangle and linear axis maps.
struct Frame {
  Canvas canvas{640, 420};
  int left = 70, right = 620, top = 40, bottom = 370;
  Range xr, yr;

  int px(double x) const { return left + static_cast<int>(std::lround((x - xr.lo) / (xr.hi - xr.lo) * (right - left))); }
  int py(double y) const { return bottom - static_cast<int>(std::lround((y - yr.lo) / (yr.hi - yr.lo) * (bottom - top))); }

  void axes(const std::string& title, const std::string& x_label) {
    canvas.text(left, 12, title, kBlack, 2);
    for (int t = 0; t <= 4; ++t) {
      const double yv = yr.lo + (yr.hi - yr.lo) * t / 4.0;
      const double xv = xr.lo + (xr.hi - xr.lo) * t / 4.0;
      const int y = py(yv), x = px(xv);
      canvas.line(left, y, right, y, kGrid);
      canvas.line(x, top, x, bottom, kGrid);
      const auto yl = tick_label(yv);
      canvas.text(left - 4 - kGlyphWidth * static_cast<int>(yl.size()), y - 3, yl, kBlack);
      const auto xl = tick_label(xv);
      canvas.text(x - kGlyphWidth * static_cast<int>(xl.size()) / 2, bottom + 6, xl, kBlack);
    }
    canvas.line(left, bottom, right, bottom, kBlack);
    canvas.line(left, top, left, bottom, kBlack);
    canvas.text((left + right) / 2 - kGlyphWidth * static_cast<int>(x_label.size()) / 2, bottom + 22, x_label, kBlack);
  }

  void legend(const std::vector<std::string>& names) {
    int y = top + 6;
    for (std::size_t i = 0; i < names.size(); ++i, y += 12) {
      const auto c = kPalette[i % kPalette.size()];
      canvas.fill_rect(right - 150, y, right - 140, y + 7, c);
      canvas.text(right - 134, y, names[i], kBlack);
    }
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() { png_destroy_write_struct(&png, &info); }
};

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

Canvas::Canvas(int width, int height, Rgb background)
    : width_(width), height_(height), pixels_(static_cast<std::size_t>(width) * height * 3) {
  if (width <= 0 || height <= 0) throw PreconditionError("canvas needs positive dimensions");
  fill_rect(0, 0, width - 1, height - 1, background);
}

Rgb Canvas::at(int x, int y) const {
  const auto i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  return {pixels_[i], pixels_[i + 1], pixels_[i + 2]};
}

void Canvas::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  const auto i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  pixels_[i] = c.r;
  pixels_[i + 1] = c.g;
  pixels_[i + 2] = c.b;
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
}

void Canvas::line(int x0, int y0, int x1, int y1, Rgb c) {
  // Bresenham
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) err += dy, x0 += sx;
    if (e2 <= dx) err += dx, y0 += sy;
  }
}

void Canvas::text(int x, int y, std::string_view s, Rgb c, int scale) {
  for (char ch : s) {
    if (ch >= 'a' && ch <= 'z') ch = static_cast<char>(ch - 'a' + 'A');
    if (ch < ' ' || ch > '_') ch = '?';
    const auto& glyph = kFont[static_cast<std::size_t>(ch - ' ')];
    for (int col = 0; col < 5; ++col)
      for (int row = 0; row < 7; ++row)
        if (glyph[static_cast<std::size_t>(col)] >> row & 1)
          fill_rect(x + col * scale, y + row * scale, x + (col + 1) * scale - 1, y + (row + 1) * scale - 1, c);
    x += kGlyphWidth * scale;
  }
}

void Canvas::blit(const torch::Tensor& image, int x, int y, int zoom) {
  auto img = image.detach().to(torch::kFloat64).clamp(0.0, 1.0);
  if (img.dim() != 3) throw PreconditionError("blit expects a [C,H,W] image");
  if (img.size(0) == 1) img = img.expand({3, img.size(1), img.size(2)});
  img = (img * 255.0).round().to(torch::kUInt8).contiguous();
  const auto h = img.size(1), w = img.size(2);
  const auto* p = img.data_ptr<std::uint8_t>();
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t q = 0; q < w; ++q) {
      const Rgb c{p[r * w + q], p[h * w + r * w + q], p[2 * h * w + r * w + q]};
      fill_rect(x + static_cast<int>(q) * zoom, y + static_cast<int>(r) * zoom, x + static_cast<int>(q + 1) * zoom - 1,
                y + static_cast<int>(r + 1) * zoom - 1, c);
    }
}

void Canvas::save_png(const std::filesystem::path& file) const {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(file.string().c_str(), "wb"));
  if (!fp) throw Error("cannot write " + file.string());
  PngWriter w;
  w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!w.png) throw Error("libpng initialization failed");
  w.info = png_create_info_struct(w.png);
  if (!w.info) throw Error("libpng initialization failed");
  if (setjmp(png_jmpbuf(w.png))) throw Error("PNG encoding failed for " + file.string());
  png_init_io(w.png, fp.get());
  png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(width_), static_cast<png_uint_32>(height_), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png, w.info);
  for (int y = 0; y < height_; ++y)
    png_write_row(w.png, const_cast<png_bytep>(pixels_.data() + static_cast<std::size_t>(y) * width_ * 3));
  png_write_end(w.png, nullptr);
}

void plot_lines(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                const std::filesystem::path& file) {
  Frame f;
  for (const auto& s : series) {
    for (double v : s.x) f.xr.add(v);
    for (double v : s.y) f.yr.add(v);
  }
  f.xr.finish();
  f.yr.finish();
  f.axes(title, x_label);
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto c = kPalette[k % kPalette.size()];
    names.push_back(s.label);
    bool have_prev = false;
    int prev_x = 0, prev_y = 0;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        have_prev = false;
        continue;
      }
      const int x = f.px(s.x[i]), y = f.py(s.y[i]);
      if (have_prev) f.canvas.line(prev_x, prev_y, x, y, c);
      f.canvas.fill_rect(x - 1, y - 1, x + 1, y + 1, c);
      prev_x = x, prev_y = y, have_prev = true;
    }
  }
  f.legend(names);
  f.canvas.save_png(file);
}

void plot_scatter(const torch::Tensor& points, const std::vector<int>& group, const std::vector<std::string>& names,
                  const std::string& title, const std::filesystem::path& file) {
  if (points.dim() != 2 || points.size(1) < 2 || static_cast<std::size_t>(points.size(0)) != group.size())
    throw PreconditionError("scatter needs [n,2] points and one group per point");
  const auto p = points.to(torch::kFloat64).contiguous();
  const auto* d = p.data_ptr<double>();
  const auto stride = p.size(1);
  Frame f;
  for (std::int64_t i = 0; i < p.size(0); ++i) {
    f.xr.add(d[i * stride]);
    f.yr.add(d[i * stride + 1]);
  }
  f.xr.finish();
  f.yr.finish();
  f.axes(title, "component 1");
  for (std::int64_t i = 0; i < p.size(0); ++i) {
    const auto c = kPalette[static_cast<std::size_t>(group[static_cast<std::size_t>(i)]) % kPalette.size()];
    const int x = f.px(d[i * stride]), y = f.py(d[i * stride + 1]);
    f.canvas.fill_rect(x - 2, y - 2, x + 2, y + 2, c);
  }
  f.legend(names);
  f.canvas.save_png(file);
}

void plot_histograms(const std::vector<double>& a, const std::vector<double>& b, const std::vector<std::string>& names,
                     int bins, const std::string& title, const std::filesystem::path& file) {
  if (bins <= 0) throw PreconditionError("histogram needs at least one bin");
  Range r;
  for (double v : a) r.add(v);
  for (double v : b) r.add(v);
  r.finish();
  const auto counts = [&](const std::vector<double>& v) {
    std::vector<double> c(static_cast<std::size_t>(bins), 0.0);
    for (double x : v) {
      if (!std::isfinite(x)) continue;
      const auto k = std::clamp(static_cast<int>((x - r.lo) / (r.hi - r.lo) * bins), 0, bins - 1);
      c[static_cast<std::size_t>(k)] += 1.0 / static_cast<double>(v.size());
    }
    return c;
  };
  const auto ca = counts(a), cb = counts(b);
  Frame f;
  f.xr = r;
  f.yr.add(0.0);
  for (double v : ca) f.yr.add(v);
  for (double v : cb) f.yr.add(v);
  f.yr.finish();
  f.yr.lo = 0.0;
  f.axes(title, "entropy");
  const double width = (r.hi - r.lo) / bins;
  for (int k = 0; k < bins; ++k) {
    const double x0 = r.lo + k * width;
    const int xa = f.px(x0), xm = f.px(x0 + width / 2), xb = f.px(x0 + width);
    f.canvas.fill_rect(xa, f.py(ca[static_cast<std::size_t>(k)]), xm - 1, f.py(0.0), kPalette[0]);
    f.canvas.fill_rect(xm, f.py(cb[static_cast<std::size_t>(k)]), xb - 1, f.py(0.0), kPalette[1]);
  }
  f.legend(names);
  f.canvas.save_png(file);
}

void plot_residuals(const torch::Tensor& clean, const torch::Tensor& poisoned, double gain,
                    const std::filesystem::path& file) {
  if (!clean.sizes().equals(poisoned.sizes()) || clean.dim() != 4)
    throw PreconditionError("residual plot needs two [N,C,H,W] batches of equal shape");
  constexpr int kZoom = 3, kPad = 6, kLabel = 70;
  const auto n = static_cast<int>(clean.size(0));
  const auto h = static_cast<int>(clean.size(2)) * kZoom, w = static_cast<int>(clean.size(3)) * kZoom;
  Canvas canvas(kLabel + n * (w + kPad) + kPad, 3 * (h + kPad) + kPad + 14);
  canvas.text(kPad, 4, "residual x" + tick_label(gain), kBlack);
  const std::array<std::string, 3> rows{"clean", "trigger", "residual"};
  const auto residual = (0.5 + gain * (poisoned - clean)).clamp(0.0, 1.0);
  for (int r = 0; r < 3; ++r) {
    const int y = 18 + r * (h + kPad);
    canvas.text(kPad, y + h / 2 - 3, rows[static_cast<std::size_t>(r)], kBlack);
    for (int i = 0; i < n; ++i) {
      const auto& src = r == 0 ? clean : r == 1 ? poisoned : residual;
      canvas.blit(src[i], kLabel + i * (w + kPad), y, kZoom);
    }
  }
  canvas.save_png(file);
}

}  // namespace dsba
