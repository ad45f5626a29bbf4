#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace dsba {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

/// 8-bit RGB raster with a few drawing primitives and PNG output.
class Canvas {
 public:
  Canvas(int width, int height, Rgb background = {255, 255, 255});

  int width() const { return width_; }
  int height() const { return height_; }
  Rgb at(int x, int y) const;

  void set(int x, int y, Rgb c);
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);
  void line(int x0, int y0, int x1, int y1, Rgb c);
  /// 5x7 bitmap glyphs scaled by `scale`; lowercase is drawn as uppercase.
  void text(int x, int y, std::string_view s, Rgb c, int scale = 1);
  /// Pastes an image tensor [3,H,W] (or [1,H,W]) in [0,1], each pixel enlarged `zoom` times.
  void blit(const torch::Tensor& image, int x, int y, int zoom = 1);

  /// Throws Error when the file cannot be written.
  void save_png(const std::filesystem::path& file) const;

 private:
  int width_, height_;
  std::vector<std::uint8_t> pixels_;
};

inline constexpr int kGlyphWidth = 6;  // advance including one column of spacing

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

/// Line chart with axes, tick labels and a legend. Non-finite points are skipped.
void plot_lines(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                const std::filesystem::path& file);

/// Scatter of 2-D points [n,2] colored by `group` (0 or 1), with legend names.
void plot_scatter(const torch::Tensor& points, const std::vector<int>& group, const std::vector<std::string>& names,
                  const std::string& title, const std::filesystem::path& file);

/// Overlaid histograms of two populations on a shared bin grid.
void plot_histograms(const std::vector<double>& a, const std::vector<double>& b, const std::vector<std::string>& names,
                     int bins, const std::string& title, const std::filesystem::path& file);

/// Rows of images [N,C,H,W] in [0,1]: clean, triggered, and the residual amplified by `gain`
/// around mid-gray.
void plot_residuals(const torch::Tensor& clean, const torch::Tensor& poisoned, double gain,
                    const std::filesystem::path& file);

}  // namespace dsba
