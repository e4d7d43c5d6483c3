#include "ktir/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "ktir/errors.hpp"

namespace ktir {
namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_header_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

}  // namespace

Image Image::filled(std::size_t width, std::size_t height, double r, double g, double b) {
  Image img;
  img.width = width;
  img.height = height;
  img.channels = 3;
  img.pixels.resize(width * height * 3);
  for (std::size_t i = 0; i < width * height; ++i) {
    img.pixels[3 * i] = r;
    img.pixels[3 * i + 1] = g;
    img.pixels[3 * i + 2] = b;
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw InvalidArgument("PPM output needs 3 channels");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  for (double v : image.pixels) {
    const auto q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(static_cast<char>(q));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  if (next_header_token(in) != "P6") throw IoError(path.string() + " is not a binary PPM");
  Image img;
  int maxval = 0;
  try {
    img.width = std::stoul(next_header_token(in));
    img.height = std::stoul(next_header_token(in));
    maxval = std::stoi(next_header_token(in));
  } catch (const std::exception&) {
    throw IoError("bad PPM header in " + path.string());
  }
  if (maxval <= 0 || maxval > 255) throw IoError("unsupported PPM maxval in " + path.string());
  img.channels = 3;
  img.pixels.resize(img.width * img.height * 3);
  for (auto& v : img.pixels) {
    const int c = in.get();
    if (c == EOF) throw IoError("truncated PPM payload in " + path.string());
    v = static_cast<double>(c) / static_cast<double>(maxval);
  }
  return img;
}

Image resize_image(const Image& image, std::size_t width, std::size_t height) {
  if (image.width == width && image.height == height) return image;
  if (width == 0 || height == 0 || image.width == 0 || image.height == 0) {
    throw InvalidArgument("resize_image: empty dimensions");
  }
  Image out;
  out.width = width;
  out.height = height;
  out.channels = image.channels;
  out.pixels.assign(width * height * image.channels, 0.0);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const auto y0 = static_cast<std::size_t>(std::floor(y * sy));
    const auto y1 = std::max(y0 + 1, static_cast<std::size_t>(std::ceil((y + 1) * sy)));
    for (std::size_t x = 0; x < width; ++x) {
      const auto x0 = static_cast<std::size_t>(std::floor(x * sx));
      const auto x1 = std::max(x0 + 1, static_cast<std::size_t>(std::ceil((x + 1) * sx)));
      for (std::size_t c = 0; c < image.channels; ++c) {
        double acc = 0.0;
        std::size_t n = 0;
        for (std::size_t yy = y0; yy < std::min(y1, image.height); ++yy)
          for (std::size_t xx = x0; xx < std::min(x1, image.width); ++xx, ++n)
            acc += image.at(yy, xx, c);
        out.at(y, x, c) = n ? acc / static_cast<double>(n) : 0.0;
      }
    }
  }
  return out;
}

}  // namespace ktir
