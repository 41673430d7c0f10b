#include "kpt/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>

#include <jpeglib.h>

#include "kpt/error.hpp"

namespace kpt {

void quantize_255(std::vector<float>& values) {
  for (auto& v : values) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    v = from_byte(static_cast<std::uint8_t>(std::lround(c * 255.0)));
  }
}

float sample_bilinear(const Image& img, std::size_t channel, double x, double y) {
  const double fx0 = std::floor(x), fy0 = std::floor(y);
  const double fx = x - fx0, fy = y - fy0;
  const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
  auto px = [&](long yy, long xx) -> double {
    if (xx < 0 || yy < 0 || xx >= static_cast<long>(img.width) || yy >= static_cast<long>(img.height))
      return 0.0;
    return img.at(channel, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
  };
  double v = (1 - fx) * (1 - fy) * px(y0, x0);
  if (fx != 0) v += fx * (1 - fy) * px(y0, x0 + 1);
  if (fy != 0) v += (1 - fx) * fy * px(y0 + 1, x0);
  if (fx != 0 && fy != 0) v += fx * fy * px(y0 + 1, x0 + 1);
  return static_cast<float>(v);
}

Image warp_affine(const Image& src, const Affine2& m, std::size_t out_height, std::size_t out_width) {
  const auto inv = m.inverse();
  auto out = Image::zeros(src.channels, out_height, out_width);
  for (std::size_t y = 0; y < out_height; ++y)
    for (std::size_t x = 0; x < out_width; ++x) {
      double sx = 0, sy = 0;
      inv.apply(static_cast<double>(x), static_cast<double>(y), sx, sy);
      for (std::size_t c = 0; c < src.channels; ++c) out.at(c, y, x) = sample_bilinear(src, c, sx, sy);
    }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Image& img, std::size_t channel) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::string bytes(img.width * img.height, '\0');
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = std::clamp(static_cast<double>(img.at(channel, y, x)), 0.0, 1.0);
      bytes[y * img.width + x] = static_cast<char>(std::lround(v * 255.0));
    }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing image " + path.string());
}

namespace {

struct Pnm {
  int magic = 0;
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> bytes;
};

Pnm read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch = 0;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(ch))) {
        t.push_back(ch);
        break;
      }
    }
    while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) t.push_back(ch);
    return t;
  };
  Pnm p;
  const auto magic = token();
  if (magic == "P5") p.magic = 5;
  else if (magic == "P6") p.magic = 6;
  else throw IoError("unsupported image format in " + path.string() + " (expected P5 or P6)");
  try {
    p.width = std::stoul(token());
    p.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw IoError("image " + path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw IoError("malformed image header in " + path.string());
  }
  const std::size_t n = p.width * p.height * (p.magic == 6 ? 3 : 1);
  p.bytes.resize(n);
  in.read(reinterpret_cast<char*>(p.bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw IoError("image " + path.string() + " is truncated");
  return p;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void on_jpeg_error(j_common_ptr info) {
  auto* err = reinterpret_cast<JpegError*>(info->err);
  (*info->err->format_message)(info, err->message);
  std::longjmp(err->jump, 1);
}

Image read_jpeg(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, int (*)(std::FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw IoError("cannot read image " + path.string());
  jpeg_decompress_struct info{};
  JpegError err{};
  // Declared before setjmp so a longjmp never skips their destructors.
  std::vector<std::uint8_t> row;
  Image img;
  info.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = on_jpeg_error;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&info);
    throw IoError("cannot decode JPEG " + path.string() + ": " + err.message);
  }
  jpeg_create_decompress(&info);
  jpeg_stdio_src(&info, file.get());
  jpeg_read_header(&info, TRUE);
  info.out_color_space = JCS_RGB;
  jpeg_start_decompress(&info);
  const std::size_t w = info.output_width, h = info.output_height;
  row.resize(w * 3);
  img = Image::zeros(3, h, w);
  while (info.output_scanline < info.output_height) {
    const std::size_t y = info.output_scanline;
    JSAMPROW ptr = row.data();
    jpeg_read_scanlines(&info, &ptr, 1);
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = from_byte(row[x * 3 + c]);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  return img;
}

}  // namespace

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width,
                                   std::size_t& height) {
  auto p = read_pnm(path);
  if (p.magic != 5) throw IoError("expected a P5 graymap in " + path.string());
  width = p.width;
  height = p.height;
  return std::move(p.bytes);
}

Image read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  if (ext != ".pgm" && ext != ".ppm" && ext != ".pnm")
    throw IoError("unsupported image extension for " + path.string());
  auto p = read_pnm(path);
  auto img = Image::zeros(3, p.height, p.width);
  const std::size_t stride = p.magic == 6 ? 3 : 1;
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = from_byte(p.bytes[(y * p.width + x) * stride + (stride == 3 ? c : 0)]);
  return img;
}

}  // namespace kpt
