#include "draglab/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <png.h>

#include "draglab/errors.hpp"

namespace draglab {
namespace {

unsigned char to_byte(float v) {
  const float u = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(u * 255.0f));
}

float from_byte(unsigned char b) { return static_cast<float>(b) / 255.0f * 2.0f - 1.0f; }

std::vector<unsigned char> decode(const std::string& bytes, png_uint_32 format, int& w, int& h,
                                  const std::string& what) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw IoError("cannot decode PNG " + what + ": " + img.message);
  }
  img.format = format;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + what + ": " + img.message);
  }
  w = static_cast<int>(img.width);
  h = static_cast<int>(img.height);
  return buf;
}

std::string encode(const std::vector<unsigned char>& buf, png_uint_32 format, int w, int h) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, buf.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + img.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, buf.data(), 0, nullptr)) {
    throw IoError(std::string("PNG encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spill(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace

Tensor decode_png_rgb(const std::string& bytes) {
  int w = 0, h = 0;
  auto buf = decode(bytes, PNG_FORMAT_RGB, w, h, "image");
  Tensor t = Tensor::chw(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = from_byte(buf[(static_cast<std::size_t>(y) * w + x) * 3 + c]);
  return t;
}

Tensor read_png_rgb(const std::string& path) { return decode_png_rgb(slurp(path)); }

std::string encode_png_rgb(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encode_png_rgb expects [3,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image.at(c, y, x));
  return encode(buf, PNG_FORMAT_RGB, w, h);
}

void write_png_rgb(const std::string& path, const Tensor& image) { spill(path, encode_png_rgb(image)); }

Tensor decode_png_mask(const std::string& bytes) {
  int w = 0, h = 0;
  auto buf = decode(bytes, PNG_FORMAT_GRAY, w, h, "mask");
  Tensor m({h, w});
  for (std::size_t i = 0; i < buf.size(); ++i) m[i] = buf[i] >= 128 ? 1.0f : 0.0f;
  return m;
}

Tensor read_png_mask(const std::string& path) { return decode_png_mask(slurp(path)); }

std::string encode_png_mask(const Tensor& mask) {
  if (mask.rank() != 2) throw ShapeError("encode_png_mask expects [H,W]");
  std::vector<unsigned char> buf(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) buf[i] = mask[i] > 0.5f ? 255 : 0;
  return encode(buf, PNG_FORMAT_GRAY, mask.dim(1), mask.dim(0));
}

void write_png_mask(const std::string& path, const Tensor& mask) { spill(path, encode_png_mask(mask)); }

Tensor quantize_rgb(const Tensor& image) {
  Tensor q = image;
  for (float& v : q.vec()) v = from_byte(to_byte(v));
  return q;
}

}  // namespace draglab
