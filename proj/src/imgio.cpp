#include "fpvit/imgio.hpp"

#include <png.h>

#include <cstring>
#include <fstream>
#include <vector>

namespace fpvit {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "io";
    case ErrorKind::Decode: return "decode";
    case ErrorKind::UnsupportedFormat: return "unsupported-format";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::NoRidgeStructure: return "no-ridge-structure";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Invariant: return "invariant";
    case ErrorKind::ConfigMismatch: return "config-mismatch";
    case ErrorKind::VersionMismatch: return "version-mismatch";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::State: return "state";
  }
  return "unknown";
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

GrayImage load_png(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = read_file(path);

  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw Error(ErrorKind::Decode, "cannot decode '" + path.string() + "': " + image.message);

  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw Error(ErrorKind::UnsupportedFormat,
                "'" + path.string() + "': bit depth above 8 per channel is not supported");
  }

  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const Eigen::Index w = image.width, h = image.height;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr))
    throw Error(ErrorKind::Decode, "cannot decode '" + path.string() + "': " + image.message);

  GrayImage out(h, w);
  if (!color) {
    std::memcpy(out.data(), buffer.data(), buffer.size());
    return out;
  }
  for (Eigen::Index i = 0; i < w * h; ++i) {
    const double r = buffer[3 * i], g = buffer[3 * i + 1], b = buffer[3 * i + 2];
    out.data()[i] = quantize_u8(0.299 * r + 0.587 * g + 0.114 * b);
  }
  return out;
}

namespace {

void write_buffer(const std::filesystem::path& path, png_uint_32 w, png_uint_32 h,
                  png_uint_32 format, const png_byte* data) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = w;
  image.height = h;
  image.format = format;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&image, path.c_str(), 0, data, 0, nullptr))
    throw Error(ErrorKind::Io, "cannot write '" + path.string() + "': " + image.message);
}

}  // namespace

void write_png(const std::filesystem::path& path, const GrayImage& img) {
  if (img.size() == 0) throw Error(ErrorKind::InvalidArgument, "write_png: empty image");
  write_buffer(path, static_cast<png_uint_32>(img.cols()), static_cast<png_uint_32>(img.rows()),
               PNG_FORMAT_GRAY, img.data());
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  if (img.r.size() == 0 || img.g.rows() != img.r.rows() || img.b.rows() != img.r.rows() ||
      img.g.cols() != img.r.cols() || img.b.cols() != img.r.cols())
    throw Error(ErrorKind::InvalidArgument, "write_png: inconsistent RGB planes");
  std::vector<png_byte> interleaved(static_cast<std::size_t>(img.r.size()) * 3);
  for (Eigen::Index i = 0; i < img.r.size(); ++i) {
    interleaved[3 * i] = img.r.data()[i];
    interleaved[3 * i + 1] = img.g.data()[i];
    interleaved[3 * i + 2] = img.b.data()[i];
  }
  write_buffer(path, static_cast<png_uint_32>(img.r.cols()), static_cast<png_uint_32>(img.r.rows()),
               PNG_FORMAT_RGB, interleaved.data());
}

FloatImage standardize(const FloatImage& img) {
  const double n = static_cast<double>(img.size());
  const double mean = img.sum() / n;
  const double var = (img - mean).square().sum() / n;
  if (!(var > 0.0)) return FloatImage::Zero(img.rows(), img.cols());
  return (img - mean) / std::sqrt(var);
}

}  // namespace fpvit
