#include "lowkey/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <jpeglib.h>

#include "lowkey/error.hpp"
#include "lowkey/kernels.hpp"

namespace lowkey::imaging {

template <typename T>
BasicImage<T>::BasicImage(int height, int width, T fill) {
  if (height < 1 || width < 1) fail(ErrorCode::ShapeMismatch, "image dimensions must be positive");
  pixels_ = Tensor<T>(kChannels, height, width, std::clamp(fill, T(0), T(1)));
}

template <typename T>
BasicImage<T> BasicImage<T>::from_tensor(Tensor<T> pixels) {
  if (pixels.channels() != kChannels || pixels.height() < 1 || pixels.width() < 1)
    fail(ErrorCode::ShapeMismatch, "image tensor must be 3 x H x W with H, W >= 1");
  for (T v : pixels.values())
    if (!(v >= T(0) && v <= T(1))) fail(ErrorCode::ConfigError, "pixel value outside [0, 1]");
  BasicImage out;
  out.pixels_ = std::move(pixels);
  return out;
}

template <typename T>
void BasicImage<T>::set(int c, int y, int x, T value) {
  pixels_.at(c, y, x) = std::clamp(value, T(0), T(1));
}

template <typename T>
BasicImage<T> clip_to_range(Tensor<T> pixels) {
  if (pixels.channels() != BasicImage<T>::kChannels || pixels.height() < 1 || pixels.width() < 1)
    fail(ErrorCode::ShapeMismatch, "image tensor must be 3 x H x W with H, W >= 1");
  for (T& v : pixels.values()) {
    if (std::isnan(v)) v = T(0);
    v = std::clamp(v, T(0), T(1));
  }
  BasicImage<T> out;
  out.pixels_ = std::move(pixels);
  return out;
}

SmoothingKernel::SmoothingKernel(double sigma, int window) : sigma_(sigma), window_(window) {
  if (!(sigma > 0) || !std::isfinite(sigma)) fail(ErrorCode::InvalidKernel, "sigma must be positive");
  if (window < 1 || window % 2 == 0) fail(ErrorCode::InvalidKernel, "window must be a positive odd integer");
  const int r = window / 2;
  taps_.resize(window);
  double sum = 0;
  for (int k = -r; k <= r; ++k) {
    taps_[k + r] = std::exp(-0.5 * k * k / (sigma * sigma));
    sum += taps_[k + r];
  }
  for (double& t : taps_) t /= sum;
}

SmoothingKernel SmoothingKernel::full_support(double sigma) {
  if (!(sigma > 0)) fail(ErrorCode::InvalidKernel, "sigma must be positive");
  return SmoothingKernel(sigma, 2 * static_cast<int>(std::ceil(3 * sigma)) + 1);
}

std::vector<double> SmoothingKernel::weights_2d() const {
  std::vector<double> w(static_cast<std::size_t>(window_) * window_);
  for (int i = 0; i < window_; ++i)
    for (int j = 0; j < window_; ++j) w[i * window_ + j] = taps_[i] * taps_[j];
  return w;
}

template <typename T>
Tensor<T> smooth_tensor(const Tensor<T>& in, const SmoothingKernel& kernel) {
  Tensor<T> out(in.channels(), in.height(), in.width());
  if (kernel.window() == 1) {
    out = in;
    return out;
  }
  kernels::smooth_separable(in.channels(), in.height(), in.width(), kernel.taps(), in.data(), out.data());
  return out;
}

template <typename T>
Tensor<T> smooth_tensor_adjoint(const Tensor<T>& grad_out, const SmoothingKernel& kernel) {
  Tensor<T> grad_in(grad_out.channels(), grad_out.height(), grad_out.width());
  if (kernel.window() == 1) return grad_out;
  kernels::smooth_separable_adjoint(grad_out.channels(), grad_out.height(), grad_out.width(),
                                    kernel.taps(), grad_out.data(), grad_in.data());
  return grad_in;
}

template <typename T>
BasicImage<T> gaussian_smooth(const BasicImage<T>& img, const SmoothingKernel& kernel) {
  // Convex combination of in-range values; clipping only absorbs rounding.
  return clip_to_range(smooth_tensor(img.tensor(), kernel));
}

ImageTensor quantize_8bit(const ImageTensor& img) {
  Tensor<float> t = img.tensor();
  for (float& v : t.values()) v = std::round(v * 255.0f) / 255.0f;
  return clip_to_range(std::move(t));
}

namespace {

std::vector<std::uint8_t> interleave_8bit(const ImageTensor& img) {
  const int h = img.height();
  const int w = img.width();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
  return rgb;
}

ImageTensor from_interleaved(const std::uint8_t* rgb, int h, int w) {
  Tensor<float> t(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(c, y, x) = rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
  return ImageTensor::from_tensor(std::move(t));
}

ImageTensor decode_png(std::span<const std::uint8_t> bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    fail(ErrorCode::DecodeError, std::string("png: ") + image.message);
  image.format = PNG_FORMAT_RGB;
  if (image.width == 0 || image.height == 0 || image.width > 20000 || image.height > 20000) {
    png_image_free(&image);
    fail(ErrorCode::DecodeError, "png: unsupported dimensions");
  }
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string message = image.message;
    png_image_free(&image);
    fail(ErrorCode::DecodeError, "png: " + message);
  }
  return from_interleaved(buffer.data(), static_cast<int>(image.height), static_cast<int>(image.width));
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, mgr->message);
  std::longjmp(mgr->jump, 1);
}

void jpeg_silent(j_common_ptr, int) {}

ImageTensor decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  err.base.emit_message = jpeg_silent;
  std::vector<std::uint8_t> rgb;
  int h = 0;
  int w = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    fail(ErrorCode::DecodeError, std::string("jpeg: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  h = static_cast<int>(cinfo.output_height);
  w = static_cast<int>(cinfo.output_width);
  rgb.resize(static_cast<std::size_t>(h) * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(rgb.data(), h, w);
}

}  // namespace

std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  if (img.empty()) fail(ErrorCode::EncodeError, "empty image");
  const std::vector<std::uint8_t> rgb = interleave_8bit(img);
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr))
    fail(ErrorCode::EncodeError, std::string("png: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, rgb.data(), 0, nullptr))
    fail(ErrorCode::EncodeError, std::string("png: ") + image.message);
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> encode_jpeg(const ImageTensor& img, int quality) {
  if (quality < 1 || quality > 100) fail(ErrorCode::InvalidQuality, "quality must be in [1, 100]");
  if (img.empty()) fail(ErrorCode::EncodeError, "empty image");
  std::vector<std::uint8_t> rgb = interleave_8bit(img);
  jpeg_compress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  err.base.emit_message = jpeg_silent;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    fail(ErrorCode::EncodeError, std::string("jpeg: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width());
  cinfo.image_height = static_cast<JDIMENSION>(img.height());
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const int w = img.width();
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * w * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

ImageTensor decode(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kPng[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (bytes.size() >= 8 && std::equal(kPng, kPng + 8, bytes.begin())) return decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF)
    return decode_jpeg(bytes);
  fail(ErrorCode::DecodeError, "not a PNG or JPEG stream");
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

ImageTensor read_image(const std::filesystem::path& path) { return decode(read_bytes(path)); }

void write_png(const std::filesystem::path& path, const ImageTensor& img) {
  write_bytes(path, encode_png(img));
}

ImageTensor resize_bilinear(const ImageTensor& img, int height, int width) {
  if (height < 1 || width < 1) fail(ErrorCode::ShapeMismatch, "resize target must be positive");
  Tensor<float> out(3, height, width);
  const double sy = static_cast<double>(img.height()) / height;
  const double sx = static_cast<double>(img.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
        const double bottom = (1 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
        out.at(c, y, x) = static_cast<float>((1 - wy) * top + wy * bottom);
      }
    }
  }
  return clip_to_range(std::move(out));
}

std::uint64_t difference_hash(const ImageTensor& img) {
  const ImageTensor thumb = resize_bilinear(img, 8, 9);
  std::uint64_t hash = 0;
  int bit = 0;
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      auto luma = [&](int xx) {
        return 0.299 * thumb.at(0, y, xx) + 0.587 * thumb.at(1, y, xx) + 0.114 * thumb.at(2, y, xx);
      };
      if (luma(x) > luma(x + 1)) hash |= (std::uint64_t{1} << bit);
      ++bit;
    }
  }
  return hash;
}

int hamming_distance(std::uint64_t a, std::uint64_t b) noexcept { return std::popcount(a ^ b); }

template class BasicImage<float>;
template class BasicImage<double>;
template BasicImage<float> clip_to_range(Tensor<float>);
template BasicImage<double> clip_to_range(Tensor<double>);
template BasicImage<float> gaussian_smooth(const BasicImage<float>&, const SmoothingKernel&);
template BasicImage<double> gaussian_smooth(const BasicImage<double>&, const SmoothingKernel&);
template Tensor<float> smooth_tensor(const Tensor<float>&, const SmoothingKernel&);
template Tensor<double> smooth_tensor(const Tensor<double>&, const SmoothingKernel&);
template Tensor<float> smooth_tensor_adjoint(const Tensor<float>&, const SmoothingKernel&);
template Tensor<double> smooth_tensor_adjoint(const Tensor<double>&, const SmoothingKernel&);

}  // namespace lowkey::imaging
